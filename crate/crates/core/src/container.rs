//! Packed tensors and the `.nxt` file layout.
//!
//! ```text
//! "NXT1" | version: u32 LE | header_len: u32 LE | header (UTF-8 key=value lines)
//! | e_shared bytes, one per block (E + 127, 0xFF = all-zero block)
//! | sidecar: per block [m_nano: 2 bits if nano][fmt: 1 bit if adaptive]
//! | payload: element codes, B bits each, block-major
//! ```
//!
//! Bit fields are packed LSB-first into little-endian bytes; the sidecar and
//! the payload are each zero-padded to a byte boundary.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{BlockScale, ElementKind, QuantConfig, QuantizedBlock};

pub const MAGIC: [u8; 4] = *b"NXT1";
pub const VERSION: u32 = 1;
const ZERO_BLOCK: u8 = 0xFF;
const EXP_BIAS: i32 = 127;

/// A quantized tensor: shape, configuration, per-block scales and packed codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedTensor {
    shape: Vec<usize>,
    logical_len: usize,
    cfg: QuantConfig,
    scales: Vec<BlockScale>,
    payload: Vec<u8>,
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    pending: u32,
}

impl BitWriter {
    fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            acc: 0,
            pending: 0,
        }
    }

    fn push(&mut self, value: u8, bits: u32) {
        self.acc |= ((value as u64) & ((1 << bits) - 1)) << self.pending;
        self.pending += bits;
        while self.pending >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.pending -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.pending > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

/// Reads `bits <= 8` bits starting at `offset` (LSB-first).
fn read_bits(bytes: &[u8], offset: usize, bits: u32) -> u8 {
    let i = offset / 8;
    let window = bytes[i] as u16 | (bytes.get(i + 1).copied().unwrap_or(0) as u16) << 8;
    ((window >> (offset % 8)) & ((1 << bits) - 1)) as u8
}

fn trailing_bits_clear(bytes: &[u8], used_bits: usize) -> bool {
    match (bytes.last(), used_bits % 8) {
        (Some(&last), r) if r != 0 => last >> r == 0,
        _ => true,
    }
}

impl PackedTensor {
    pub fn from_blocks(
        shape: Vec<usize>,
        cfg: QuantConfig,
        blocks: &[QuantizedBlock],
    ) -> Result<Self> {
        cfg.validate()?;
        let logical_len: usize = shape.iter().product();
        if logical_len == 0 || shape.is_empty() {
            return Err(Error::EmptyInput);
        }
        let expected = logical_len.div_ceil(cfg.block_size);
        if blocks.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} blocks for {logical_len} values at block size {}, expected {expected}",
                blocks.len(),
                cfg.block_size
            )));
        }
        let bits = cfg.element_bits as u32;
        let mut w = BitWriter::with_capacity(blocks.len() * cfg.block_size * bits as usize);
        for b in blocks {
            if b.codes.len() != cfg.block_size {
                return Err(Error::ShapeMismatch(format!(
                    "block has {} codes, expected {}",
                    b.codes.len(),
                    cfg.block_size
                )));
            }
            for &c in &b.codes {
                w.push(c, bits);
            }
        }
        Ok(Self {
            shape,
            logical_len,
            cfg,
            scales: blocks.iter().map(|b| b.scale).collect(),
            payload: w.finish(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn config(&self) -> &QuantConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &[BlockScale] {
        &self.scales
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    /// Codes of block `k`, read directly from its fixed payload offset.
    pub fn block_codes(&self, k: usize) -> Vec<u8> {
        let bs = self.cfg.block_size;
        let bits = self.cfg.element_bits as u32;
        let start = k * bs * bits as usize;
        (0..bs)
            .map(|i| read_bits(&self.payload, start + i * bits as usize, bits))
            .collect()
    }

    /// Logical number of values stored in block `k`.
    pub fn block_len(&self, k: usize) -> usize {
        let bs = self.cfg.block_size;
        bs.min(self.logical_len - k * bs)
    }

    /// Exact storage cost of scales and payload before byte alignment.
    pub fn footprint_bits(&self) -> u64 {
        let per_block = (self.cfg.element_bits as u64) * self.cfg.block_size as u64
            + self.cfg.scale_bits() as u64;
        self.num_blocks() as u64 * per_block
    }

    fn sidecar_bits(&self) -> u32 {
        self.cfg.scale_bits() - 8
    }

    fn header_text(&self) -> String {
        let c = &self.cfg;
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!(
            "shape={}\nlogical_len={}\nblock_size={}\nelement_bits={}\nmicroexp_bits={}\n\
             nano={}\nadaptive={}\nrecycle={}\nrecycle_rule={}\nrecycle_sign={}\nnano_search={}\n",
            shape.join(","),
            self.logical_len,
            c.block_size,
            c.element_bits,
            c.microexp_bits,
            c.nano_enabled,
            c.adaptive_enabled,
            c.recycle_enabled,
            c.recycle_rule,
            c.recycle_sign,
            c.nano_search,
        )
    }

    pub fn serialize(&self) -> Vec<u8> {
        let header = self.header_text();
        let side = self.sidecar_bits();
        let mut out =
            Vec::with_capacity(12 + header.len() + self.num_blocks() * 2 + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for s in &self.scales {
            out.push(match s.e_shared {
                Some(e) => (e as i32 + EXP_BIAS) as u8,
                None => ZERO_BLOCK,
            });
        }
        if side > 0 {
            let mut w = BitWriter::with_capacity(self.num_blocks() * side as usize);
            for s in &self.scales {
                if self.cfg.nano_enabled {
                    w.push(s.m_nano, 2);
                }
                if self.cfg.adaptive_enabled {
                    w.push(s.fmt.bit(), 1);
                }
            }
            out.extend_from_slice(&w.finish());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take("magic", 4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(cur.take("version", 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(cur.take("header length", 4)?.try_into().unwrap());
        let header = std::str::from_utf8(cur.take("header", header_len as usize)?)
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let (shape, logical_len, cfg) = parse_header(header)?;

        let blocks = logical_len.div_ceil(cfg.block_size);
        let exps = cur.take("scales", blocks)?;
        let side = cfg.scale_bits() - 8;
        let side_bits = blocks * side as usize;
        let sidecar = cur.take("scale sidecar", side_bits.div_ceil(8))?;
        if !trailing_bits_clear(sidecar, side_bits) {
            return Err(Error::MalformedHeader(
                "non-zero sidecar padding bits".into(),
            ));
        }
        let payload_bits = blocks * cfg.block_size * cfg.element_bits as usize;
        let payload = cur.take("payload", payload_bits.div_ceil(8))?;
        if !trailing_bits_clear(payload, payload_bits) {
            return Err(Error::MalformedHeader(
                "non-zero payload padding bits".into(),
            ));
        }
        if cur.pos != bytes.len() {
            return Err(Error::LengthMismatch {
                section: "stream",
                expected: cur.pos,
                found: bytes.len(),
            });
        }

        let mut scales = Vec::with_capacity(blocks);
        let mut offset = 0usize;
        for &e in exps {
            let mut m_nano = 0;
            let mut fmt = cfg.configured_kind();
            if cfg.nano_enabled {
                m_nano = read_bits(sidecar, offset, 2);
                offset += 2;
            }
            if cfg.adaptive_enabled {
                fmt = ElementKind::from_bit(read_bits(sidecar, offset, 1));
                offset += 1;
            }
            scales.push(BlockScale {
                e_shared: (e != ZERO_BLOCK).then(|| (e as i32 - EXP_BIAS) as i8),
                m_nano,
                fmt,
            });
        }
        Ok(Self {
            shape,
            logical_len,
            cfg,
            scales,
            payload: payload.to_vec(),
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::deserialize(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, section: &'static str, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                section,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn parse_header(text: &str) -> Result<(Vec<usize>, usize, QuantConfig)> {
    let bad = |msg: String| Error::MalformedHeader(msg);
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {line:?} is not key=value")))?;
        if fields.insert(k, v).is_some() {
            return Err(bad(format!("duplicate key {k:?}")));
        }
    }
    let mut get = |k: &str| {
        fields
            .remove(k)
            .ok_or_else(|| bad(format!("missing key {k:?}")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::MalformedHeader(format!("{k}={v:?} is not a number")))
    }
    fn flag(k: &str, v: &str) -> Result<bool> {
        v.parse()
            .map_err(|_| Error::MalformedHeader(format!("{k}={v:?} is not a boolean")))
    }

    let shape = get("shape")?
        .split(',')
        .map(|d| num::<usize>("shape", d))
        .collect::<Result<Vec<_>>>()?;
    let logical_len: usize = num("logical_len", get("logical_len")?)?;
    let cfg = QuantConfig {
        block_size: num("block_size", get("block_size")?)?,
        element_bits: num("element_bits", get("element_bits")?)?,
        microexp_bits: num("microexp_bits", get("microexp_bits")?)?,
        nano_enabled: flag("nano", get("nano")?)?,
        adaptive_enabled: flag("adaptive", get("adaptive")?)?,
        recycle_enabled: flag("recycle", get("recycle")?)?,
        recycle_rule: get("recycle_rule")?
            .parse()
            .map_err(|e| bad(format!("{e}")))?,
        recycle_sign: get("recycle_sign")?
            .parse()
            .map_err(|e| bad(format!("{e}")))?,
        nano_search: get("nano_search")?
            .parse()
            .map_err(|e| bad(format!("{e}")))?,
    };
    if let Some(k) = fields.keys().next() {
        return Err(bad(format!("unknown key {k:?}")));
    }
    cfg.validate()
        .map_err(|e| bad(format!("invalid configuration: {e}")))?;
    if shape.contains(&0) || logical_len == 0 {
        return Err(Error::EmptyInput);
    }
    if shape.iter().product::<usize>() != logical_len {
        return Err(bad(format!(
            "shape {shape:?} does not hold {logical_len} values"
        )));
    }
    Ok((shape, logical_len, cfg))
}

/// Bits per element including amortized block metadata.
pub fn footprint_bits_per_element(cfg: &QuantConfig) -> f64 {
    cfg.element_bits as f64 + cfg.scale_bits() as f64 / cfg.block_size as f64
}
