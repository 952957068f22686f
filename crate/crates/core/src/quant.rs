//! Per-block quantization: shared exponent, NanoMantissa, and the MSE-driven
//! choice between microexponent (MxFP) and block floating-point elements.
//!
//! A block with largest magnitude `V_max` gets `E = floor(log2 V_max)`. Each
//! candidate `(m, kind)` reconstructs element `i` as
//! `level_i * (1 + m/4) * 2^(E - emax_kind)`; the candidate with the smallest
//! mean squared error in the original value space wins. Candidates are
//! visited NanoMantissa-first, MxFP before BFP, and a later candidate must be
//! strictly better to replace an earlier one.
//!
//! Two rules keep the output a fixed point of `quantize . dequantize`:
//!
//! * a candidate is only admissible when its largest reconstructed magnitude
//!   still has exponent `E` (so the stored shared exponent remains the block's
//!   `E_max` after decoding), and
//! * the winner is replaced by the first candidate in visiting order that
//!   reproduces the winner's reconstruction exactly.
//!
//! Neither rule changes the achieved MSE except through admissibility.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::container::PackedTensor;
use crate::error::{Error, Result};
use crate::formats::{
    floor_log2, pow2, ElementFormat, LevelTable, RecycleRule, RecycleSign, Recycling,
};
use crate::sum::ExactSum;

/// How NanoMantissa candidates are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NanoSearch {
    /// `{nano_candidate, 0}`, as in the MSE-based quantization algorithm.
    AsAlgorithm1,
    /// All four NanoMantissa values.
    #[default]
    Exhaustive4,
}

impl fmt::Display for NanoSearch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NanoSearch::AsAlgorithm1 => "alg1",
            NanoSearch::Exhaustive4 => "exhaustive",
        })
    }
}

impl FromStr for NanoSearch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(NanoSearch::AsAlgorithm1),
            "exhaustive" => Ok(NanoSearch::Exhaustive4),
            _ => Err(Error::InvalidConfig(format!("unknown nano search {s:?}"))),
        }
    }
}

/// The per-block format indicator bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    /// `fmt = 0`: all element bits after the sign are mantissa.
    Bfp,
    /// `fmt = 1`: elements carry microexponents.
    Mx,
}

impl ElementKind {
    pub fn bit(self) -> u8 {
        match self {
            ElementKind::Bfp => 0,
            ElementKind::Mx => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Self {
        if bit & 1 == 1 {
            ElementKind::Mx
        } else {
            ElementKind::Bfp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantConfig {
    pub block_size: usize,
    pub element_bits: u8,
    pub microexp_bits: u8,
    pub nano_enabled: bool,
    pub adaptive_enabled: bool,
    pub recycle_enabled: bool,
    pub recycle_rule: RecycleRule,
    pub recycle_sign: RecycleSign,
    pub nano_search: NanoSearch,
}

pub const DEFAULT_BLOCK_SIZE: usize = 32;

impl QuantConfig {
    /// Microexponent width used when a format name gives none.
    pub fn default_microexp_bits(element_bits: u8) -> u8 {
        match element_bits {
            0..=3 => 1,
            4..=6 => 2,
            7 => 3,
            _ => 4,
        }
    }

    fn plain(element_bits: u8, microexp_bits: u8) -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            element_bits,
            microexp_bits,
            nano_enabled: false,
            adaptive_enabled: false,
            recycle_enabled: false,
            recycle_rule: RecycleRule::HalfSmallest,
            recycle_sign: RecycleSign::Negative,
            nano_search: NanoSearch::default(),
        }
    }

    pub fn mxfp(element_bits: u8, microexp_bits: u8) -> Self {
        Self::plain(element_bits, microexp_bits)
    }

    pub fn bfp(element_bits: u8) -> Self {
        Self::plain(element_bits, 0)
    }

    /// NanoMantissa, adaptive microexponents and code recycling all enabled.
    pub fn nxfp(element_bits: u8, microexp_bits: u8) -> Self {
        Self {
            nano_enabled: true,
            adaptive_enabled: true,
            recycle_enabled: true,
            ..Self::plain(element_bits, microexp_bits)
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.element_bits;
        if !(3..=8).contains(&b) {
            return Err(Error::InvalidConfig(format!(
                "element bits {b} outside 3..=8"
            )));
        }
        if self.microexp_bits + 2 > b {
            return Err(Error::InvalidConfig(format!(
                "{} microexponent bits leave no mantissa in a {b}-bit element",
                self.microexp_bits
            )));
        }
        if self.block_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "block size {} is below 2",
                self.block_size
            )));
        }
        if self.adaptive_enabled && self.microexp_bits == 0 {
            return Err(Error::InvalidConfig(
                "adaptive microexponents need at least one microexponent bit".into(),
            ));
        }
        Ok(())
    }

    pub fn mx_format(&self) -> Result<ElementFormat> {
        ElementFormat::new(
            self.microexp_bits,
            self.element_bits - 1 - self.microexp_bits,
        )
    }

    pub fn bfp_format(&self) -> Result<ElementFormat> {
        ElementFormat::bfp(self.element_bits)
    }

    /// Element kind used when the block does not choose adaptively.
    pub fn configured_kind(&self) -> ElementKind {
        if self.microexp_bits == 0 {
            ElementKind::Bfp
        } else {
            ElementKind::Mx
        }
    }

    pub fn recycling(&self) -> Option<Recycling> {
        self.recycle_enabled.then_some(Recycling {
            rule: self.recycle_rule,
            sign: self.recycle_sign,
        })
    }

    /// Per-block metadata bits: shared exponent, NanoMantissa, format bit.
    pub fn scale_bits(&self) -> u32 {
        8 + 2 * self.nano_enabled as u32 + self.adaptive_enabled as u32
    }

    /// Short name such as `nxfp4`, `mxfp6-e3m2` or `mxfp4+nm`.
    pub fn name(&self) -> String {
        let b = self.element_bits;
        let all = self.nano_enabled && self.adaptive_enabled && self.recycle_enabled;
        let none = !self.nano_enabled && !self.adaptive_enabled && !self.recycle_enabled;
        let mut s = if all {
            format!("nxfp{b}")
        } else if self.microexp_bits == 0 {
            format!("bfp{b}")
        } else {
            format!("mxfp{b}")
        };
        if self.microexp_bits != 0 && self.microexp_bits != Self::default_microexp_bits(b) {
            s.push_str(&format!(
                "-e{}m{}",
                self.microexp_bits,
                b - 1 - self.microexp_bits
            ));
        }
        if !all && !none {
            for (on, tag) in [
                (self.nano_enabled, "+nm"),
                (self.adaptive_enabled, "+am"),
                (self.recycle_enabled, "+cr"),
            ] {
                if on {
                    s.push_str(tag);
                }
            }
        }
        s
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Shared scale of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockScale {
    /// Block `E_max`; `None` marks an all-zero block.
    pub e_shared: Option<i8>,
    /// NanoMantissa code: the block is scaled by `1 + m_nano / 4`.
    pub m_nano: u8,
    pub fmt: ElementKind,
}

impl BlockScale {
    pub fn zero(fmt: ElementKind) -> Self {
        Self {
            e_shared: None,
            m_nano: 0,
            fmt,
        }
    }

    pub fn nano_factor(&self) -> f64 {
        1.0 + self.m_nano as f64 / 4.0
    }
}

/// Error statistics of one quantized block over its logical elements.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockReport {
    pub len: usize,
    /// Correctly rounded sum of squared errors.
    pub sum_sq: f64,
    pub mse: f64,
    /// Correctly rounded sum of absolute errors.
    pub sum_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub scale: BlockScale,
    /// One code per lane, `block_size` long; padded lanes hold code 0.
    pub codes: Vec<u8>,
    pub report: BlockReport,
}

/// Largest `|v|` exponent of a block, `None` when every value is zero.
pub fn shared_exponent(block: &[f32]) -> Result<Option<i32>> {
    if block.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut vmax = 0.0f32;
    for (index, &value) in block.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
        vmax = vmax.max(value.abs());
    }
    if vmax == 0.0 {
        return Ok(None);
    }
    Ok(Some(floor_log2(vmax as f64)))
}

/// NanoMantissa code `m` whose factor `1 + m/4` is nearest to the ratio of the
/// block maximum (in `table`'s canonical space) to the largest level.
pub fn nano_candidate(block: &[f32], e_shared: i32, table: &LevelTable) -> u8 {
    let vmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    let scaled_max = vmax * pow2(table.emax() - e_shared);
    let ratio = scaled_max / table.max_level();
    ((ratio - 1.0) * 4.0).round().clamp(0.0, 3.0) as u8
}

/// Quantizes blocks under one configuration, reusing its level tables.
#[derive(Debug, Clone)]
pub struct Codec {
    cfg: QuantConfig,
    mx: LevelTable,
    bfp: LevelTable,
}

struct Trial {
    m_nano: u8,
    kind: ElementKind,
    codes: Vec<u8>,
    recon: Vec<f64>,
    sum_sq: f64,
}

impl Codec {
    pub fn new(cfg: QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let recycling = cfg.recycling();
        Ok(Self {
            mx: LevelTable::build(cfg.mx_format()?, recycling)?,
            bfp: LevelTable::build(cfg.bfp_format()?, recycling)?,
            cfg,
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.cfg
    }

    pub fn table(&self, kind: ElementKind) -> &LevelTable {
        match kind {
            ElementKind::Mx => &self.mx,
            ElementKind::Bfp => &self.bfp,
        }
    }

    /// Scale from a table's canonical space to the original value space.
    pub fn block_multiplier(&self, scale: &BlockScale) -> f64 {
        match scale.e_shared {
            None => 0.0,
            Some(e) => scale.nano_factor() * pow2(e as i32 - self.table(scale.fmt).emax()),
        }
    }

    /// Exact reconstruction of every lane in `f64`.
    pub fn reconstruct(&self, scale: &BlockScale, codes: &[u8]) -> Vec<f64> {
        let table = self.table(scale.fmt);
        let mult = self.block_multiplier(scale);
        codes.iter().map(|&c| table.decode(c) * mult).collect()
    }

    fn candidates(&self, values: &[f32], e_shared: i32) -> Vec<(u8, ElementKind)> {
        let nanos: Vec<u8> = if !self.cfg.nano_enabled {
            vec![0]
        } else {
            match self.cfg.nano_search {
                NanoSearch::AsAlgorithm1 => {
                    let table = self.table(self.cfg.configured_kind());
                    match nano_candidate(values, e_shared, table) {
                        0 => vec![0],
                        m => vec![m, 0],
                    }
                }
                NanoSearch::Exhaustive4 => vec![0, 1, 2, 3],
            }
        };
        let kinds: &[ElementKind] = if self.cfg.adaptive_enabled {
            &[ElementKind::Mx, ElementKind::Bfp]
        } else if self.cfg.configured_kind() == ElementKind::Mx {
            &[ElementKind::Mx]
        } else {
            &[ElementKind::Bfp]
        };
        nanos
            .into_iter()
            .flat_map(|m| kinds.iter().map(move |&k| (m, k)))
            .collect()
    }

    fn trial(&self, values: &[f64], e_shared: i32, m_nano: u8, kind: ElementKind) -> Option<Trial> {
        let table = self.table(kind);
        let scale = (1.0 + m_nano as f64 / 4.0) * pow2(e_shared - table.emax());
        let mut codes = Vec::with_capacity(values.len());
        let mut recon = Vec::with_capacity(values.len());
        let mut sq = ExactSum::new();
        let mut rmax = 0.0f64;
        for &v in values {
            let code = table.nearest(v, scale);
            let r = table.decode(code) * scale;
            let err = v - r;
            sq.add(err * err);
            rmax = rmax.max(r.abs());
            codes.push(code);
            recon.push(r);
        }
        if rmax == 0.0 || floor_log2(rmax) != e_shared {
            return None;
        }
        Some(Trial {
            m_nano,
            kind,
            codes,
            recon,
            sum_sq: sq.value(),
        })
    }

    /// Quantizes up to `block_size` values; shorter input is zero-padded and
    /// the padding is excluded from the error report.
    pub fn quantize_block(&self, values: &[f32]) -> Result<QuantizedBlock> {
        let bs = self.cfg.block_size;
        if values.len() > bs {
            return Err(Error::ShapeMismatch(format!(
                "block of {} values exceeds block size {bs}",
                values.len()
            )));
        }
        let Some(e_shared) = shared_exponent(values)? else {
            return Ok(QuantizedBlock {
                scale: BlockScale::zero(self.cfg.configured_kind()),
                codes: vec![0; bs],
                report: BlockReport {
                    len: values.len(),
                    ..Default::default()
                },
            });
        };
        if !(-127..=127).contains(&e_shared) {
            return Err(Error::ExponentOutOfRange { exponent: e_shared });
        }

        let candidates = self.candidates(values, e_shared);
        let input: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let mut best: Option<Trial> = None;
        for &(m, kind) in &candidates {
            if let Some(t) = self.trial(&input, e_shared, m, kind) {
                if best.as_ref().is_none_or(|b| t.sum_sq < b.sum_sq) {
                    best = Some(t);
                }
            }
        }
        let mut best = best.expect("m_nano = 0 is always admissible");

        // Canonical representative: earliest candidate with the same reconstruction.
        if candidates.len() > 1 {
            for &(m, kind) in &candidates {
                if (m, kind) == (best.m_nano, best.kind) {
                    break;
                }
                if let Some(t) = self.trial(&best.recon, e_shared, m, kind) {
                    if t.sum_sq == 0.0 && t.recon == best.recon {
                        best = Trial {
                            sum_sq: best.sum_sq,
                            ..t
                        };
                        break;
                    }
                }
            }
        }

        let mut abs = ExactSum::new();
        let mut max_abs = 0.0f64;
        for (&v, &r) in input.iter().zip(&best.recon) {
            let e = (v - r).abs();
            abs.add(e);
            max_abs = max_abs.max(e);
        }
        let n = values.len();
        let mut codes = best.codes;
        codes.resize(bs, 0);
        Ok(QuantizedBlock {
            scale: BlockScale {
                e_shared: Some(e_shared as i8),
                m_nano: best.m_nano,
                fmt: best.kind,
            },
            codes,
            report: BlockReport {
                len: n,
                sum_sq: best.sum_sq,
                mse: best.sum_sq / n as f64,
                sum_abs: abs.value(),
                max_abs,
            },
        })
    }

    /// Quantizes consecutive `block_size` chunks of `values` in parallel.
    /// The result does not depend on scheduling; the first failing block in
    /// index order is reported.
    pub fn quantize_blocks(&self, values: &[f32]) -> Result<Vec<QuantizedBlock>> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let results: Vec<Result<QuantizedBlock>> = values
            .par_chunks(self.cfg.block_size)
            .map(|chunk| self.quantize_block(chunk))
            .collect();
        results
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| e.in_block(i)))
            .collect()
    }

    pub fn quantize_tensor(&self, values: &[f32], shape: &[usize]) -> Result<PackedTensor> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        let blocks = self.quantize_blocks(values)?;
        PackedTensor::from_blocks(shape.to_vec(), self.cfg, &blocks)
    }
}

pub fn quantize_block(block: &[f32], cfg: &QuantConfig) -> Result<QuantizedBlock> {
    Codec::new(*cfg)?.quantize_block(block)
}

pub fn quantize_tensor(values: &[f32], shape: &[usize], cfg: &QuantConfig) -> Result<PackedTensor> {
    Codec::new(*cfg)?.quantize_tensor(values, shape)
}
