//! Tensor loading (npy, safetensors, raw little-endian) and seeded synthetic
//! weight generators.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stored element type of a source tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F16,
    BF16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
                .collect(),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F16 => "f16",
            Dtype::BF16 => "bf16",
            Dtype::F32 => "f32",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f16" | "float16" | "binary16" => Ok(Dtype::F16),
            "bf16" | "bfloat16" => Ok(Dtype::BF16),
            "f32" | "float32" | "binary32" => Ok(Dtype::F32),
            _ => Err(Error::UnsupportedDtype(s.to_string())),
        }
    }
}

/// Synthetic weight distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthModel {
    /// i.i.d. N(0, 1).
    Gaussian,
    /// Gaussian, then in every 32-value block the largest element is replaced
    /// by 1.9x the second largest magnitude (sign kept).
    OutlierInjected,
    /// Alternating 32-value blocks: even blocks clustered near their maximum
    /// (magnitudes uniform in [0.55, 1]), odd blocks scattered (magnitudes
    /// log-uniform over six octaves). Each block gets a log-normal amplitude.
    ClusteredScatteredPairs,
}

impl FromStr for SynthModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SynthModel::Gaussian),
            "outliers" | "outlier_injected" => Ok(SynthModel::OutlierInjected),
            "pairs" | "clustered_scattered_pairs" => Ok(SynthModel::ClusteredScatteredPairs),
            _ => Err(Error::InvalidConfig(format!(
                "unknown synthetic model {s:?}"
            ))),
        }
    }
}

/// Block length the synthetic generators structure their output around.
pub const SYNTH_BLOCK: usize = 32;

pub fn synth_weights(model: SynthModel, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    match model {
        SynthModel::Gaussian => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
        SynthModel::OutlierInjected => {
            let mut v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            for block in v.chunks_mut(SYNTH_BLOCK).filter(|b| b.len() >= 2) {
                let (imax, _) = block
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                let second = block
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != imax)
                    .map(|(_, x)| x.abs())
                    .fold(0.0f32, f32::max);
                block[imax] = block[imax].signum() * 1.9 * second;
            }
            v
        }
        SynthModel::ClusteredScatteredPairs => {
            let clustered = Uniform::new_inclusive(0.55f64, 1.0).unwrap();
            let octaves = Uniform::new(0.0f64, 6.0).unwrap();
            let amplitude = Normal::new(0.0f64, 0.5).unwrap();
            let mut v = Vec::with_capacity(n);
            let mut block = 0usize;
            while v.len() < n {
                let a = amplitude.sample(&mut rng).exp();
                for _ in 0..SYNTH_BLOCK.min(n - v.len()) {
                    let mag = if block.is_multiple_of(2) {
                        clustered.sample(&mut rng)
                    } else {
                        (-octaves.sample(&mut rng)).exp2()
                    };
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    v.push((sign * a * mag) as f32);
                }
                block += 1;
            }
            v
        }
    }
}

/// Where a tensor comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorSource {
    Npy {
        path: PathBuf,
        /// When set, the stored dtype must match.
        dtype: Option<Dtype>,
    },
    Safetensors {
        path: PathBuf,
        /// Required when the file holds more than one tensor.
        name: Option<String>,
        dtype: Option<Dtype>,
    },
    Raw {
        path: PathBuf,
        dtype: Dtype,
        shape: Vec<usize>,
    },
    Synthetic {
        model: SynthModel,
        n: usize,
        seed: u64,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_dtype(expected: Option<Dtype>, found: Dtype) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(Error::DtypeMismatch {
            expected: e.to_string(),
            found: found.to_string(),
        }),
        _ => Ok(()),
    }
}

pub fn load_tensor(src: &TensorSource) -> Result<Tensor> {
    match src {
        TensorSource::Npy { path, dtype } => {
            let (t, found) = parse_npy(&read(path)?)?;
            check_dtype(*dtype, found)?;
            Ok(t)
        }
        TensorSource::Safetensors { path, name, dtype } => {
            let (t, found) = parse_safetensors(&read(path)?, name.as_deref())?;
            check_dtype(*dtype, found)?;
            Ok(t)
        }
        TensorSource::Raw { path, dtype, shape } => parse_raw(&read(path)?, *dtype, shape),
        TensorSource::Synthetic { model, n, seed } => {
            if *n == 0 {
                return Err(Error::EmptyInput);
            }
            Ok(Tensor::from_vec(synth_weights(*model, *n, *seed)))
        }
    }
}

fn decode_exact(
    data: &[u8],
    dtype: Dtype,
    shape: &[usize],
    section: &'static str,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let needed = n * dtype.size();
    if data.len() < needed {
        return Err(Error::Truncated {
            section,
            needed,
            available: data.len(),
        });
    }
    if data.len() > needed {
        return Err(Error::LengthMismatch {
            section,
            expected: needed,
            found: data.len(),
        });
    }
    let shape = if shape.is_empty() {
        vec![1]
    } else {
        shape.to_vec()
    };
    Tensor::new(shape, dtype.decode(data))
}

/// Raw little-endian values with an externally declared dtype and shape.
pub fn parse_raw(bytes: &[u8], dtype: Dtype, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::EmptyInput);
    }
    decode_exact(bytes, dtype, shape, "raw data")
}

fn npy_field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let at = header
        .find(&pat)
        .ok_or_else(|| Error::MalformedHeader(format!("npy header lacks {pat}")))?;
    let rest = header[at + pat.len()..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim_start)
        .ok_or_else(|| Error::MalformedHeader(format!("npy header: no ':' after {pat}")))
}

/// Parses an npy v1/v2/v3 file holding little-endian `f2` or `f4` values.
pub fn parse_npy(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    const MAGIC: &[u8] = b"\x93NUMPY";
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            section: "npy preamble",
            needed: 10,
            available: bytes.len(),
        });
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::MalformedHeader("missing npy magic".into()));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Truncated {
                    section: "npy preamble",
                    needed: 12,
                    available: bytes.len(),
                });
            }
            (
                u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
                12,
            )
        }
        v => {
            return Err(Error::MalformedHeader(format!(
                "npy version {v} not supported"
            )))
        }
    };
    let end = start + header_len;
    if bytes.len() < end {
        return Err(Error::Truncated {
            section: "npy header",
            needed: header_len,
            available: bytes.len() - start,
        });
    }
    let header = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::MalformedHeader("npy header is not text".into()))?;

    let descr = npy_field(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|d| d.split('\'').next())
        .ok_or_else(|| Error::MalformedHeader("npy descr is not a string".into()))?;
    let dtype = match descr {
        "<f4" => Dtype::F32,
        "<f2" => Dtype::F16,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    if npy_field(header, "fortran_order")?.starts_with("True") {
        return Err(Error::MalformedHeader(
            "fortran-ordered npy arrays are not supported".into(),
        ));
    }
    let shape_src = npy_field(header, "shape")?;
    let shape_src = shape_src
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::MalformedHeader("npy shape is not a tuple".into()))?;
    let shape = shape_src
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("bad npy dimension {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::EmptyInput);
    }
    Ok((
        decode_exact(&bytes[end..], dtype, &shape, "npy data")?,
        dtype,
    ))
}

/// Serializes a tensor as npy v1 (`<f4`, or `<f2` when `dtype` is F16).
///
/// bfloat16 has no npy type; such data is written as `<f4`.
pub fn npy_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let descr = if dtype == Dtype::F16 { "<f2" } else { "<f4" };
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let shape = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + t.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &x in t.data() {
        if dtype == Dtype::F16 {
            out.extend_from_slice(&f16::from_f32(x).to_le_bytes());
        } else {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_npy(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, npy_bytes(t, dtype)).map_err(|e| Error::io(path, e))
}

/// Reads one tensor from a safetensors file (F16, BF16 or F32 only).
pub fn parse_safetensors(bytes: &[u8], name: Option<&str>) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            section: "safetensors header length",
            needed: 8,
            available: bytes.len(),
        });
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() - 8 < n {
        return Err(Error::Truncated {
            section: "safetensors header",
            needed: n,
            available: bytes.len() - 8,
        });
    }
    let header: Value = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| Error::MalformedHeader(format!("safetensors JSON: {e}")))?;
    let entries = header
        .as_object()
        .ok_or_else(|| Error::MalformedHeader("safetensors header is not an object".into()))?;
    let mut names: Vec<&String> = entries.keys().filter(|k| *k != "__metadata__").collect();
    names.sort();
    let chosen = match name {
        Some(want) => names
            .iter()
            .find(|k| k.as_str() == want)
            .ok_or_else(|| Error::UnknownTensor(want.to_string()))?,
        None if names.len() == 1 => names[0],
        None => {
            return Err(Error::UnknownTensor(format!(
                "<unnamed>; file holds {}",
                names
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    };
    let entry = &entries[chosen.as_str()];
    let malformed = |what: &str| Error::MalformedHeader(format!("tensor {chosen:?}: {what}"));
    let dtype = match entry["dtype"]
        .as_str()
        .ok_or_else(|| malformed("missing dtype"))?
    {
        "F16" => Dtype::F16,
        "BF16" => Dtype::BF16,
        "F32" => Dtype::F32,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    let dims = |v: &Value, what: &str| -> Result<Vec<usize>> {
        v.as_array()
            .ok_or_else(|| malformed(what))?
            .iter()
            .map(|d| {
                d.as_u64()
                    .map(|d| d as usize)
                    .ok_or_else(|| malformed(what))
            })
            .collect()
    };
    let shape = dims(&entry["shape"], "bad shape")?;
    let offsets = dims(&entry["data_offsets"], "bad data_offsets")?;
    let [begin, end] = offsets[..] else {
        return Err(malformed("data_offsets must have two entries"));
    };
    if end < begin {
        return Err(malformed("data_offsets are reversed"));
    }
    let data = &bytes[8 + n..];
    if end > data.len() {
        return Err(Error::Truncated {
            section: "safetensors data",
            needed: end,
            available: data.len(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::EmptyInput);
    }
    Ok((
        decode_exact(&data[begin..end], dtype, &shape, "safetensors tensor")?,
        dtype,
    ))
}
