//! Decoding packed blocks back to binary16, bfloat16 or binary32.
//!
//! Decoding follows the hardware-friendly order: slice the sign and magnitude
//! fields, remap the recycled `-0` code, multiply the element significand by
//! the NanoMantissa significand `4 + m`, add the exponents, and only then round
//! to the target precision. Every intermediate is an exact integer times a
//! power of two, so binary32 output is exact.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use rayon::prelude::*;

use crate::container::PackedTensor;
use crate::error::{Error, Result};
use crate::formats::pow2;
use crate::quant::{BlockScale, Codec, QuantConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DequantTarget {
    Binary16,
    BFloat16,
    #[default]
    Binary32,
}

impl DequantTarget {
    /// Rounds an exact value to the target (nearest, ties to even) and widens to `f32`.
    pub fn round(self, x: f64) -> f32 {
        match self {
            DequantTarget::Binary32 => x as f32,
            DequantTarget::Binary16 => f16::from_f64(x).to_f32(),
            DequantTarget::BFloat16 => bf16::from_f64(x).to_f32(),
        }
    }
}

impl fmt::Display for DequantTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DequantTarget::Binary16 => "f16",
            DequantTarget::BFloat16 => "bf16",
            DequantTarget::Binary32 => "f32",
        })
    }
}

impl FromStr for DequantTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" | "binary16" => Ok(DequantTarget::Binary16),
            "bf16" | "bfloat16" => Ok(DequantTarget::BFloat16),
            "f32" | "binary32" => Ok(DequantTarget::Binary32),
            _ => Err(Error::UnsupportedDtype(s.to_string())),
        }
    }
}

impl Codec {
    /// Decodes one block of codes.
    pub fn dequantize_block(
        &self,
        scale: &BlockScale,
        codes: &[u8],
        target: DequantTarget,
    ) -> Vec<f32> {
        let Some(e_shared) = scale.e_shared else {
            return vec![0.0; codes.len()];
        };
        let table = self.table(scale.fmt);
        let nano_sig = 4 + scale.m_nano as i64;
        let exp_offset = e_shared as i32 - table.emax() - 2;
        codes
            .iter()
            .map(|&code| {
                // Field slicing and recycled-code remap happen in the table lookup.
                let d = table.dyadic(code);
                let sig = d.sig * nano_sig;
                let exp = d.exp + exp_offset;
                target.round(sig as f64 * pow2(exp))
            })
            .collect()
    }

    /// Decodes a whole tensor, dropping block padding.
    pub fn dequantize_tensor(&self, t: &PackedTensor, target: DequantTarget) -> Result<Tensor> {
        if t.config() != self.config() {
            return Err(Error::InvalidConfig(
                "packed tensor was written with a different configuration".into(),
            ));
        }
        let blocks: Vec<Vec<f32>> = (0..t.num_blocks())
            .into_par_iter()
            .map(|k| {
                let mut v = self.dequantize_block(&t.scales()[k], &t.block_codes(k), target);
                v.truncate(t.block_len(k));
                v
            })
            .collect();
        Tensor::new(t.shape().to_vec(), blocks.concat())
    }
}

pub fn dequantize_block(
    scale: &BlockScale,
    codes: &[u8],
    cfg: &QuantConfig,
    target: DequantTarget,
) -> Result<Vec<f32>> {
    Ok(Codec::new(*cfg)?.dequantize_block(scale, codes, target))
}

pub fn dequantize_tensor(t: &PackedTensor, target: DequantTarget) -> Result<Tensor> {
    Codec::new(*t.config())?.dequantize_tensor(t, target)
}

/// Right-hand operand of [`gemm_dequant`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Packed(&'a PackedTensor),
    Dense(&'a Tensor),
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [k] => Ok((k, 1)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} must be 1-D or 2-D, got {shape:?}"
        ))),
    }
}

/// `dequantize(a) x b` with binary32 accumulation in inner-dimension order.
pub fn gemm_dequant(a: &PackedTensor, b: Operand<'_>, target: DequantTarget) -> Result<Tensor> {
    let lhs = dequantize_tensor(a, target)?;
    let rhs = match b {
        Operand::Packed(p) => dequantize_tensor(p, target)?,
        Operand::Dense(t) => t.clone(),
    };
    let (m, k) = match *lhs.shape() {
        [m, k] => (m, k),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "left operand must be 2-D, got {:?}",
                lhs.shape()
            )))
        }
    };
    let (k2, n) = matrix_dims(rhs.shape(), "right operand")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: {k} vs {k2}"
        )));
    }
    let (a, b) = (lhs.data(), rhs.data());
    let out: Vec<f32> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row = &a[i * k..(i + 1) * k];
            (0..n).map(move |j| {
                let mut acc = 0.0f32;
                for (p, &x) in row.iter().enumerate() {
                    acc += x * b[p * n + j];
                }
                acc
            })
        })
        .collect();
    let shape = if rhs.shape().len() == 1 {
        vec![m]
    } else {
        vec![m, n]
    };
    Tensor::new(shape, out)
}
