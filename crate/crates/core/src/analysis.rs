//! Error metrics, scaled-value profiling and the parameter sweeps.
//!
//! All aggregates use [`ExactSum`], so reports are byte-identical no matter
//! how blocks were scheduled across threads.

use std::fmt::Write as _;

use crate::container::footprint_bits_per_element;
use crate::error::{Error, Result};
use crate::formats::{pow2, LevelTable, RecycleRule};
use crate::quant::{Codec, ElementKind, QuantConfig, QuantizedBlock};
use crate::sum::ExactSum;

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..9).contains(&exp) {
        let s = format!("{x:.*}", (8 - exp) as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Quantization outcome of one tensor under one configuration.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cfg: QuantConfig,
    pub blocks: Vec<QuantizedBlock>,
}

impl Evaluation {
    pub fn elements(&self) -> usize {
        self.blocks.iter().map(|b| b.report.len).sum()
    }

    /// Correctly rounded total squared error.
    pub fn sum_sq(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.report.sum_sq)
            .collect::<ExactSum>()
            .value()
    }

    pub fn mse(&self) -> f64 {
        self.sum_sq() / self.elements() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        let s = self
            .blocks
            .iter()
            .map(|b| b.report.sum_abs)
            .collect::<ExactSum>()
            .value();
        s / self.elements() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.report.max_abs)
            .fold(0.0, f64::max)
    }

    /// Fraction of nonzero blocks that chose BFP elements.
    pub fn bfp_fraction(&self) -> f64 {
        let live: Vec<_> = self
            .blocks
            .iter()
            .filter(|b| b.scale.e_shared.is_some())
            .collect();
        if live.is_empty() {
            return 0.0;
        }
        live.iter()
            .filter(|b| b.scale.fmt == ElementKind::Bfp)
            .count() as f64
            / live.len() as f64
    }

    pub fn block_mse(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.report.mse).collect()
    }
}

pub fn evaluate(values: &[f32], cfg: &QuantConfig) -> Result<Evaluation> {
    let codec = Codec::new(*cfg)?;
    Ok(Evaluation {
        cfg: *cfg,
        blocks: codec.quantize_blocks(values)?,
    })
}

/// Feature sets of the cumulative ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSet {
    Mxfp,
    Nano,
    NanoAdaptive,
    NanoAdaptiveRecycle,
    Bfp,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 5] = [
        FeatureSet::Mxfp,
        FeatureSet::Nano,
        FeatureSet::NanoAdaptive,
        FeatureSet::NanoAdaptiveRecycle,
        FeatureSet::Bfp,
    ];

    pub fn config(self, element_bits: u8, block_size: usize) -> QuantConfig {
        let e = QuantConfig::default_microexp_bits(element_bits);
        let base = QuantConfig::mxfp(element_bits, e).with_block_size(block_size);
        match self {
            FeatureSet::Mxfp => base,
            FeatureSet::Nano => QuantConfig {
                nano_enabled: true,
                ..base
            },
            FeatureSet::NanoAdaptive => QuantConfig {
                nano_enabled: true,
                adaptive_enabled: true,
                ..base
            },
            FeatureSet::NanoAdaptiveRecycle => {
                QuantConfig::nxfp(element_bits, e).with_block_size(block_size)
            }
            FeatureSet::Bfp => QuantConfig::bfp(element_bits).with_block_size(block_size),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureSet::Mxfp => "baseline",
            FeatureSet::Nano => "NM",
            FeatureSet::NanoAdaptive => "NM+AM",
            FeatureSet::NanoAdaptiveRecycle => "NM+AM+CR",
            FeatureSet::Bfp => "BFP",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ErrorRow {
    pub label: String,
    pub format: String,
    pub bits_per_element: f64,
    pub elements: usize,
    pub mse: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub bfp_fraction: f64,
    /// `1 - mse / mse_baseline`.
    pub reduction: f64,
    /// Per-block MSE, kept for per-block comparisons; not written to CSV.
    pub block_mse: Vec<f64>,
}

impl ErrorRow {
    fn from_eval(
        label: impl Into<String>,
        format: impl Into<String>,
        eval: &Evaluation,
        baseline_mse: f64,
    ) -> Self {
        let mse = eval.mse();
        Self {
            label: label.into(),
            format: format.into(),
            bits_per_element: footprint_bits_per_element(&eval.cfg),
            elements: eval.elements(),
            mse,
            mean_abs: eval.mean_abs(),
            max_abs: eval.max_abs(),
            bfp_fraction: eval.bfp_fraction(),
            reduction: if baseline_mse > 0.0 {
                1.0 - mse / baseline_mse
            } else {
                0.0
            },
            block_mse: eval.block_mse(),
        }
    }
}

/// Rows of error statistics; the first row is the reduction baseline.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

impl ErrorReport {
    /// Evaluates each `(label, config)` on `values`; reductions are relative to the first.
    pub fn compare(values: &[f32], configs: &[(String, QuantConfig)]) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::InvalidConfig("nothing to compare".into()));
        }
        let evals = configs
            .iter()
            .map(|(_, c)| evaluate(values, c))
            .collect::<Result<Vec<_>>>()?;
        let baseline = evals[0].mse();
        let rows = configs
            .iter()
            .zip(&evals)
            .map(|((label, cfg), e)| ErrorRow::from_eval(label.clone(), cfg.name(), e, baseline))
            .collect();
        Ok(Self { rows })
    }

    pub fn row(&self, label: &str) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,format,bits_per_element,elements,mse,mean_abs,max_abs,bfp_fraction,reduction\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.label,
                r.format,
                format_sig9(r.bits_per_element),
                r.elements,
                format_sig9(r.mse),
                format_sig9(r.mean_abs),
                format_sig9(r.max_abs),
                format_sig9(r.bfp_fraction),
                format_sig9(r.reduction),
            )
            .unwrap();
        }
        s
    }
}

/// Cumulative feature ablation: MxFP, +NM, +NM+AM, +NM+AM+CR, plus BFP.
pub fn ablation_sweep(values: &[f32], element_bits: u8, block_size: usize) -> Result<ErrorReport> {
    let configs: Vec<(String, QuantConfig)> = FeatureSet::ALL
        .iter()
        .map(|f| (f.label().to_string(), f.config(element_bits, block_size)))
        .collect();
    ErrorReport::compare(values, &configs)
}

/// Histogram of block-scaled values in the element format's canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledHistogram {
    /// `counts.len() + 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Signed level positions of the profiled format.
    pub levels: Vec<f64>,
    /// Fraction with magnitude strictly between the largest level and `2^(emax+1)`.
    pub outlier_gap_fraction: f64,
    /// Fraction with magnitude strictly between the two largest levels.
    pub vacant_gap_fraction: f64,
}

impl ScaledHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                s,
                "{},{},{}",
                format_sig9(self.edges[i]),
                format_sig9(self.edges[i + 1]),
                c
            )
            .unwrap();
        }
        s
    }
}

pub const HISTOGRAM_BINS: usize = 64;

/// Divides each block by `2^(E_shared - emax)` of the configured element
/// format and histograms the result over `[-2^(emax+1), 2^(emax+1)]`.
pub fn profile_scaled_distribution(values: &[f32], cfg: &QuantConfig) -> Result<ScaledHistogram> {
    cfg.validate()?;
    let fmt = match cfg.configured_kind() {
        ElementKind::Mx => cfg.mx_format()?,
        ElementKind::Bfp => cfg.bfp_format()?,
    };
    let table = LevelTable::new(fmt);
    let emax = table.emax();
    let limit = pow2(emax + 1);
    let mags = table.magnitudes();
    let (qmax, second) = (mags[mags.len() - 1], mags[mags.len() - 2]);
    let width = 2.0 * limit / HISTOGRAM_BINS as f64;

    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let (mut outliers, mut vacant) = (0usize, 0usize);
    for (b, block) in values.chunks(cfg.block_size).enumerate() {
        let e = crate::quant::shared_exponent(block).map_err(|e| e.in_block(b))?;
        let factor = e.map(|e| pow2(emax - e)).unwrap_or(0.0);
        for &v in block {
            let x = v as f64 * factor;
            let bin =
                (((x + limit) / width).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
            counts[bin as usize] += 1;
            let a = x.abs();
            if a > qmax && a < limit {
                outliers += 1;
            }
            if a > second && a < qmax {
                vacant += 1;
            }
        }
    }
    let n = values.len().max(1) as f64;
    Ok(ScaledHistogram {
        edges: (0..=HISTOGRAM_BINS)
            .map(|i| -limit + i as f64 * width)
            .collect(),
        counts,
        levels: table.signed_levels().collect(),
        outlier_gap_fraction: outliers as f64 / n,
        vacant_gap_fraction: vacant as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecycleRow {
    pub rule: RecycleRule,
    /// Signed recycled value in the configured format's canonical space.
    pub value: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecycleSweep {
    /// MSE with recycling disabled.
    pub baseline_mse: f64,
    /// Sorted by ascending MSE; ties keep candidate order.
    pub rows: Vec<RecycleRow>,
}

impl RecycleSweep {
    pub fn rank_of(&self, rule: RecycleRule) -> Option<usize> {
        self.rows.iter().position(|r| r.rule == rule)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rule,recycled_value,mse,reduction\n");
        writeln!(s, "none,,{},0", format_sig9(self.baseline_mse)).unwrap();
        for r in &self.rows {
            let red = if self.baseline_mse > 0.0 {
                1.0 - r.mse / self.baseline_mse
            } else {
                0.0
            };
            writeln!(
                s,
                "{},{},{},{}",
                r.rule,
                format_sig9(r.value),
                format_sig9(r.mse),
                format_sig9(red)
            )
            .unwrap();
        }
        s
    }
}

/// Half the smallest level plus every midpoint between adjacent nonzero levels.
pub fn default_recycle_candidates(cfg: &QuantConfig) -> Result<Vec<RecycleRule>> {
    let fmt = match cfg.configured_kind() {
        ElementKind::Mx => cfg.mx_format()?,
        ElementKind::Bfp => cfg.bfp_format()?,
    };
    let n = fmt.magnitude_count();
    let mut rules = vec![RecycleRule::HalfSmallest];
    rules.extend((1..n - 1).map(|k| RecycleRule::Midpoint(k as u8)));
    Ok(rules)
}

pub fn recycled_value_sweep(
    values: &[f32],
    cfg: &QuantConfig,
    candidates: &[RecycleRule],
) -> Result<RecycleSweep> {
    if !cfg.recycle_enabled {
        return Err(Error::InvalidConfig(
            "recycled-value sweep needs recycling enabled".into(),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no recycle candidates".into()));
    }
    let baseline_mse = evaluate(
        values,
        &QuantConfig {
            recycle_enabled: false,
            ..*cfg
        },
    )?
    .mse();
    let mut rows = Vec::with_capacity(candidates.len());
    for &rule in candidates {
        let c = QuantConfig {
            recycle_rule: rule,
            ..*cfg
        };
        let codec = Codec::new(c)?;
        let value = codec.table(c.configured_kind()).recycled_value().unwrap();
        rows.push(RecycleRow {
            rule,
            value,
            mse: evaluate(values, &c)?.mse(),
        });
    }
    rows.sort_by(|a, b| a.mse.total_cmp(&b.mse));
    Ok(RecycleSweep { baseline_mse, rows })
}

pub const DEFAULT_BLOCK_SIZES: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSizeRow {
    pub block_size: usize,
    pub bpe_mxfp: f64,
    pub bpe_bfp: f64,
    pub bpe_nxfp: f64,
    pub mse_mxfp: f64,
    pub mse_bfp: f64,
    pub mse_nxfp: f64,
}

pub fn block_size_sweep(
    values: &[f32],
    element_bits: u8,
    sizes: &[usize],
) -> Result<Vec<BlockSizeRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no block sizes".into()));
    }
    sizes
        .iter()
        .map(|&bs| {
            let mx = FeatureSet::Mxfp.config(element_bits, bs);
            let bfp = FeatureSet::Bfp.config(element_bits, bs);
            let nx = FeatureSet::NanoAdaptiveRecycle.config(element_bits, bs);
            Ok(BlockSizeRow {
                block_size: bs,
                bpe_mxfp: footprint_bits_per_element(&mx),
                bpe_bfp: footprint_bits_per_element(&bfp),
                bpe_nxfp: footprint_bits_per_element(&nx),
                mse_mxfp: evaluate(values, &mx)?.mse(),
                mse_bfp: evaluate(values, &bfp)?.mse(),
                mse_nxfp: evaluate(values, &nx)?.mse(),
            })
        })
        .collect()
}

pub fn block_size_csv(rows: &[BlockSizeRow]) -> String {
    let mut s = String::from("block_size,bpe_mxfp,bpe_bfp,bpe_nxfp,mse_mxfp,mse_bfp,mse_nxfp\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.block_size,
            format_sig9(r.bpe_mxfp),
            format_sig9(r.bpe_bfp),
            format_sig9(r.bpe_nxfp),
            format_sig9(r.mse_mxfp),
            format_sig9(r.mse_bfp),
            format_sig9(r.mse_nxfp),
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroexpRow {
    pub microexp_bits: u8,
    pub format: String,
    pub mse: f64,
}

/// Plain (no NanoMantissa, adaptive or recycling) MSE for every microexponent width.
pub fn microexp_config_sweep(
    values: &[f32],
    element_bits: u8,
    block_size: usize,
) -> Result<Vec<MicroexpRow>> {
    if !(3..=8).contains(&element_bits) {
        return Err(Error::InvalidConfig(format!(
            "element bits {element_bits} outside 3..=8"
        )));
    }
    (0..=element_bits - 2)
        .map(|e| {
            let cfg = QuantConfig::mxfp(element_bits, e).with_block_size(block_size);
            Ok(MicroexpRow {
                microexp_bits: e,
                format: cfg.mx_format()?.to_string(),
                mse: evaluate(values, &cfg)?.mse(),
            })
        })
        .collect()
}

pub fn microexp_csv(rows: &[MicroexpRow]) -> String {
    let mut s = String::from("microexp_bits,element_format,mse\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.microexp_bits, r.format, format_sig9(r.mse)).unwrap();
    }
    s
}
