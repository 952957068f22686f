//! Element formats and their quantization-level tables.
//!
//! Every element is sign-magnitude: the top bit of a `B`-bit code is the sign
//! and the remaining `B - 1` bits index a magnitude. Minifloat formats
//! (`exp_bits >= 1`) use the usual subnormal/normal split with no Inf/NaN
//! encodings. Block floating-point (`exp_bits == 0`) uses integer magnitudes
//! `0, 1, ..., 2^(B-1) - 1`.
//!
//! Level values live in each format's *canonical* space. A block scaled by
//! `2^(E_max - emax)` (with `emax` the exponent of the largest level) always
//! has its maximum in `[2^emax, 2^(emax+1))`, so minifloat and BFP grids of the
//! same width cover the same range. For 4 bits both E2M1 and BFP4 have
//! `emax = 2`: E2M1 spans `0..=6`, BFP4 spans `0..=7` with step 1.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// `floor(log2(x))` for finite `x > 0`, computed exactly from the bit pattern.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + 63 - mant.leading_zeros() as i32
    } else {
        biased - 1023
    }
}

/// `2^k` as an `f64`, exact over the normal range.
pub(crate) fn pow2(k: i32) -> f64 {
    assert!(
        (-1022..=1023).contains(&k),
        "2^{k} outside the normal f64 range"
    );
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Sign / exponent / mantissa layout of one element code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElementFormat {
    exp_bits: u8,
    mant_bits: u8,
}

impl ElementFormat {
    pub fn new(exp_bits: u8, mant_bits: u8) -> Result<Self> {
        let total = 1 + exp_bits as u32 + mant_bits as u32;
        if !(3..=8).contains(&total) {
            return Err(Error::InvalidFormat(format!(
                "e{exp_bits}m{mant_bits} has {total} bits, expected 3..=8"
            )));
        }
        Ok(Self {
            exp_bits,
            mant_bits,
        })
    }

    /// Integer-mantissa block floating-point element of `total_bits` bits.
    pub fn bfp(total_bits: u8) -> Result<Self> {
        if total_bits < 3 {
            return Err(Error::InvalidFormat(format!(
                "bfp{total_bits} has fewer than 3 bits"
            )));
        }
        Self::new(0, total_bits - 1)
    }

    pub fn exp_bits(&self) -> u8 {
        self.exp_bits
    }

    pub fn mant_bits(&self) -> u8 {
        self.mant_bits
    }

    pub fn total_bits(&self) -> u8 {
        1 + self.exp_bits + self.mant_bits
    }

    pub fn bias(&self) -> i32 {
        if self.exp_bits >= 2 {
            (1 << (self.exp_bits - 1)) - 1
        } else {
            0
        }
    }

    pub fn is_block_fp(&self) -> bool {
        self.exp_bits == 0
    }

    /// Number of magnitude codes, zero included.
    pub fn magnitude_count(&self) -> usize {
        1 << (self.exp_bits + self.mant_bits)
    }

    /// Magnitude bound to a magnitude code.
    pub fn magnitude(&self, mag_code: u32) -> f64 {
        assert!((mag_code as usize) < self.magnitude_count());
        let m = self.mant_bits as i32;
        let mant = (mag_code & ((1 << m) - 1)) as f64;
        if self.exp_bits == 0 {
            return mag_code as f64;
        }
        let exp_field = (mag_code >> m) as i32;
        let frac = mant / (1u32 << m) as f64;
        if exp_field == 0 {
            frac * pow2(1 - self.bias())
        } else {
            (1.0 + frac) * pow2(exp_field - self.bias())
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude(self.magnitude_count() as u32 - 1)
    }

    /// Exponent of the largest level (`emax` in the module docs).
    pub fn emax(&self) -> i32 {
        floor_log2(self.max_magnitude())
    }
}

impl fmt::Display for ElementFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}m{}", self.exp_bits, self.mant_bits)
    }
}

/// Which magnitude the recycled `-0` code is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RecycleRule {
    /// Half of the smallest nonzero level (a one-bit right shift).
    #[default]
    HalfSmallest,
    /// Midpoint between the two largest levels.
    MidpointTop,
    /// Midpoint between magnitude levels `k` and `k + 1`.
    Midpoint(u8),
    /// Duplicate of magnitude level `k`; adds no new value.
    Level(u8),
}

impl RecycleRule {
    /// Magnitude this rule selects from an ascending positive level list.
    pub fn magnitude(&self, levels: &[f64]) -> Result<f64> {
        let n = levels.len();
        match *self {
            RecycleRule::HalfSmallest => Ok(levels[1] / 2.0),
            RecycleRule::MidpointTop => Ok((levels[n - 1] + levels[n - 2]) / 2.0),
            RecycleRule::Midpoint(k) if (k as usize) + 1 < n => {
                Ok((levels[k as usize] + levels[k as usize + 1]) / 2.0)
            }
            RecycleRule::Midpoint(k) => Err(Error::InvalidConfig(format!(
                "midpoint-{k} needs {} levels, table has {n}",
                k as usize + 2
            ))),
            RecycleRule::Level(k) => levels.get(k as usize).copied().ok_or_else(|| {
                Error::InvalidConfig(format!("level-{k} out of range for {n} levels"))
            }),
        }
    }
}

impl fmt::Display for RecycleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecycleRule::HalfSmallest => f.write_str("half-smallest"),
            RecycleRule::MidpointTop => f.write_str("midpoint-top"),
            RecycleRule::Midpoint(k) => write!(f, "midpoint-{k}"),
            RecycleRule::Level(k) => write!(f, "level-{k}"),
        }
    }
}

impl FromStr for RecycleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-smallest" => Ok(RecycleRule::HalfSmallest),
            "midpoint-top" => Ok(RecycleRule::MidpointTop),
            _ => {
                let parsed = if let Some(k) = s.strip_prefix("midpoint-") {
                    k.parse().ok().map(RecycleRule::Midpoint)
                } else if let Some(k) = s.strip_prefix("level-") {
                    k.parse().ok().map(RecycleRule::Level)
                } else {
                    None
                };
                parsed.ok_or_else(|| Error::InvalidConfig(format!("unknown recycle rule {s:?}")))
            }
        }
    }
}

/// Sign of the value bound to the recycled code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RecycleSign {
    /// Keeps the sign bit meaningful: `-0` becomes a negative level.
    #[default]
    Negative,
    Positive,
}

impl fmt::Display for RecycleSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecycleSign::Negative => "negative",
            RecycleSign::Positive => "positive",
        })
    }
}

impl FromStr for RecycleSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(RecycleSign::Negative),
            "positive" => Ok(RecycleSign::Positive),
            _ => Err(Error::InvalidConfig(format!("unknown recycle sign {s:?}"))),
        }
    }
}

/// Code-recycling setting for one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Recycling {
    pub rule: RecycleRule,
    pub sign: RecycleSign,
}

/// A level value as `sig * 2^exp` with integer `sig`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dyadic {
    pub sig: i64,
    pub exp: i32,
}

impl Dyadic {
    fn of(v: f64) -> Self {
        if v == 0.0 {
            return Dyadic { sig: 0, exp: 0 };
        }
        let e = floor_log2(v.abs());
        let mut sig = (v * pow2(52 - e)) as i64;
        let tz = sig.trailing_zeros() as i32;
        sig >>= tz;
        Dyadic {
            sig,
            exp: e - 52 + tz,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SignedLevel {
    value: f64,
    code: u8,
    recycled: bool,
}

/// Ordered level set of one element format, with optional code recycling.
#[derive(Debug, Clone)]
pub struct LevelTable {
    format: ElementFormat,
    magnitudes: Vec<f64>,
    recycled: Option<f64>,
    /// Per full code (sign bit included).
    dyadic: Vec<Dyadic>,
    /// Ascending signed levels used for nearest-level search.
    ascending: Vec<SignedLevel>,
}

impl LevelTable {
    pub fn new(format: ElementFormat) -> Self {
        Self::build(format, None).expect("tables without recycling always build")
    }

    pub fn build(format: ElementFormat, recycling: Option<Recycling>) -> Result<Self> {
        let n = format.magnitude_count();
        let magnitudes: Vec<f64> = (0..n as u32).map(|c| format.magnitude(c)).collect();
        let recycled = match recycling {
            Some(r) => {
                let mag = r.rule.magnitude(&magnitudes)?;
                Some(match r.sign {
                    RecycleSign::Negative => -mag,
                    RecycleSign::Positive => mag,
                })
            }
            None => None,
        };
        let sign_bit = 1u8 << (format.total_bits() - 1);

        let mut dyadic = Vec::with_capacity(2 * n);
        for &m in &magnitudes {
            dyadic.push(Dyadic::of(m));
        }
        dyadic.push(Dyadic::of(recycled.unwrap_or(0.0)));
        for &m in &magnitudes[1..] {
            dyadic.push(Dyadic::of(-m));
        }

        let mut ascending: Vec<SignedLevel> = Vec::with_capacity(2 * n);
        for (c, &m) in magnitudes.iter().enumerate().skip(1).rev() {
            ascending.push(SignedLevel {
                value: -m,
                code: sign_bit | c as u8,
                recycled: false,
            });
        }
        for (c, &m) in magnitudes.iter().enumerate() {
            ascending.push(SignedLevel {
                value: m,
                code: c as u8,
                recycled: false,
            });
        }
        if let Some(r) = recycled {
            // A recycled value equal to an existing level adds nothing to the search.
            if !ascending.iter().any(|l| l.value == r) {
                let at = ascending.partition_point(|l| l.value < r);
                ascending.insert(
                    at,
                    SignedLevel {
                        value: r,
                        code: sign_bit,
                        recycled: true,
                    },
                );
            }
        }

        Ok(Self {
            format,
            magnitudes,
            recycled,
            dyadic,
            ascending,
        })
    }

    pub fn format(&self) -> ElementFormat {
        self.format
    }

    /// Positive magnitudes indexed by magnitude code.
    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn max_level(&self) -> f64 {
        *self.magnitudes.last().unwrap()
    }

    pub fn emax(&self) -> i32 {
        self.format.emax()
    }

    /// Signed value bound to the recycled `-0` code, if recycling is on.
    pub fn recycled_value(&self) -> Option<f64> {
        self.recycled
    }

    /// Every distinct signed level in ascending order.
    pub fn signed_levels(&self) -> impl Iterator<Item = f64> + '_ {
        self.ascending.iter().map(|l| l.value)
    }

    pub fn sign_bit(&self) -> u8 {
        1 << (self.format.total_bits() - 1)
    }

    /// Decodes a full element code. The `-0` code decodes to `0.0` unless recycled.
    pub fn decode(&self, code: u8) -> f64 {
        let sign_bit = self.sign_bit();
        let mag = (code & (sign_bit - 1)) as usize;
        if code & sign_bit == 0 {
            self.magnitudes[mag]
        } else if mag == 0 {
            self.recycled.unwrap_or(0.0)
        } else {
            -self.magnitudes[mag]
        }
    }

    /// Integer significand and exponent of a code's value.
    pub fn dyadic(&self, code: u8) -> Dyadic {
        let sign_bit = self.sign_bit();
        let mag = (code & (sign_bit - 1)) as usize;
        if code & sign_bit == 0 {
            self.dyadic[mag]
        } else {
            self.dyadic[self.magnitudes.len() + mag]
        }
    }

    /// Code of the level nearest to `v / scale`, comparing distances as
    /// `|v - level * scale|` so that errors are measured in `v`'s own space.
    ///
    /// Ties go to the even magnitude code; if both are even (only possible
    /// next to the recycled level) the regular level wins. `scale` must be a
    /// positive power of two times `1 + m/4`, which keeps `level * scale` exact.
    pub fn nearest(&self, v: f64, scale: f64) -> u8 {
        let levels = &self.ascending;
        let at = levels.partition_point(|l| l.value * scale < v);
        if at == 0 {
            return levels[0].code;
        }
        if at == levels.len() {
            return levels[at - 1].code;
        }
        let (lo, hi) = (levels[at - 1], levels[at]);
        let d_lo = v - lo.value * scale;
        let d_hi = hi.value * scale - v;
        if d_lo < d_hi {
            lo.code
        } else if d_hi < d_lo {
            hi.code
        } else {
            let mag_mask = self.sign_bit() - 1;
            let even = |l: SignedLevel| (l.code & mag_mask).is_multiple_of(2);
            match (even(lo), even(hi)) {
                (true, false) => lo.code,
                (false, true) => hi.code,
                _ if lo.recycled => hi.code,
                _ => lo.code,
            }
        }
    }
}

/// Table for `format` with or without recycling under `rule` (negative sign).
pub fn build_level_table(
    format: ElementFormat,
    recycle: bool,
    rule: RecycleRule,
) -> Result<LevelTable> {
    LevelTable::build(
        format,
        recycle.then_some(Recycling {
            rule,
            sign: RecycleSign::Negative,
        }),
    )
}

/// Nearest-level code for a value already in the table's canonical space.
pub fn encode_scalar(v_scaled: f64, table: &LevelTable) -> u8 {
    table.nearest(v_scaled, 1.0)
}

pub fn decode_scalar(code: u8, table: &LevelTable) -> f64 {
    table.decode(code)
}
