//! Integer arithmetic for reshaping pyramid pooling.
//!
//! Three pooled maps of levels `x`, `y`, `z` can be flattened, concatenated and
//! reshaped into one `w`×`w` map only when `x² + y² + z² = w²`. Levels are
//! generated from positive witnesses `(a, b, c, d)` with
//! `a² + b² = d(2c + d - 1)`, giving levels `{2a, 2b, 2c - 1}` and
//! `w = 2c + 2d - 1`.
//!
//! [`pooling_params`] derives the kernel, stride and padding that pool an
//! extent `h` down to exactly `l` cells along one axis.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Three pooled levels, sorted descending, the reshaped level `w`, and the
/// witness that generated them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LevelSpec")]
pub struct LevelQuadruple {
    pub x: u64,
    pub y: u64,
    pub z: u64,
    pub w: u64,
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

/// Serialized form of a level choice; the witness is optional and recomputed.
#[derive(Debug, Clone, Copy, Deserialize)]
struct LevelSpec {
    x: u64,
    y: u64,
    z: u64,
    w: u64,
}

impl TryFrom<LevelSpec> for LevelQuadruple {
    type Error = Error;

    fn try_from(s: LevelSpec) -> Result<Self> {
        LevelQuadruple::from_levels(s.x, s.y, s.z, s.w)
    }
}

impl Default for LevelQuadruple {
    /// Levels 9, 6, 2 reshaped to 11.
    fn default() -> Self {
        Self::from_witness(3, 1, 5, 1).expect("3,1,5,1 is a valid witness")
    }
}

impl fmt::Display for LevelQuadruple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}) -> {}", self.x, self.y, self.z, self.w)
    }
}

impl LevelQuadruple {
    pub fn from_witness(a: u64, b: u64, c: u64, d: u64) -> Result<Self> {
        if a == 0 || b == 0 || c == 0 || d == 0 {
            return Err(Error::Levels(format!("witness ({a}, {b}, {c}, {d}) must be positive")));
        }
        if a * a + b * b != d * (2 * c + d - 1) {
            return Err(Error::Levels(format!(
                "witness ({a}, {b}, {c}, {d}) violates a^2 + b^2 = d(2c + d - 1)"
            )));
        }
        let mut levels = [2 * a, 2 * b, 2 * c - 1];
        levels.sort_unstable_by(|p, q| q.cmp(p));
        Ok(Self {
            x: levels[0],
            y: levels[1],
            z: levels[2],
            w: 2 * c + 2 * d - 1,
            a,
            b,
            c,
            d,
        })
    }

    /// Recover the witness from levels given in any order: exactly one level
    /// must be odd, and `w` must be odd and exceed it. The larger even level
    /// maps to `a`.
    pub fn from_levels(x: u64, y: u64, z: u64, w: u64) -> Result<Self> {
        let levels = [x, y, z];
        let odd: Vec<u64> = levels.iter().copied().filter(|v| v % 2 == 1).collect();
        let mut even: Vec<u64> = levels.iter().copied().filter(|v| v % 2 == 0 && *v > 0).collect();
        even.sort_unstable_by(|p, q| q.cmp(p));
        if odd.len() != 1 || even.len() != 2 || w.is_multiple_of(2) || w <= odd[0] {
            return Err(Error::Levels(format!(
                "levels ({x}, {y}, {z}) -> {w} need two positive even levels, one odd level and an odd w above it"
            )));
        }
        let q = Self::from_witness(even[0] / 2, even[1] / 2, odd[0].div_ceil(2), (w - odd[0]) / 2)?;
        debug_assert_eq!(q.x * q.x + q.y * q.y + q.z * q.z, q.w * q.w);
        Ok(q)
    }

    pub fn levels(&self) -> [u64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn max_level(&self) -> u64 {
        self.x
    }
}

/// Every witness with all components in `1..=max_abcd`, sorted by `w`, then
/// `x`, then witness.
pub fn enumerate_level_solutions(max_abcd: u64) -> Vec<LevelQuadruple> {
    let mut out = Vec::new();
    for a in 1..=max_abcd {
        for b in 1..=max_abcd {
            let lhs = a * a + b * b;
            for d in 1..=max_abcd {
                // d(2c + d - 1) = lhs fixes c.
                if lhs % d != 0 {
                    continue;
                }
                let twice_c = lhs / d + 1;
                if twice_c < d + 2 || (twice_c - d) % 2 != 0 {
                    continue;
                }
                let c = (twice_c - d) / 2;
                if c >= 1 && c <= max_abcd {
                    out.push(LevelQuadruple::from_witness(a, b, c, d).expect("solved witness"));
                }
            }
        }
    }
    out.sort_by_key(|q| (q.w, q.x, q.y, q.z, q.a, q.b, q.c, q.d));
    out
}

/// Reading of the judgment formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpretation {
    /// `t = floor(l / h) + (h mod l) + 1`.
    #[default]
    Literal,
    /// `t = floor(h / l) + (h mod l) + 1`.
    Swapped,
}

impl core::str::FromStr for Interpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "swapped" => Ok(Self::Swapped),
            other => Err(Error::Levels(format!("unknown interpretation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Equal kernel and stride of `ceil(h / l)`, symmetric padding.
    Eq4,
    /// Stride `floor(h / l)`, kernel covering the remainder, no padding.
    Eq5,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Eq4 => "eq4",
            Branch::Eq5 => "eq5",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisPoolingParams {
    pub kernel: u64,
    pub stride: u64,
    pub padding: u64,
    pub branch: Branch,
    #[serde(rename = "t")]
    pub judgment: u64,
}

fn check_domain(h: u64, l: u64) -> Result<()> {
    if l < 2 {
        return Err(Error::LevelTooSmall(l));
    }
    if h < l {
        return Err(Error::BelowLevel { h, l });
    }
    Ok(())
}

pub fn judgment_value(h: u64, l: u64, interpretation: Interpretation) -> Result<u64> {
    check_domain(h, l)?;
    let quotient = match interpretation {
        Interpretation::Literal => l / h,
        Interpretation::Swapped => h / l,
    };
    Ok(quotient + h % l + 1)
}

/// `floor((h + 2p - k) / s) + 1`.
pub fn pooled_output_size(h: u64, kernel: u64, stride: u64, padding: u64) -> Result<u64> {
    if kernel == 0 || stride == 0 || h + 2 * padding < kernel {
        return Err(Error::Levels(format!(
            "pooling precondition violated: h={h} kernel={kernel} stride={stride} padding={padding}"
        )));
    }
    Ok((h + 2 * padding - kernel) / stride + 1)
}

/// Kernel, stride and padding pooling an extent `h` to exactly `l` cells.
///
/// The result is checked against [`pooled_output_size`] and the half-kernel
/// padding bound before it is returned.
pub fn pooling_params(h: u64, l: u64, interpretation: Interpretation) -> Result<AxisPoolingParams> {
    let t = judgment_value(h, l, interpretation)?;
    let even_quotient = h.is_multiple_of(l - 1) && (h / (l - 1)).is_multiple_of(2);
    let params = if t > l || (t == l && even_quotient) {
        let kernel = h.div_ceil(l);
        AxisPoolingParams {
            kernel,
            stride: kernel,
            padding: (l * kernel - h).div_ceil(2),
            branch: Branch::Eq4,
            judgment: t,
        }
    } else {
        let stride = h / l;
        AxisPoolingParams {
            kernel: h - (l - 1) * stride,
            stride,
            padding: 0,
            branch: Branch::Eq5,
            judgment: t,
        }
    };
    let valid = 2 * params.padding <= params.kernel
        && pooled_output_size(h, params.kernel, params.stride, params.padding) == Ok(l);
    if !valid {
        return Err(Error::InvalidPooling {
            h,
            l,
            branch: params.branch.as_str(),
            kernel: params.kernel,
            stride: params.stride,
            padding: params.padding,
        });
    }
    Ok(params)
}
