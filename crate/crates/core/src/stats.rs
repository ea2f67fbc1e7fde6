//! One-sided two-proportion z-test.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Upper tail of the standard normal, `1 - Φ(z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProportionTest {
    pub x1: u64,
    pub n1: u64,
    pub x2: u64,
    pub n2: u64,
    pub z: f64,
    /// One-sided, alternative `p1 > p2`.
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Pooled proportion was 0 or 1; `z` and `p` are set by convention.
    pub degenerate: bool,
}

impl ProportionTest {
    pub fn p1(&self) -> f64 {
        self.x1 as f64 / self.n1 as f64
    }

    pub fn p2(&self) -> f64 {
        self.x2 as f64 / self.n2 as f64
    }
}

/// Pooled-variance test of `x1/n1 > x2/n2`, no continuity correction.
pub fn two_prop_ztest_one_sided(x1: u64, n1: u64, x2: u64, n2: u64) -> Result<ProportionTest> {
    two_prop_ztest_alpha(x1, n1, x2, n2, DEFAULT_ALPHA)
}

pub fn two_prop_ztest_alpha(x1: u64, n1: u64, x2: u64, n2: u64, alpha: f64) -> Result<ProportionTest> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(Error::InvalidCounts(format!("{x1}/{n1} vs {x2}/{n2}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidCounts(format!("alpha {alpha}")));
    }
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let var = pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    let (z, p, degenerate) = if var > 0.0 {
        let z = (p1 - p2) / var.sqrt();
        (z, normal_sf(z), false)
    } else {
        // both groups all-0 or all-1: proportions coincide
        (0.0, 0.5, true)
    };
    Ok(ProportionTest {
        x1,
        n1,
        x2,
        n2,
        z,
        p,
        alpha,
        significant: p < alpha,
        degenerate,
    })
}
