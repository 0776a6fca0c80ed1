//! Network-size prescriptions and the predicted excess-risk rate as
//! functions of the sample count.
//!
//! With `L = ln(d + s + 1)^3` (natural logarithm):
//!
//! ```text
//! S    = n^(1 / (6 (4d + s + 1) L))
//! B    = n^((s + 7d) / (3d (4d + s + 1) L))
//! rate = -(s - mu) / (7d (4d + s + 1) L)
//! ```
//!
//! Depth is only known up to a constant depending on `(d, s, mu)` and the
//! domain, so it is reported as a note.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizingInput {
    pub n: f64,
    pub d: u32,
    pub s: u32,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizingOutput {
    #[serde(rename = "S")]
    pub nonzero_budget: f64,
    #[serde(rename = "B")]
    pub weight_bound: f64,
    pub rate_exponent: f64,
    pub log_base: &'static str,
    pub depth_note: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

const DEPTH_NOTE: &str =
    "depth is a constant depending on (d, s, mu) and the domain; not determined";

impl SizingInput {
    fn validate(&self) -> Result<()> {
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(Error::Invalid(format!("n must be >= 1, got {}", self.n)));
        }
        if self.d < 1 || self.s < 1 {
            return Err(Error::Invalid(format!(
                "d and s must be >= 1, got d = {}, s = {}",
                self.d, self.s
            )));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Invalid(format!("mu must be > 0, got {}", self.mu)));
        }
        Ok(())
    }

    fn common(&self) -> f64 {
        let (d, s) = (self.d as f64, self.s as f64);
        (4.0 * d + s + 1.0) * (d + s + 1.0).ln().powi(3)
    }

    pub fn rate_exponent(&self) -> f64 {
        let (d, s) = (self.d as f64, self.s as f64);
        -(s - self.mu) / (7.0 * d * self.common())
    }
}

pub fn prescribe(input: &SizingInput) -> Result<SizingOutput> {
    input.validate()?;
    let (d, s) = (input.d as f64, input.s as f64);
    let c = input.common();
    let ln_n = input.n.ln();
    let rate_exponent = input.rate_exponent();
    let warning = (input.s as f64 <= input.mu).then(|| {
        format!(
            "s = {} <= mu = {}: the rate exponent is nonnegative and the bound is vacuous",
            input.s, input.mu
        )
    });
    Ok(SizingOutput {
        nonzero_budget: (ln_n / (6.0 * c)).exp(),
        weight_bound: (ln_n * (s + 7.0 * d) / (3.0 * d * c)).exp(),
        rate_exponent,
        log_base: "natural",
        depth_note: DEPTH_NOTE,
        warning,
    })
}

/// `(n, n^rate_exponent)` for each requested sample count.
pub fn rate_curve(base: &SizingInput, ns: &[f64]) -> Result<Vec<(f64, f64)>> {
    ns.iter()
        .map(|&n| {
            let input = SizingInput { n, ..*base };
            input.validate()?;
            Ok((n, n.powf(input.rate_exponent())))
        })
        .collect()
}
