use std::fmt;

use super::config::{AltVariant, Composition, CostFunction, FitConfig, Method, Strategy};
use crate::error::{AamError, Result};

/// A monomial `coeff · nᵃ mᵇ Fᶜ`, with `n` shape parameters, `m`
/// appearance parameters and `F` residual rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub coeff: u64,
    pub n: u32,
    pub m: u32,
    pub f: u32,
}

const fn t(coeff: u64, n: u32, m: u32, f: u32) -> Term {
    Term { coeff, n, m, f }
}

impl Term {
    pub fn eval(&self, n: usize, m: usize, f: usize) -> f64 {
        self.coeff as f64 * (n as f64).powi(self.n as i32) * (m as f64).powi(self.m as i32) * (f as f64).powi(self.f as i32)
    }
}

fn power(sym: &str, p: u32) -> String {
    match p {
        0 => String::new(),
        1 => sym.to_string(),
        2 => format!("{sym}²"),
        3 => format!("{sym}³"),
        _ => format!("{sym}^{p}"),
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coeff != 1 {
            write!(f, "{}", self.coeff)?;
        }
        write!(f, "{}{}{}", power("n", self.n), power("m", self.m), power("F", self.f))
    }
}

/// Leading per-iteration flop terms of an algorithm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepComplexity {
    pub terms: Vec<Term>,
}

impl StepComplexity {
    pub fn flops(&self, n: usize, m: usize, f: usize) -> f64 {
        self.terms.iter().map(|t| t.eval(n, m, f)).sum()
    }

    pub fn symbols(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }
}

impl fmt::Display for StepComplexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O({})", self.symbols().join(" + "))
    }
}

/// Per-iteration complexity of the configured algorithm, together with its
/// value for the given sizes.
pub fn step_complexity(config: &FitConfig, n: usize, m: usize, f: usize) -> Result<(StepComplexity, f64)> {
    config.validate()?;
    if n == 0 || m == 0 || f == 0 {
        return Err(AamError::Config("complexity sizes must be positive".into()));
    }
    let bid = config.composition == Composition::Bidirectional;
    let alt = config.strategy == Strategy::Alternated;
    let joint = config.alt_variant == AltVariant::Joint;
    let po = config.cost == CostFunction::ProjectOut;
    let precomputed = po
        && config.prior.is_none()
        && config.method != Method::Newton
        && (config.composition == Composition::Inverse
            || (config.composition == Composition::Asymmetric && config.alpha == 0.0));
    let terms = match (config.method, bid) {
        _ if precomputed => vec![t(1, 1, 0, 1)],
        (Method::Wiberg, false) => vec![t(1, 1, 1, 1), t(1, 2, 0, 1), t(1, 3, 0, 0)],
        (Method::Wiberg, true) => vec![t(2, 1, 1, 1), t(2, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::GaussNewton, false) if alt => vec![t(1, 2, 0, 1), t(1, 3, 0, 0)],
        (Method::GaussNewton, false) => vec![t(1, 1, 1, 1), t(1, 2, 0, 1), t(1, 3, 0, 0)],
        (Method::GaussNewton, true) if alt && po => vec![t(1, 1, 1, 1), t(2, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::GaussNewton, true) if alt && joint => vec![t(4, 2, 0, 1), t(8, 3, 0, 0)],
        (Method::GaussNewton, true) if alt => vec![t(2, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::GaussNewton, true) => vec![t(2, 1, 1, 1), t(2, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::Newton, false) if alt => vec![t(1, 1, 1, 1), t(2, 2, 0, 1), t(1, 3, 0, 0)],
        (Method::Newton, false) => vec![t(1, 1, 1, 1), t(1, 2, 1, 0), t(2, 2, 0, 1), t(1, 3, 0, 0)],
        (Method::Newton, true) if alt && po => vec![t(1, 1, 1, 1), t(3, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::Newton, true) if alt && joint => vec![t(1, 1, 1, 1), t(4, 2, 0, 1), t(8, 3, 0, 0)],
        (Method::Newton, true) if alt => vec![t(1, 1, 1, 1), t(4, 2, 0, 1), t(2, 3, 0, 0)],
        (Method::Newton, true) => vec![t(3, 1, 1, 1), t(6, 2, 0, 1), t(3, 2, 1, 0), t(4, 3, 0, 0)],
    };
    let c = StepComplexity { terms };
    let flops = c.flops(n, m, f);
    Ok((c, flops))
}
