//! Central-difference verification of every backward pass.
//!
//! Tensor-valued outputs are scalarized through a fixed random projection R:
//! loss = sum(y * R), whose analytic input gradient is the backward pass
//! evaluated at dy = R. Checks run in f64 with h = 1e-5.

use std::fmt;

use super::Tensor4;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn push(&mut self, entry: GradCheckEntry) {
        self.entries.push(entry);
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.max_rel_err < tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}: {:.3e}", e.name, e.max_rel_err)?;
        }
        Ok(())
    }
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// element by element. Relative error uses a 1e-8 floor so exact zeros on
/// both sides compare clean.
pub fn check_gradients<F>(
    name: &str,
    params: &[f64],
    analytic: &[f64],
    mut loss: F,
) -> GradCheckEntry
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "{name}: gradient length mismatch");
    let mut scratch = params.to_vec();
    let mut max_rel_err = 0.0f64;
    for i in 0..params.len() {
        let saved = scratch[i];
        scratch[i] = saved + STEP;
        let plus = loss(&scratch);
        scratch[i] = saved - STEP;
        let minus = loss(&scratch);
        scratch[i] = saved;
        let numeric = (plus - minus) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max((analytic[i] - numeric).abs() / denom);
    }
    GradCheckEntry { name: name.to_string(), max_rel_err }
}

/// Fixed projection tensor used to scalarize multi-output ops.
pub fn projection(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    Tensor4::random_uniform(n, c, h, w, -1.0, 1.0, seed)
}

/// sum(y * r), the scalarized output the projections differentiate.
pub fn project(y: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}
