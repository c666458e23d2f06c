use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
/// `f` is evaluated on perturbed copies; no backward pass is involved.
pub fn finite_diff_grad<F>(f: F, params: &ParamStore, epsilon: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    for (name, value) in params.iter() {
        let mut grad = vec![0.0; value.numel()];
        for (k, g) in grad.iter_mut().enumerate() {
            let orig = value.data()[k];
            let mut probe = |x: f64| -> Result<f64> {
                work.get_mut(name).expect("cloned store has every name").data_mut()[k] = x;
                f(&work)
            };
            let up = probe(orig + epsilon)?;
            let down = probe(orig - epsilon)?;
            probe(orig)?;
            *g = (up - down) / (2.0 * epsilon);
        }
        out.insert(name.to_string(), Tensor::new(value.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Relative error of one gradient entry. The floor keeps entries whose true
/// gradient is essentially zero from dominating the report.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Largest [`relative_error`] over a pair of same-shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn compare(
        analytic: &BTreeMap<String, Tensor>,
        numeric: &BTreeMap<String, Tensor>,
        tolerance: f64,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(numeric.len());
        for (name, n) in numeric {
            let a = analytic
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no analytic gradient for `{name}`")))?;
            if a.shape() != n.shape() {
                return Err(Error::dim(format!("gradient shapes differ for `{name}`")));
            }
            entries.push(GradCheckEntry {
                name: name.clone(),
                numel: n.numel(),
                max_rel_error: max_relative_error(a, n),
            });
        }
        Ok(GradCheckReport { entries, tolerance })
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}
