//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::params::{Gradients, ParamId, ParamStore};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct GradViolation {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub violations: Vec<GradViolation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.checked > 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries sampled per tensor; tensors smaller than this are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 6,
            seed: 0,
            floor: 1.0,
        }
    }
}

/// Compare `analytic` against central differences of `loss` on sampled
/// entries of every tensor in `only` (all tensors when `None`).
/// Error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(
    store: &ParamStore,
    loss: F,
    analytic: &Gradients,
    only: Option<&[ParamId]>,
    cfg: GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let mut rng = seeds::rng(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let n = rows * cols;
        let picks: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_param).into_vec()
        };
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let orig = store.get(id)[idx];
            probe.get_mut(id)[idx] = orig + cfg.eps;
            let up = loss(&probe);
            probe.get_mut(id)[idx] = orig - cfg.eps;
            let down = loss(&probe);
            probe.get_mut(id)[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic.value_at(id, idx.0, idx.1);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < cfg.tolerance) {
                report.violations.push(GradViolation {
                    param: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
