//! Listwise-unit losses over one query's score list: pairwise RankNet and
//! min-max score scaling, each with its exact gradient.

use crate::error::{Error, Result};
use crate::nn::tape::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq)]
pub struct RankNetLoss {
    pub loss: f64,
    /// `∂loss / ∂s_i`.
    pub grad: Vec<f64>,
    /// Number of label-discordant ordered pairs contributing to the loss.
    pub pairs: usize,
    /// Set when every label is equal and the loss is identically zero.
    pub all_labels_equal: bool,
}

/// Pairwise logistic loss averaged over pairs with `label_i > label_j`:
/// `mean log(1 + exp(−(s_i − s_j)))`.
pub fn ranknet_loss(scores: &[f64], labels: &[f64]) -> Result<RankNetLoss> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Input("RankNet needs at least two documents".into()));
    }
    let n = scores.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] > labels[j] {
                let diff = scores[i] - scores[j];
                loss += softplus(-diff);
                // d/d(diff) softplus(-diff) = -sigmoid(-diff)
                let g = -sigmoid(-diff);
                grad[i] += g;
                grad[j] -= g;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        log::warn!("RankNet called with all labels equal; loss is zero");
        return Ok(RankNetLoss {
            loss: 0.0,
            grad,
            pairs,
            all_labels_equal: true,
        });
    }
    let p = pairs as f64;
    grad.iter_mut().for_each(|g| *g /= p);
    Ok(RankNetLoss {
        loss: loss / p,
        grad,
        pairs,
        all_labels_equal: false,
    })
}

/// `(s − min) / (max − min)`; every output is 0.5 when all scores are equal.
pub fn min_max_scale(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = bounds(scores);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / range).collect()
}

fn bounds(scores: &[f64]) -> (f64, f64) {
    scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)))
}

/// Pull `∂L/∂s'` back through [`min_max_scale`] to `∂L/∂s`. The minimum and
/// maximum are attributed to their first occurrences.
pub fn min_max_backward(scores: &[f64], grad_scaled: &[f64]) -> Vec<f64> {
    let (lo, hi) = bounds(scores);
    let range = hi - lo;
    let n = scores.len();
    if !(range > 0.0) {
        return vec![0.0; n];
    }
    let imin = scores.iter().position(|&s| s == lo).expect("min present");
    let imax = scores.iter().position(|&s| s == hi).expect("max present");
    let mut out: Vec<f64> = grad_scaled.iter().map(|g| g / range).collect();
    let mut to_min = 0.0;
    let mut to_max = 0.0;
    for (&s, &g) in scores.iter().zip(grad_scaled) {
        let t = (s - lo) / range;
        // s'_i = (s_i − lo)/r:  ∂/∂lo = −1/r + t/r,  ∂/∂hi = −t/r
        to_min += g * (t - 1.0) / range;
        to_max -= g * t / range;
    }
    out[imin] += to_min;
    out[imax] += to_max;
    out
}
