//! Moment-matched Gaussian weight priors.
//!
//! For every (class `k`, feature `j`) pair the class-conditional sample mean
//! and unbiased variance of feature `j` become the mean and variance of the
//! prior on the weight linking that feature to output `k`, widened by `tau²`:
//!
//! ```text
//! p(w | k) = N(w; mu_kj, var_kj + tau²)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::matrix::Matrix;
use crate::signals::FaultLabel;
use crate::stats::{mean, variance};

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConditionalMoments {
    pub classes: Vec<FaultLabel>,
    /// `[K x F]`
    pub mean: Matrix,
    /// `[K x F]`, unbiased.
    pub var: Matrix,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPrior {
    pub classes: Vec<FaultLabel>,
    pub mean: Matrix,
    pub var: Matrix,
    pub tau: f64,
}

impl WeightPrior {
    pub fn num_classes(&self) -> usize {
        self.mean.rows()
    }

    pub fn num_features(&self) -> usize {
        self.mean.cols()
    }
}

/// Class-conditional moments of `rows`, in the order given by `classes`.
pub fn match_moments(rows: &[FeatureVector], classes: &[FaultLabel]) -> Result<ClassConditionalMoments> {
    let f = rows.first().map_or(0, |r| r.values.len());
    let k = classes.len();
    let mut mu = Matrix::zeros(k, f);
    let mut var = Matrix::zeros(k, f);
    let mut counts = Vec::with_capacity(k);
    for (ci, &label) in classes.iter().enumerate() {
        let members: Vec<&FeatureVector> = rows.iter().filter(|r| r.label == label).collect();
        if members.len() < 2 {
            return Err(Error::InsufficientClass {
                label: label.code(),
                count: members.len(),
                required: 2,
            });
        }
        let mut column = vec![0.0; members.len()];
        for j in 0..f {
            for (c, r) in column.iter_mut().zip(&members) {
                *c = r.values[j];
            }
            mu.set(ci, j, mean(&column));
            var.set(ci, j, variance(&column));
        }
        counts.push(members.len());
    }
    Ok(ClassConditionalMoments {
        classes: classes.to_vec(),
        mean: mu,
        var,
        counts,
    })
}

pub fn build_prior(m: &ClassConditionalMoments, tau: f64) -> Result<WeightPrior> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be finite and nonnegative, got {tau}")));
    }
    let t2 = tau * tau;
    Ok(WeightPrior {
        classes: m.classes.clone(),
        mean: m.mean.clone(),
        var: m.var.map(|v| v + t2),
        tau,
    })
}

/// Per-feature ratio of between-class variance of the class means to the
/// mean within-class variance. Features with no spread at all score 0.
pub fn separation_scores(m: &ClassConditionalMoments) -> Vec<f64> {
    let k = m.mean.rows();
    (0..m.mean.cols())
        .map(|j| {
            let means: Vec<f64> = (0..k).map(|c| m.mean.get(c, j)).collect();
            let centre = mean(&means);
            let between = means.iter().map(|v| (v - centre).powi(2)).sum::<f64>() / k as f64;
            let within = (0..k).map(|c| m.var.get(c, j)).sum::<f64>() / k as f64;
            if between == 0.0 {
                0.0
            } else {
                between / within.max(1e-12)
            }
        })
        .collect()
}

/// `KL[N(q_mean, q_var) || N(p_mean, p_var)]` in closed form.
pub fn kl_gaussian(q_mean: f64, q_var: f64, p_mean: f64, p_var: f64) -> Result<f64> {
    if !(q_var > 0.0) || !(p_var > 0.0) {
        return Err(Error::invalid(format!(
            "KL needs positive variances, got q_var={q_var}, p_var={p_var}"
        )));
    }
    Ok(kl_unchecked(q_mean, q_var, p_mean, p_var))
}

#[inline]
pub(crate) fn kl_unchecked(q_mean: f64, q_var: f64, p_mean: f64, p_var: f64) -> f64 {
    let d = q_mean - p_mean;
    0.5 * (p_var / q_var).ln() + (q_var + d * d) / (2.0 * p_var) - 0.5
}

/// Log-density of `N(mean, var)` at `x`.
#[inline]
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - d * d / (2.0 * var)
}
