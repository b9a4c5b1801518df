//! Variational linear-softmax readout trained by Bayes-by-Backprop.
//!
//! Weights are a `[K x (N + 1)]` matrix (last column is the bias) with a
//! factorized Gaussian posterior `q(w) = N(mu, sigma²)`, where
//! `sigma = softplus(rho_raw)`. The loss for one minibatch is
//!
//! ```text
//! L = 1/S Σ_s Σ_i -ln softmax(W_s x̃_i)[y_i] + beta Σ KL[q || p],
//! W_s = mu + sigma ⊙ eps_s
//! ```
//!
//! with `x̃ = [state; 1]` and the closed-form Gaussian KL.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::priors::{kl_unchecked, log_normal_pdf, WeightPrior};
use crate::reservoir::ReservoirConfig;
use crate::stats::{entropy, log_sum_exp, softmax_in_place, stream_rng};

const DIVERGENCE_LOSS: f64 = 1e6;
const TRAIN_STREAM: u64 = 0x7472_6169_6e;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Independent Gaussian over every readout weight (mean and variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePrior {
    pub mean: Matrix,
    pub var: Matrix,
}

/// Trainable posterior parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Matrix,
    pub rho_raw: Matrix,
}

impl VariationalPosterior {
    pub fn sigma(&self) -> Matrix {
        self.rho_raw.map(softplus)
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma().mean()
    }

    pub fn distribution(&self) -> WeightDistribution {
        WeightDistribution {
            mu: self.mu.clone(),
            sigma: self.sigma(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu.rows()
    }

    /// Trainable scalars: one mean and one scale per weight.
    pub fn num_parameters(&self) -> usize {
        2 * self.mu.as_slice().len()
    }
}

/// Posterior in `(mu, sigma)` form, as used for prediction and persistence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub mu: Matrix,
    pub sigma: Matrix,
}

impl WeightDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Matrix {
        let mut w = self.mu.clone();
        for (v, s) in w.as_mut_slice().iter_mut().zip(self.sigma.as_slice()) {
            let e: f64 = StandardNormal.sample(rng);
            *v += s * e;
        }
        w
    }

    pub fn num_classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn num_inputs(&self) -> usize {
        self.mu.cols() - 1
    }
}

/// Builds the node-level prior from the per-(class, feature) prior and
/// starts the posterior on it.
pub fn init_readout_from_priors(
    prior: &WeightPrior,
    cfg: &ReservoirConfig,
) -> Result<(VariationalPosterior, NodePrior)> {
    let k = prior.num_classes();
    let f = prior.num_features();
    let n = cfg.num_nodes;
    if cfg.node_to_feature.len() != n {
        return Err(Error::dim(format!(
            "node assignment covers {} of {n} nodes",
            cfg.node_to_feature.len()
        )));
    }
    if cfg.num_features != f {
        return Err(Error::dim(format!(
            "prior has {f} features, reservoir expects {}",
            cfg.num_features
        )));
    }
    if let Some(&bad) = cfg.node_to_feature.iter().find(|&&j| j >= f) {
        return Err(Error::dim(format!("node mapped to feature {bad} of {f}")));
    }
    let mut mean = Matrix::zeros(k, n + 1);
    let mut var = Matrix::filled(k, n + 1, 1.0);
    for c in 0..k {
        for (node, &j) in cfg.node_to_feature.iter().enumerate() {
            let v = prior.var.get(c, j);
            if !(v > 0.0) {
                return Err(Error::invalid(format!(
                    "prior variance for class {} feature {j} is {v}; use tau > 0",
                    prior.classes[c]
                )));
            }
            mean.set(c, node, prior.mean.get(c, j));
            var.set(c, node, v);
        }
    }
    let q = VariationalPosterior {
        mu: mean.clone(),
        rho_raw: var.map(|v| inverse_softplus(v.sqrt())),
    };
    Ok((q, NodePrior { mean, var }))
}

/// Loss value and its gradients w.r.t. `mu` and `rho_raw`.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub loss: f64,
    pub data_term: f64,
    pub kl_term: f64,
    pub grad_mu: Matrix,
    pub grad_rho: Matrix,
}

/// Adds `-ln softmax(W x̃)[y]` for each row to the loss and its gradient
/// w.r.t. `W` (scaled by `scale`) into `grad_w`.
fn nll_and_grad(
    w: &Matrix,
    states: &Matrix,
    rows: &[usize],
    labels: &[usize],
    scale: f64,
    grad_w: &mut Matrix,
    logits: &mut [f64],
) -> f64 {
    let n = states.cols();
    let mut nll = 0.0;
    for &i in rows {
        let s = states.row(i);
        for (k, z) in logits.iter_mut().enumerate() {
            let wr = w.row(k);
            *z = crate::matrix::dot(&wr[..n], s) + wr[n];
        }
        let lse = log_sum_exp(logits);
        let y = labels[i];
        nll += lse - logits[y];
        for (k, z) in logits.iter().enumerate() {
            let g = ((z - lse).exp() - if k == y { 1.0 } else { 0.0 }) * scale;
            let gr = grad_w.row_mut(k);
            for (gv, sv) in gr[..n].iter_mut().zip(s) {
                *gv += g * sv;
            }
            gr[n] += g;
        }
    }
    nll
}

/// Negative ELBO of the minibatch `rows` under the noise draws `eps`.
pub fn elbo_loss(
    states: &Matrix,
    labels: &[usize],
    rows: &[usize],
    q: &VariationalPosterior,
    p: &NodePrior,
    beta: f64,
    eps: &[Matrix],
) -> Result<ElboTerms> {
    if rows.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    if eps.is_empty() {
        return Err(Error::invalid("at least one noise draw is required"));
    }
    let (k, cols) = q.mu.shape();
    if cols != states.cols() + 1 || p.mean.shape() != (k, cols) {
        return Err(Error::dim("posterior, prior and state shapes disagree"));
    }
    let sigma = q.sigma();
    let s_count = eps.len() as f64;
    let mut grad_mu = Matrix::zeros(k, cols);
    let mut grad_rho = Matrix::zeros(k, cols);
    let mut grad_w = Matrix::zeros(k, cols);
    let mut logits = vec![0.0; k];
    let mut data_term = 0.0;

    for e in eps {
        let mut w = q.mu.clone();
        for ((wv, sv), ev) in w.as_mut_slice().iter_mut().zip(sigma.as_slice()).zip(e.as_slice()) {
            *wv += sv * ev;
        }
        grad_w.as_mut_slice().fill(0.0);
        data_term += nll_and_grad(&w, states, rows, labels, 1.0 / s_count, &mut grad_w, &mut logits)
            / s_count;
        for (((gm, gr), gw), ev) in grad_mu
            .as_mut_slice()
            .iter_mut()
            .zip(grad_rho.as_mut_slice())
            .zip(grad_w.as_slice())
            .zip(e.as_slice())
        {
            *gm += gw;
            *gr += gw * ev;
        }
    }

    let mut kl_term = 0.0;
    let mu = q.mu.as_slice();
    let rho = q.rho_raw.as_slice();
    let sg = sigma.as_slice();
    let pm = p.mean.as_slice();
    let pv = p.var.as_slice();
    for idx in 0..mu.len() {
        let s = sg[idx];
        let kl = kl_unchecked(mu[idx], s * s, pm[idx], pv[idx]);
        if !kl.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite KL at weight ({}, {})",
                idx / cols,
                idx % cols
            )));
        }
        kl_term += kl;
        grad_mu.as_mut_slice()[idx] += beta * (mu[idx] - pm[idx]) / pv[idx];
        let dsigma = grad_rho.as_slice()[idx] + beta * (-1.0 / s + s / pv[idx]);
        grad_rho.as_mut_slice()[idx] = dsigma * sigmoid(rho[idx]);
    }

    let loss = data_term + beta * kl_term;
    if !loss.is_finite() {
        let bad = mu
            .iter()
            .zip(sg)
            .position(|(m, s)| !m.is_finite() || !s.is_finite() || *s <= 0.0)
            .unwrap_or(0);
        return Err(Error::Numerical(format!(
            "non-finite loss (offending weight ({}, {}))",
            bad / cols,
            bad % cols
        )));
    }
    Ok(ElboTerms {
        loss,
        data_term,
        kl_term,
        grad_mu,
        grad_rho,
    })
}

/// Standard-normal noise matrices shaped like the posterior.
pub fn draw_noise(shape: (usize, usize), count: usize, rng: &mut impl Rng) -> Vec<Matrix> {
    (0..count)
        .map(|_| Matrix::from_fn(shape.0, shape.1, |_, _| StandardNormal.sample(rng)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// KL weight; `None` means `1 / num_batches`.
    pub beta: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mc_train_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: None,
            learning_rate: 0.01,
            epochs: 200,
            mc_train_samples: 2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            if !(b >= 0.0) {
                return Err(Error::invalid("beta must be nonnegative"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.mc_train_samples == 0 || self.batch_size == 0 {
            return Err(Error::invalid("mc_train_samples and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(1)
    }

    pub fn resolved_beta(&self, n: usize) -> f64 {
        self.beta.unwrap_or(1.0 / self.num_batches(n) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub posterior: VariationalPosterior,
    /// Sum of minibatch losses per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD on the negative ELBO with reparameterized gradients.
pub fn train_bbb(
    states: &Matrix,
    labels: &[usize],
    q0: &VariationalPosterior,
    p: &NodePrior,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = states.rows();
    if labels.len() != n {
        return Err(Error::dim("labels and states differ in length"));
    }
    let k = q0.num_classes();
    if labels.iter().any(|&y| y >= k) {
        return Err(Error::invalid("label index outside readout classes"));
    }
    let mut present = vec![false; k];
    for &y in labels {
        present[y] = true;
    }
    if present.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::invalid("training needs at least two classes present"));
    }

    let beta = cfg.resolved_beta(n);
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let mut q = q0.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let shape = q.mu.shape();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let eps = draw_noise(shape, cfg.mc_train_samples, &mut rng);
            let terms = match elbo_loss(states, labels, batch, &q, p, beta, &eps) {
                Ok(t) => t,
                Err(Error::Numerical(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::INFINITY,
                        trace,
                    })
                }
                Err(e) => return Err(e),
            };
            if terms.loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    epoch,
                    loss: terms.loss,
                    trace,
                });
            }
            epoch_loss += terms.loss;
            let lr = cfg.learning_rate;
            for (m, g) in q.mu.as_mut_slice().iter_mut().zip(terms.grad_mu.as_slice()) {
                *m -= lr * g;
            }
            for (r, g) in q.rho_raw.as_mut_slice().iter_mut().zip(terms.grad_rho.as_slice()) {
                *r -= lr * g;
            }
        }
        trace.push(epoch_loss);
    }
    Ok(TrainOutcome {
        posterior: q,
        loss_trace: trace,
    })
}

/// Predictive class probabilities with entropy-based uncertainty (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub probs: Vec<f64>,
    pub total_uncertainty: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl PredictiveResult {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0
    }
}

fn logits_into(w: &Matrix, state: &[f64], out: &mut [f64]) {
    let n = state.len();
    for (k, z) in out.iter_mut().enumerate() {
        let wr = w.row(k);
        *z = crate::matrix::dot(&wr[..n], state) + wr[n];
    }
}

/// Predictive distribution from explicit weight samples.
pub fn predictive_from_samples(samples: &[Matrix], state: &[f64]) -> PredictiveResult {
    let k = samples[0].rows();
    let mut mean = vec![0.0; k];
    let mut aleatoric = 0.0;
    let mut p = vec![0.0; k];
    for w in samples {
        logits_into(w, state, &mut p);
        softmax_in_place(&mut p);
        aleatoric += entropy(&p);
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
    }
    let m = samples.len() as f64;
    for v in mean.iter_mut() {
        *v /= m;
    }
    aleatoric /= m;
    let total = entropy(&mean);
    PredictiveResult {
        probs: mean,
        total_uncertainty: total,
        aleatoric,
        epistemic: total - aleatoric,
    }
}

/// `ln p(y | x)` under the predictive built from `samples`.
pub fn predictive_log_likelihood(samples: &[Matrix], state: &[f64], y: usize) -> f64 {
    let k = samples[0].rows();
    let mut z = vec![0.0; k];
    let per_sample: Vec<f64> = samples
        .iter()
        .map(|w| {
            logits_into(w, state, &mut z);
            z[y] - log_sum_exp(&z)
        })
        .collect();
    log_sum_exp(&per_sample) - (samples.len() as f64).ln()
}

pub fn sample_weights(q: &WeightDistribution, m: usize, rng: &mut impl Rng) -> Vec<Matrix> {
    (0..m).map(|_| q.sample(rng)).collect()
}

/// Monte-Carlo predictive for one state.
pub fn predict(q: &WeightDistribution, state: &[f64], mc_samples: usize, seed: u64) -> Result<PredictiveResult> {
    predict_indexed(q, state, mc_samples, seed, 0)
}

fn predict_indexed(
    q: &WeightDistribution,
    state: &[f64],
    mc_samples: usize,
    seed: u64,
    index: u64,
) -> Result<PredictiveResult> {
    if mc_samples < 1 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    if state.len() != q.num_inputs() {
        return Err(Error::dim("state length differs from readout inputs"));
    }
    let mut rng = stream_rng(seed, index);
    let samples = sample_weights(q, mc_samples, &mut rng);
    Ok(predictive_from_samples(&samples, state))
}

/// Predictions for every state row. Row `i` draws from stream `(seed, i)`,
/// so results do not depend on the thread count.
pub fn predict_batch(
    q: &WeightDistribution,
    states: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveResult>> {
    (0..states.rows())
        .into_par_iter()
        .map(|i| predict_indexed(q, states.row(i), mc_samples, seed, i as u64))
        .collect()
}

/// Thinned Metropolis–Hastings chain.
#[derive(Debug, Clone)]
pub struct MhChain {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
}

pub const MH_THIN: usize = 10;

/// Random-walk Metropolis with an isotropic Gaussian proposal.
pub fn random_walk_metropolis(
    log_density: impl Fn(&[f64]) -> f64,
    init: Vec<f64>,
    steps: usize,
    proposal_std: f64,
    thin: usize,
    rng: &mut impl Rng,
) -> Result<MhChain> {
    if steps < 1 {
        return Err(Error::invalid("MH needs at least one step"));
    }
    if !(proposal_std >= 0.0) {
        return Err(Error::invalid("proposal_std must be nonnegative"));
    }
    let thin = thin.max(1);
    let mut current = init;
    let mut current_lp = log_density(&current);
    if !current_lp.is_finite() {
        return Err(Error::Numerical("initial point has non-finite log density".into()));
    }
    let mut proposal = current.clone();
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity(steps / thin);
    for t in 0..steps {
        for (p, c) in proposal.iter_mut().zip(&current) {
            let e: f64 = StandardNormal.sample(rng);
            *p = c + proposal_std * e;
        }
        let lp = log_density(&proposal);
        let u: f64 = rng.random();
        if u.ln() < lp - current_lp {
            std::mem::swap(&mut current, &mut proposal);
            current_lp = lp;
            accepted += 1;
        }
        if (t + 1) % thin == 0 {
            samples.push(current.clone());
        }
    }
    Ok(MhChain {
        samples,
        acceptance_rate: accepted as f64 / steps as f64,
    })
}

/// Log posterior of flattened readout weights: softmax likelihood over the
/// data plus the Gaussian node prior.
pub fn readout_log_posterior(
    w_flat: &[f64],
    shape: (usize, usize),
    states: &Matrix,
    labels: &[usize],
    p: &NodePrior,
) -> f64 {
    let mut lp: f64 = w_flat
        .iter()
        .zip(p.mean.as_slice().iter().zip(p.var.as_slice()))
        .map(|(&w, (&m, &v))| log_normal_pdf(w, m, v))
        .sum();
    let n = shape.1 - 1;
    let mut z = vec![0.0; shape.0];
    for (i, &y) in labels.iter().enumerate() {
        let s = states.row(i);
        for (k, zk) in z.iter_mut().enumerate() {
            let wr = &w_flat[k * shape.1..(k + 1) * shape.1];
            *zk = crate::matrix::dot(&wr[..n], s) + wr[n];
        }
        lp += z[y] - log_sum_exp(&z);
    }
    lp
}

/// Random-walk MH over the readout weights started at the posterior mean;
/// keeps every tenth state.
pub fn mh_refine(
    q: &WeightDistribution,
    states: &Matrix,
    labels: &[usize],
    p: &NodePrior,
    steps: usize,
    proposal_std: f64,
    seed: u64,
) -> Result<MhChain> {
    let shape = q.mu.shape();
    if p.mean.shape() != shape || (states.rows() > 0 && states.cols() + 1 != shape.1) {
        return Err(Error::dim("posterior, prior and state shapes disagree"));
    }
    if labels.len() != states.rows() {
        return Err(Error::dim("labels and states differ in length"));
    }
    let mut rng = stream_rng(seed, 0x6d68);
    random_walk_metropolis(
        |w| readout_log_posterior(w, shape, states, labels, p),
        q.mu.as_slice().to_vec(),
        steps,
        proposal_std,
        MH_THIN,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{build_prior, match_moments};
    use crate::reservoir::size_reservoir;
    use crate::signals::FaultLabel;
    use crate::features::FeatureVector;
    use crate::stats::{mean, variance};

    fn toy_prior(k: usize, f: usize, seed: u64) -> WeightPrior {
        let mut rng = stream_rng(seed, 5);
        let classes: Vec<FaultLabel> = (0..k).map(|c| FaultLabel::new(c as u8 + 1).unwrap()).collect();
        let rows: Vec<FeatureVector> = classes
            .iter()
            .flat_map(|&l| {
                (0..6)
                    .map(|_| FeatureVector {
                        values: (0..f).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        label: l,
                        load_level: 0.0,
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        build_prior(&match_moments(&rows, &classes).unwrap(), 0.05).unwrap()
    }

    #[test]
    fn posterior_starts_on_prior() {
        let prior = toy_prior(3, 5, 1);
        let cfg = size_reservoir(3, 5, None, 4).unwrap();
        let (q, p) = init_readout_from_priors(&prior, &cfg).unwrap();
        assert_eq!(q.mu.shape(), (3, 13));
        let sigma = q.sigma();
        for c in 0..3 {
            for node in 0..12 {
                let j = cfg.node_to_feature[node];
                assert_eq!(q.mu.get(c, node), prior.mean.get(c, j));
                assert_eq!(p.var.get(c, node), prior.var.get(c, j));
                assert!((sigma.get(c, node) - prior.var.get(c, j).sqrt()).abs() < 1e-12);
            }
            assert_eq!(p.mean.get(c, 12), 0.0);
            assert_eq!(p.var.get(c, 12), 1.0);
        }
        let kl: f64 = (0..q.mu.as_slice().len())
            .map(|i| {
                let s = sigma.as_slice()[i];
                kl_unchecked(q.mu.as_slice()[i], s * s, p.mean.as_slice()[i], p.var.as_slice()[i])
            })
            .sum();
        assert!(kl.abs() < 1e-9, "{kl}");
    }

    #[test]
    fn copy_contract_for_single_weight() {
        let mut prior = toy_prior(2, 1, 0);
        prior.mean.set(0, 0, 2.0);
        prior.var.set(0, 0, 1.01);
        let cfg = size_reservoir(2, 1, None, 1).unwrap();
        let (q, _) = init_readout_from_priors(&prior, &cfg).unwrap();
        assert_eq!(q.mu.get(0, 0), 2.0);
        assert!((q.sigma().get(0, 0) - 1.01f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn missing_node_assignment_rejected() {
        let prior = toy_prior(3, 5, 1);
        let mut cfg = size_reservoir(3, 5, None, 4).unwrap();
        cfg.node_to_feature.pop();
        assert!(init_readout_from_priors(&prior, &cfg).is_err());
        let mut cfg = size_reservoir(3, 4, None, 4).unwrap();
        cfg.num_features = 4;
        assert!(init_readout_from_priors(&prior, &cfg).is_err());
    }

    fn tiny_problem(seed: u64, k: usize, n: usize, rows: usize) -> (Matrix, Vec<usize>, VariationalPosterior, NodePrior) {
        let mut rng = stream_rng(seed, 11);
        let states = Matrix::from_fn(rows, n, |_, _| rng.random_range(-0.99..0.99));
        let labels: Vec<usize> = (0..rows).map(|i| i % k).collect();
        let q = VariationalPosterior {
            mu: Matrix::from_fn(k, n + 1, |_, _| rng.random_range(-1.0..1.0)),
            rho_raw: Matrix::from_fn(k, n + 1, |_, _| rng.random_range(-3.0..0.5)),
        };
        let p = NodePrior {
            mean: Matrix::from_fn(k, n + 1, |_, _| rng.random_range(-1.0..1.0)),
            var: Matrix::from_fn(k, n + 1, |_, _| rng.random_range(0.05..2.0)),
        };
        (states, labels, q, p)
    }

    #[test]
    fn kl_vanishes_when_posterior_equals_prior() {
        let (states, labels, _, p) = tiny_problem(3, 3, 4, 10);
        let q = VariationalPosterior {
            mu: p.mean.clone(),
            rho_raw: p.var.map(|v| inverse_softplus(v.sqrt())),
        };
        let rows: Vec<usize> = (0..10).collect();
        let mut rng = stream_rng(1, 1);
        let eps = draw_noise(q.mu.shape(), 2, &mut rng);
        let t = elbo_loss(&states, &labels, &rows, &q, &p, 1.0, &eps).unwrap();
        assert!(t.kl_term.abs() < 1e-9);
        assert!((t.loss - t.data_term).abs() < 1e-9);
    }

    #[test]
    fn confident_deterministic_posterior_has_near_zero_loss() {
        let states = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let labels = vec![0, 1];
        let q = VariationalPosterior {
            mu: Matrix::from_rows(&[vec![50.0, -50.0, 0.0], vec![-50.0, 50.0, 0.0]]).unwrap(),
            rho_raw: Matrix::filled(2, 3, inverse_softplus(1e-6)),
        };
        let p = NodePrior {
            mean: Matrix::zeros(2, 3),
            var: Matrix::filled(2, 3, 1.0),
        };
        let mut rng = stream_rng(0, 0);
        let eps = draw_noise((2, 3), 2, &mut rng);
        let t = elbo_loss(&states, &labels, &[0, 1], &q, &p, 0.0, &eps).unwrap();
        assert!(t.loss < 1e-12, "{}", t.loss);
    }

    /// Central finite differences with shared noise draws.
    pub(crate) fn gradient_check(seed: u64) -> f64 {
        let (states, labels, q, p) = tiny_problem(seed, 3, 4, 7);
        let rows: Vec<usize> = (0..7).collect();
        let mut rng = stream_rng(seed, 12);
        let eps = draw_noise(q.mu.shape(), 2, &mut rng);
        let beta = 0.37;
        let t = elbo_loss(&states, &labels, &rows, &q, &p, beta, &eps).unwrap();
        let h = 1e-5;
        let loss_at = |q: &VariationalPosterior| elbo_loss(&states, &labels, &rows, q, &p, beta, &eps).unwrap().loss;
        let mut worst: f64 = 0.0;
        for idx in 0..q.mu.as_slice().len() {
            for which in 0..2 {
                let mut plus = q.clone();
                let mut minus = q.clone();
                let (pp, mm, analytic) = if which == 0 {
                    (plus.mu.as_mut_slice(), minus.mu.as_mut_slice(), t.grad_mu.as_slice()[idx])
                } else {
                    (plus.rho_raw.as_mut_slice(), minus.rho_raw.as_mut_slice(), t.grad_rho.as_slice()[idx])
                };
                pp[idx] += h;
                mm[idx] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..50 {
            let rel = gradient_check(seed);
            assert!(rel < 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    fn blobs(seed: u64, n: usize) -> (Matrix, Vec<usize>) {
        let mut rng = stream_rng(seed, 2);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let states = Matrix::from_fn(n, 2, |i, _| {
            let centre = if labels[i] == 0 { -0.5 } else { 0.5 };
            centre + rng.random_range(-0.2..0.2)
        });
        (states, labels)
    }

    fn flat_prior(k: usize, cols: usize) -> (VariationalPosterior, NodePrior) {
        let p = NodePrior {
            mean: Matrix::zeros(k, cols),
            var: Matrix::filled(k, cols, 1.0),
        };
        let q = VariationalPosterior {
            mu: Matrix::zeros(k, cols),
            rho_raw: Matrix::filled(k, cols, inverse_softplus(1.0)),
        };
        (q, p)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (states, labels) = blobs(1, 80);
        let (q0, p) = flat_prior(2, 3);
        let cfg = TrainConfig {
            epochs: 150,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train_bbb(&states, &labels, &q0, &p, &cfg).unwrap();
        let preds = predict_batch(&out.posterior.distribution(), &states, 100, 4).unwrap();
        let correct = preds.iter().zip(&labels).filter(|(r, &y)| r.argmax() == y).count();
        assert_eq!(correct, 80);
        let t = &out.loss_trace;
        assert_eq!(t.len(), 150);
        assert!(mean(&t[t.len() - 10..]) < mean(&t[..10]));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (states, labels) = blobs(2, 20);
        let (q0, p) = flat_prior(2, 3);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_bbb(&states, &labels, &q0, &p, &cfg).unwrap();
        assert_eq!(out.posterior, q0);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (states, labels) = blobs(3, 40);
        let (q0, p) = flat_prior(2, 3);
        let cfg = TrainConfig {
            epochs: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train_bbb(&states, &labels, &q0, &p, &cfg).unwrap();
        let b = train_bbb(&states, &labels, &q0, &p, &cfg).unwrap();
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn single_class_training_rejected() {
        let states = Matrix::zeros(4, 2);
        let (q0, p) = flat_prior(2, 3);
        assert!(train_bbb(&states, &[0, 0, 0, 0], &q0, &p, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let (states, labels) = blobs(4, 40);
        let (q0, p) = flat_prior(2, 3);
        let cfg = TrainConfig {
            learning_rate: 1e4,
            epochs: 50,
            ..TrainConfig::default()
        };
        match train_bbb(&states, &labels, &q0, &p, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_draw_has_no_epistemic_part() {
        let (_, _, q, _) = tiny_problem(7, 4, 5, 1);
        let d = q.distribution();
        let r = predict(&d, &[0.1, -0.2, 0.3, 0.0, 0.5], 1, 3).unwrap();
        assert_eq!(r.epistemic, 0.0);
        assert!(predict(&d, &[0.0; 5], 0, 3).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_prediction() {
        let d = WeightDistribution {
            mu: Matrix::zeros(4, 6),
            sigma: Matrix::filled(4, 6, 1e-12),
        };
        let r = predict(&d, &[0.3; 5], 20, 1).unwrap();
        for p in &r.probs {
            assert!((p - 0.25).abs() < 1e-9);
        }
        assert!((r.total_uncertainty - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn predictive_invariants_hold() {
        for trial in 0..100 {
            let (states, _, q, _) = tiny_problem(trial, 3, 4, 1);
            let r = predict(&q.distribution(), states.row(0), 17, trial).unwrap();
            let sum: f64 = r.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(r.probs.iter().all(|&p| p >= 0.0));
            let ln_k = 3f64.ln();
            assert!(r.aleatoric >= 0.0 && r.aleatoric <= ln_k + 1e-12);
            assert!(r.total_uncertainty >= 0.0 && r.total_uncertainty <= ln_k + 1e-12);
            assert!(r.epistemic >= -1e-9);
            assert_eq!(r.total_uncertainty, r.aleatoric + r.epistemic);
        }
    }

    #[test]
    fn batch_prediction_independent_of_threads() {
        let (states, _, q, _) = tiny_problem(8, 3, 4, 30);
        let d = q.distribution();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| predict_batch(&d, &states, 25, 77).unwrap());
        let b = wide.install(|| predict_batch(&d, &states, 25, 77).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_step_proposal_accepts_everything() {
        let (states, labels, q, p) = tiny_problem(9, 2, 3, 6);
        let chain = mh_refine(&q.distribution(), &states, &labels, &p, 200, 0.0, 1).unwrap();
        assert_eq!(chain.acceptance_rate, 1.0);
        assert_eq!(chain.samples.len(), 20);
        assert!(chain.samples.iter().all(|s| s == q.mu.as_slice()));
        assert!(mh_refine(&q.distribution(), &states, &labels, &p, 0, 0.1, 1).is_err());
    }

    #[test]
    fn random_walk_acceptance_is_partial() {
        let (states, labels, q, p) = tiny_problem(10, 2, 3, 6);
        let chain = mh_refine(&q.distribution(), &states, &labels, &p, 2000, 0.1, 2).unwrap();
        assert!(chain.acceptance_rate > 0.0 && chain.acceptance_rate < 1.0);
    }

    /// Batch-means standard error of a correlated series.
    fn batch_se(xs: &[f64], batches: usize) -> f64 {
        let size = xs.len() / batches;
        let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
        (variance(&means) / batches as f64).sqrt()
    }

    #[test]
    fn one_dimensional_posterior_mean_matches_quadrature() {
        // Logistic likelihood for two points, standard-normal prior.
        let data = [(1.3, 1.0), (-0.4, 1.0)];
        let log_post = |w: f64| -> f64 {
            let lik: f64 = data
                .iter()
                .map(|&(x, y): &(f64, f64)| {
                    let z: f64 = y * w * x;
                    -(1.0 + (-z).exp()).ln()
                })
                .sum();
            lik - 0.5 * w * w
        };
        let (lo, hi, n) = (-10.0, 10.0, 2000);
        let dx = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
        let dens: Vec<f64> = grid.iter().map(|&w| log_post(w).exp()).collect();
        let z: f64 = dens.iter().sum();
        let quad_mean: f64 = grid.iter().zip(&dens).map(|(w, d)| w * d).sum::<f64>() / z;

        let mut rng = stream_rng(2024, 0);
        let chain = random_walk_metropolis(|w| log_post(w[0]), vec![0.0], 100_000, 1.0, 1, &mut rng).unwrap();
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let se = batch_se(&xs, 100);
        assert!((mean(&xs) - quad_mean).abs() < 3.0 * se, "{} vs {quad_mean} (se {se})", mean(&xs));
    }

    #[test]
    fn chain_without_data_recovers_prior() {
        let k = 2;
        let cols = 2;
        let p = NodePrior {
            mean: Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0]]).unwrap(),
            var: Matrix::from_rows(&[vec![0.25, 1.0], vec![0.5, 2.0]]).unwrap(),
        };
        let q = WeightDistribution {
            mu: p.mean.clone(),
            sigma: Matrix::filled(k, cols, 1.0),
        };
        let states = Matrix::zeros(0, 1);
        let chain = mh_refine(&q, &states, &[], &p, 400_000, 0.8, 3).unwrap();
        for idx in 0..k * cols {
            let xs: Vec<f64> = chain.samples.iter().map(|s| s[idx]).collect();
            let m = p.mean.as_slice()[idx];
            let v = p.var.as_slice()[idx];
            let se_mean = batch_se(&xs, 50);
            assert!((mean(&xs) - m).abs() < 3.0 * se_mean, "weight {idx} mean");
            let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
            let se_var = batch_se(&sq, 50);
            assert!((mean(&sq) - v).abs() < 3.0 * se_var, "weight {idx} var");
        }
    }
}
