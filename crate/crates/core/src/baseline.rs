//! Fully variational one-hidden-layer network, trained end to end with the
//! same Bayes-by-Backprop machinery as the readout. Every weight has a
//! standard-normal prior.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::priors::kl_unchecked;
use crate::readout::{draw_noise, inverse_softplus, softplus, PredictiveResult, TrainConfig, VariationalPosterior};
use crate::stats::{entropy, log_sum_exp, softmax_in_place, stream_rng};

pub const DEFAULT_HIDDEN: usize = 64;
const INIT_SIGMA: f64 = 0.01;
const DIVERGENCE_LOSS: f64 = 1e6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `hidden = tanh(W1 [x; 1])`, `logits = W2 [hidden; 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBnn {
    pub hidden: VariationalPosterior,
    pub output: VariationalPosterior,
}

impl DenseBnn {
    pub fn init(num_inputs: usize, hidden: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            VariationalPosterior {
                mu: Matrix::from_fn(rows, cols, |_, _| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    scale * e
                }),
                rho_raw: Matrix::filled(rows, cols, inverse_softplus(INIT_SIGMA)),
            }
        };
        Self {
            hidden: layer(hidden, num_inputs + 1),
            output: layer(num_classes, hidden + 1),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.hidden.num_parameters() + self.output.num_parameters()
    }

    /// Monte-Carlo predictive per row of `x`; row `i` uses stream `(seed, i)`.
    pub fn predict_batch(&self, x: &Matrix, mc_samples: usize, seed: u64) -> Result<Vec<PredictiveResult>> {
        if mc_samples < 1 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        let hd = self.hidden.distribution();
        let od = self.output.distribution();
        Ok((0..x.rows())
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i as u64);
                let k = self.output.mu.rows();
                let mut mean = vec![0.0; k];
                let mut aleatoric = 0.0;
                let mut h = vec![0.0; hd.mu.rows()];
                let mut p = vec![0.0; k];
                for _ in 0..mc_samples {
                    let w1 = hd.sample(&mut rng);
                    let w2 = od.sample(&mut rng);
                    forward(&w1, &w2, x.row(i), &mut h, &mut p);
                    softmax_in_place(&mut p);
                    aleatoric += entropy(&p);
                    for (m, v) in mean.iter_mut().zip(&p) {
                        *m += v;
                    }
                }
                let m = mc_samples as f64;
                mean.iter_mut().for_each(|v| *v /= m);
                aleatoric /= m;
                let total = entropy(&mean);
                PredictiveResult {
                    probs: mean,
                    total_uncertainty: total,
                    aleatoric,
                    epistemic: total - aleatoric,
                }
            })
            .collect())
    }
}

fn affine(w: &Matrix, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        *o = dot(&row[..n], x) + row[n];
    }
}

fn forward(w1: &Matrix, w2: &Matrix, x: &[f64], h: &mut [f64], logits: &mut [f64]) {
    affine(w1, x, h);
    h.iter_mut().for_each(|v| *v = v.tanh());
    affine(w2, h, logits);
}

#[derive(Debug, Clone)]
pub struct DenseElbo {
    pub loss: f64,
    pub grad_hidden: (Matrix, Matrix),
    pub grad_output: (Matrix, Matrix),
}

/// KL to N(0, 1) plus the reparameterization chain rule for one layer.
/// `acc_mu` and `acc_eps` hold the averaged data gradients w.r.t. the
/// sampled weights and their noise-weighted sum.
fn finish_layer(q: &VariationalPosterior, acc_mu: Matrix, acc_eps: Matrix, beta: f64) -> (f64, Matrix, Matrix) {
    let mut kl = 0.0;
    let mut gm = acc_mu;
    let mut gr = acc_eps;
    for idx in 0..gm.as_slice().len() {
        let mu = q.mu.as_slice()[idx];
        let rho = q.rho_raw.as_slice()[idx];
        let s = softplus(rho);
        kl += kl_unchecked(mu, s * s, 0.0, 1.0);
        gm.as_mut_slice()[idx] += beta * mu;
        let ds = gr.as_slice()[idx] + beta * (-1.0 / s + s);
        gr.as_mut_slice()[idx] = ds * sigmoid(rho);
    }
    (kl, gm, gr)
}

/// Negative ELBO of minibatch `rows` under the noise pairs `eps`.
pub fn dense_elbo(
    x: &Matrix,
    labels: &[usize],
    rows: &[usize],
    net: &DenseBnn,
    beta: f64,
    eps: &[(Matrix, Matrix)],
) -> Result<DenseElbo> {
    if rows.is_empty() || eps.is_empty() {
        return Err(Error::invalid("empty minibatch or no noise draws"));
    }
    let hdim = net.hidden.mu.rows();
    let k = net.output.mu.rows();
    let f = x.cols();
    let s1 = net.hidden.sigma();
    let s2 = net.output.sigma();
    let count = eps.len() as f64;
    let mut g1m = Matrix::zeros(hdim, f + 1);
    let mut g1e = Matrix::zeros(hdim, f + 1);
    let mut g2m = Matrix::zeros(k, hdim + 1);
    let mut g2e = Matrix::zeros(k, hdim + 1);
    let mut data = 0.0;
    let mut h = vec![0.0; hdim];
    let mut z = vec![0.0; k];
    let mut dh = vec![0.0; hdim];
    for (e1, e2) in eps {
        let mut w1 = net.hidden.mu.clone();
        for ((w, s), e) in w1.as_mut_slice().iter_mut().zip(s1.as_slice()).zip(e1.as_slice()) {
            *w += s * e;
        }
        let mut w2 = net.output.mu.clone();
        for ((w, s), e) in w2.as_mut_slice().iter_mut().zip(s2.as_slice()).zip(e2.as_slice()) {
            *w += s * e;
        }
        let mut gw1 = Matrix::zeros(hdim, f + 1);
        let mut gw2 = Matrix::zeros(k, hdim + 1);
        for &i in rows {
            let xi = x.row(i);
            forward(&w1, &w2, xi, &mut h, &mut z);
            let lse = log_sum_exp(&z);
            let y = labels[i];
            data += (lse - z[y]) / count;
            dh.fill(0.0);
            for c in 0..k {
                let dz = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                let g = gw2.row_mut(c);
                for (gv, hv) in g[..hdim].iter_mut().zip(&h) {
                    *gv += dz * hv;
                }
                g[hdim] += dz;
                for (d, wv) in dh.iter_mut().zip(&w2.row(c)[..hdim]) {
                    *d += dz * wv;
                }
            }
            for j in 0..hdim {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                let g = gw1.row_mut(j);
                for (gv, xv) in g[..f].iter_mut().zip(xi) {
                    *gv += da * xv;
                }
                g[f] += da;
            }
        }
        for (((gm, ge), gw), e) in g1m
            .as_mut_slice()
            .iter_mut()
            .zip(g1e.as_mut_slice())
            .zip(gw1.as_slice())
            .zip(e1.as_slice())
        {
            *gm += gw / count;
            *ge += gw * e / count;
        }
        for (((gm, ge), gw), e) in g2m
            .as_mut_slice()
            .iter_mut()
            .zip(g2e.as_mut_slice())
            .zip(gw2.as_slice())
            .zip(e2.as_slice())
        {
            *gm += gw / count;
            *ge += gw * e / count;
        }
    }
    let (kl1, g1m, g1r) = finish_layer(&net.hidden, g1m, g1e, beta);
    let (kl2, g2m, g2r) = finish_layer(&net.output, g2m, g2e, beta);
    let loss = data + beta * (kl1 + kl2);
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite baseline loss".into()));
    }
    Ok(DenseElbo {
        loss,
        grad_hidden: (g1m, g1r),
        grad_output: (g2m, g2r),
    })
}

fn sgd(q: &mut VariationalPosterior, grads: &(Matrix, Matrix), lr: f64) {
    for (m, g) in q.mu.as_mut_slice().iter_mut().zip(grads.0.as_slice()) {
        *m -= lr * g;
    }
    for (r, g) in q.rho_raw.as_mut_slice().iter_mut().zip(grads.1.as_slice()) {
        *r -= lr * g;
    }
}

/// Trains the baseline on rows of `x` (already standardized).
pub fn train_dense_bnn(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(DenseBnn, Vec<f64>)> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::dim("labels and inputs differ in length"));
    }
    if hidden == 0 || num_classes < 2 || labels.iter().any(|&y| y >= num_classes) {
        return Err(Error::invalid("invalid baseline shape or labels"));
    }
    let mut rng = stream_rng(cfg.seed, 0x6261_7365);
    let mut net = DenseBnn::init(x.cols(), hidden, num_classes, &mut rng);
    let beta = cfg.resolved_beta(x.rows());
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let e1 = draw_noise(net.hidden.mu.shape(), cfg.mc_train_samples, &mut rng);
            let e2 = draw_noise(net.output.mu.shape(), cfg.mc_train_samples, &mut rng);
            let eps: Vec<(Matrix, Matrix)> = e1.into_iter().zip(e2).collect();
            let terms = match dense_elbo(x, labels, batch, &net, beta, &eps) {
                Ok(t) if t.loss <= DIVERGENCE_LOSS => t,
                Ok(t) => return Err(Error::Diverged { epoch, loss: t.loss, trace }),
                Err(Error::Numerical(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::INFINITY,
                        trace,
                    })
                }
                Err(e) => return Err(e),
            };
            total += terms.loss;
            sgd(&mut net.hidden, &terms.grad_hidden, cfg.learning_rate);
            sgd(&mut net.output, &terms.grad_output, cfg.learning_rate);
        }
        trace.push(total);
    }
    Ok((net, trace))
}
