//! The assembled classifier: standardization, priors, optional channel
//! ranking pre-pass, reservoir, and the trained readout.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{rank_channels_transformed, structure_from_ranks_grouped, ChannelRanking, MIN_VALIDATION_PER_CLASS};
use crate::features::{channel_groups, fit_global_stats, DensityKind, FeatureVector, GlobalStats, NUM_FEATURES};
use crate::matrix::Matrix;
use crate::priors::{build_prior, match_moments, separation_scores, WeightPrior, DEFAULT_TAU};
use crate::readout::{
    init_readout_from_priors, mh_refine, predict_batch, predictive_from_samples, train_bbb,
    NodePrior, PredictiveResult, TrainConfig, WeightDistribution,
};
use crate::reservoir::{
    collect_states, init_reservoir, size_reservoir_grouped, ReservoirConfig, ReservoirWeights,
    DEFAULT_CONNECTIVITY, DEFAULT_DRIVE_STEPS, DEFAULT_INPUT_SCALING, DEFAULT_LEAK_ALPHA,
    DEFAULT_NODES_PER_CLASS, DEFAULT_SPECTRAL_RADIUS,
};
use crate::signals::FaultLabel;
use crate::stats::stream_rng;

pub mod tag {
    pub const RESERVOIR: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const SHAP_SPLIT: u64 = 3;
    pub const SHAP_MC: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const DATA: u64 = 7;
    pub const MH: u64 = 8;
    pub const BASELINE: u64 = 9;
}

/// SplitMix64 of `master` mixed with `tag`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tau: f64,
    /// Density estimator used for exported class-conditional densities.
    pub density: DensityKind,
    /// Build priors and drive the reservoir with z-scored features; when
    /// false, raw feature values are used.
    pub standardize: bool,
    pub nodes_per_class: usize,
    pub leak_alpha: f64,
    pub spectral_radius: f64,
    pub input_scaling: f64,
    pub connectivity: f64,
    pub drive_steps: usize,
    /// Rank channels on a pre-pass model and allocate nodes by rank.
    pub shap: bool,
    pub shap_validation_fraction: f64,
    pub shap_mc_samples: usize,
    /// Metropolis-Hastings steps after training (0 disables).
    pub mh_steps: usize,
    pub mh_proposal_std: f64,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            density: DensityKind::default(),
            standardize: true,
            nodes_per_class: DEFAULT_NODES_PER_CLASS,
            leak_alpha: DEFAULT_LEAK_ALPHA,
            spectral_radius: DEFAULT_SPECTRAL_RADIUS,
            input_scaling: DEFAULT_INPUT_SCALING,
            connectivity: DEFAULT_CONNECTIVITY,
            drive_steps: DEFAULT_DRIVE_STEPS,
            shap: true,
            shap_validation_fraction: 0.25,
            shap_mc_samples: 50,
            mh_steps: 0,
            mh_proposal_std: 0.02,
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::invalid("tau must be nonnegative"));
        }
        if !(self.shap_validation_fraction > 0.0 && self.shap_validation_fraction < 1.0) {
            return Err(Error::invalid("shap_validation_fraction must lie in (0, 1)"));
        }
        if self.shap_mc_samples == 0 {
            return Err(Error::invalid("shap_mc_samples must be positive"));
        }
        if !(self.mh_proposal_std >= 0.0) {
            return Err(Error::invalid("mh_proposal_std must be nonnegative"));
        }
        self.train.validate()
    }

    fn apply_reservoir_knobs(&self, mut cfg: ReservoirConfig, seed: u64) -> Result<ReservoirConfig> {
        cfg.leak_alpha = self.leak_alpha;
        cfg.spectral_radius = self.spectral_radius;
        cfg.input_scaling = self.input_scaling;
        cfg.connectivity = self.connectivity;
        cfg.drive_steps = self.drive_steps;
        cfg.seed = derive_seed(seed, tag::RESERVOIR);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Thinned MH chain over the readout weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPosterior {
    pub samples: Vec<Matrix>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    pub classes: Vec<FaultLabel>,
    pub standardize: bool,
    pub global_stats: GlobalStats,
    pub prior: WeightPrior,
    pub reservoir: ReservoirConfig,
    pub weights: ReservoirWeights,
    pub node_prior: NodePrior,
    pub posterior: WeightDistribution,
    pub refined: Option<RefinedPosterior>,
    pub channel_ranking: Option<ChannelRanking>,
    pub train: TrainConfig,
    pub epochs_trained: usize,
    pub loss_trace: Vec<f64>,
    pub seed: u64,
}

/// Sorted distinct labels.
pub fn distinct_labels(rows: &[FeatureVector]) -> Vec<FaultLabel> {
    let mut classes: Vec<FaultLabel> = rows.iter().map(|r| r.label).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Per-class seeded split. Each class sends `round(fraction * n)` rows (at
/// least `min_holdout`) to the second part and keeps at least one row in the
/// first. Both index lists are ascending.
pub fn stratified_split(
    labels: &[FaultLabel],
    holdout_fraction: f64,
    min_holdout: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut keep = Vec::new();
    let mut hold = Vec::new();
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for label in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        let n = idx.len();
        let h = ((holdout_fraction * n as f64).round() as usize).max(min_holdout);
        if h >= n {
            return Err(Error::InsufficientClass {
                label: label.code(),
                count: n,
                required: h + 1,
            });
        }
        let mut rng = stream_rng(seed, label.code() as u64);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        hold.extend_from_slice(&idx[..h]);
        keep.extend_from_slice(&idx[h..]);
    }
    keep.sort_unstable();
    hold.sort_unstable();
    Ok((keep, hold))
}

/// Channel blocks (or single features for other layouts), each ordered by
/// decreasing class separation so that nodes reach informative statistics
/// first.
fn feature_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut groups = if scores.len() == NUM_FEATURES {
        channel_groups()
    } else {
        (0..scores.len()).map(|j| vec![j]).collect()
    };
    for g in &mut groups {
        g.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    groups
}

fn transform(stats: &GlobalStats, standardize: bool, rows: &[FeatureVector]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            if standardize {
                stats.standardize_values(&r.values)
            } else {
                r.values.clone()
            }
        })
        .collect()
}

fn as_feature_rows(z: &[Vec<f64>], labels: &[usize], classes: &[FaultLabel]) -> Vec<FeatureVector> {
    z.iter()
        .zip(labels)
        .map(|(x, &y)| FeatureVector {
            values: x.clone(),
            label: classes[y],
            load_level: 0.0,
        })
        .collect()
}

fn indices_of(classes: &[FaultLabel], rows: &[FeatureVector]) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| {
            classes
                .iter()
                .position(|&c| c == r.label)
                .ok_or_else(|| Error::invalid(format!("label {} is not a model class", r.label.code())))
        })
        .collect()
}

impl FaultModel {
    pub fn fit(rows: &[FeatureVector], cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let classes = distinct_labels(rows);
        if classes.len() < 2 {
            return Err(Error::invalid(format!(
                "training data holds {} class(es), at least 2 required",
                classes.len()
            )));
        }
        let stats = fit_global_stats(rows).map_err(|e| e.in_stage("features"))?;
        let z = transform(&stats, cfg.standardize, rows);
        let labels = indices_of(&classes, rows)?;
        let f = stats.num_features();
        let moments = match_moments(&as_feature_rows(&z, &labels, &classes), &classes).map_err(|e| e.in_stage("priors"))?;
        let scores = separation_scores(&moments);
        let groups = feature_groups(&scores);
        let base = size_reservoir_grouped(classes.len(), f, &groups, None, cfg.nodes_per_class)
            .and_then(|b| cfg.apply_reservoir_knobs(b, seed))
            .map_err(|e| e.in_stage("reservoir"))?;

        let (reservoir, ranking) = if cfg.shap {
            let row_labels: Vec<FaultLabel> = rows.iter().map(|r| r.label).collect();
            let (fit_idx, val_idx) = stratified_split(
                &row_labels,
                cfg.shap_validation_fraction,
                MIN_VALIDATION_PER_CLASS,
                derive_seed(seed, tag::SHAP_SPLIT),
            )
            .map_err(|e| e.in_stage("channel ranking"))?;
            let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                (idx.iter().map(|&i| z[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
            };
            let (z_fit, y_fit) = pick(&fit_idx);
            let (z_val, y_val) = pick(&val_idx);
            let pre = Self::fit_with(&classes, &stats, cfg, &z_fit, &y_fit, base.clone(), None, seed)
                .map_err(|e| e.in_stage("channel ranking pre-pass"))?;
            let ranking = rank_channels_transformed(
                &pre,
                &z_val,
                &y_val,
                cfg.shap_mc_samples,
                derive_seed(seed, tag::SHAP_MC),
            )
            .map_err(|e| e.in_stage("channel ranking"))?;
            log::info!(
                "channel ranking: {:?}",
                ranking.top(ranking.channels.len()).iter().map(|c| c.name()).collect::<Vec<_>>()
            );
            let structured =
                structure_from_ranks_grouped(&ranking.aggregate, &base, &groups).map_err(|e| e.in_stage("reservoir"))?;
            (structured, Some(ranking))
        } else {
            (base, None)
        };
        Self::fit_with(&classes, &stats, cfg, &z, &labels, reservoir, ranking, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_with(
        classes: &[FaultLabel],
        stats: &GlobalStats,
        cfg: &ModelConfig,
        z: &[Vec<f64>],
        labels: &[usize],
        reservoir: ReservoirConfig,
        ranking: Option<ChannelRanking>,
        seed: u64,
    ) -> Result<Self> {
        let prior = match_moments(&as_feature_rows(z, labels, classes), classes)
            .and_then(|m| build_prior(&m, cfg.tau))
            .map_err(|e| e.in_stage("priors"))?;
        let weights = init_reservoir(&reservoir).map_err(|e| e.in_stage("reservoir"))?;
        let states = collect_states(&weights, &reservoir, z).map_err(|e| e.in_stage("reservoir"))?;
        let (q0, node_prior) = init_readout_from_priors(&prior, &reservoir).map_err(|e| e.in_stage("readout"))?;
        let train = TrainConfig {
            seed: derive_seed(seed, tag::TRAIN),
            ..cfg.train.clone()
        };
        let out = train_bbb(&states, labels, &q0, &node_prior, &train).map_err(|e| e.in_stage("readout training"))?;
        let posterior = out.posterior.distribution();
        let refined = if cfg.mh_steps > 0 {
            let chain = mh_refine(
                &posterior,
                &states,
                labels,
                &node_prior,
                cfg.mh_steps,
                cfg.mh_proposal_std,
                derive_seed(seed, tag::MH),
            )
            .map_err(|e| e.in_stage("mh refinement"))?;
            log::info!("MH acceptance rate {:.3}", chain.acceptance_rate);
            let (k, cols) = posterior.mu.shape();
            Some(RefinedPosterior {
                samples: chain
                    .samples
                    .into_iter()
                    .map(|s| Matrix::from_fn(k, cols, |r, c| s[r * cols + c]))
                    .collect(),
                acceptance_rate: chain.acceptance_rate,
            })
        } else {
            None
        };
        Ok(Self {
            classes: classes.to_vec(),
            standardize: cfg.standardize,
            global_stats: stats.clone(),
            prior,
            reservoir,
            weights,
            node_prior,
            posterior,
            refined,
            channel_ranking: ranking,
            epochs_trained: train.epochs,
            train,
            loss_trace: out.loss_trace,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Trainable scalars of the readout (a mean and a scale per weight).
    pub fn trainable_parameters(&self) -> usize {
        2 * self.posterior.mu.as_slice().len()
    }

    /// Rows in the model's input space (z-scored unless raw mode).
    pub fn transform_rows(&self, rows: &[FeatureVector]) -> Vec<Vec<f64>> {
        transform(&self.global_stats, self.standardize, rows)
    }

    /// Value that stands in for feature `j` when its channel is masked.
    pub fn masked_value(&self, j: usize) -> f64 {
        if self.standardize {
            0.0
        } else {
            self.global_stats.mean[j]
        }
    }

    pub fn class_indices(&self, rows: &[FeatureVector]) -> Result<Vec<usize>> {
        indices_of(&self.classes, rows)
    }

    pub fn states(&self, z: &[Vec<f64>]) -> Result<Matrix> {
        collect_states(&self.weights, &self.reservoir, z)
    }

    /// The readout as it was before training.
    pub fn initial_posterior(&self) -> Result<WeightDistribution> {
        Ok(init_readout_from_priors(&self.prior, &self.reservoir)?.0.distribution())
    }

    pub fn mean_sigma(&self) -> f64 {
        self.posterior.sigma.mean()
    }

    pub fn predict(&self, rows: &[FeatureVector], mc_samples: usize, seed: u64) -> Result<Vec<PredictiveResult>> {
        self.predict_transformed(&self.transform_rows(rows), mc_samples, seed)
    }

    pub fn predict_transformed(&self, z: &[Vec<f64>], mc_samples: usize, seed: u64) -> Result<Vec<PredictiveResult>> {
        let states = self.states(z)?;
        match &self.refined {
            Some(r) if !r.samples.is_empty() => predict_from_chain(r, &states, mc_samples, seed),
            _ => predict_batch(&self.posterior, &states, mc_samples, seed),
        }
    }

    /// Predictions under an explicit readout distribution.
    pub fn predict_with(
        &self,
        q: &WeightDistribution,
        z: &[Vec<f64>],
        mc_samples: usize,
        seed: u64,
    ) -> Result<Vec<PredictiveResult>> {
        predict_batch(q, &self.states(z)?, mc_samples, seed)
    }
}

fn predict_from_chain(
    r: &RefinedPosterior,
    states: &Matrix,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveResult>> {
    if mc_samples < 1 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    Ok((0..states.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let picks: Vec<Matrix> = (0..mc_samples)
                .map(|_| r.samples[rng.random_range(0..r.samples.len())].clone())
                .collect();
            predictive_from_samples(&picks, states.row(i))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(code: u8) -> FaultLabel {
        FaultLabel::new(code).unwrap()
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, tag::TRAIN), derive_seed(1, tag::RESERVOIR));
        assert_ne!(derive_seed(1, tag::TRAIN), derive_seed(2, tag::TRAIN));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let labels: Vec<FaultLabel> = (0..300).map(|i| label(1 + (i % 3) as u8)).collect();
        let (a, b) = stratified_split(&labels, 0.3, 1, 5).unwrap();
        assert_eq!(a.len() + b.len(), 300);
        assert!(a.iter().all(|i| !b.contains(i)));
        for code in 1..=3u8 {
            assert_eq!(b.iter().filter(|&&i| labels[i] == label(code)).count(), 30);
        }
        assert_eq!(stratified_split(&labels, 0.3, 1, 5).unwrap(), (a.clone(), b.clone()));
        assert_ne!(stratified_split(&labels, 0.3, 1, 6).unwrap().1, b);
    }

    #[test]
    fn split_needs_room_for_holdout() {
        let labels = vec![label(1); 10];
        assert!(stratified_split(&labels, 0.3, 10, 0).is_err());
    }
}
