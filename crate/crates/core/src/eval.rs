//! Evaluation protocols on synthetic or ingested feature datasets.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{train_dense_bnn, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::features::{extract_features, fit_global_stats, FeatureVector, GlobalStats};
use crate::matrix::Matrix;
use crate::model::{derive_seed, distinct_labels, stratified_split, tag, FaultModel, ModelConfig};
use crate::readout::PredictiveResult;
use crate::signals::{segment, synthesize_recording, FaultLabel, RawRecording, SynthConfig};
use crate::stats::{mean, spearman};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub classes: Vec<u8>,
    pub loads: Vec<f64>,
    pub window_len: usize,
    pub hop: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            classes: vec![1, 2, 3, 4, 5],
            loads: vec![0.5, 1.0],
            window_len: 1000,
            hop: 1000,
        }
    }
}

impl DatasetConfig {
    pub fn labels(&self) -> Result<Vec<FaultLabel>> {
        self.classes.iter().map(|&c| FaultLabel::new(c)).collect()
    }
}

/// Seed of the recording for `(label, load index)` under `master`.
pub fn recording_seed(master: u64, label: FaultLabel, load_index: usize) -> u64 {
    derive_seed(derive_seed(master, tag::DATA), (label.code() as u64) << 16 | load_index as u64)
}

/// One recording per (class, load), in class-major order.
pub fn synthesize_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<RawRecording>> {
    let jobs: Vec<(FaultLabel, usize, f64)> = cfg
        .labels()?
        .into_iter()
        .flat_map(|l| cfg.loads.iter().enumerate().map(move |(i, &load)| (l, i, load)))
        .collect();
    jobs.par_iter()
        .map(|&(label, i, load)| synthesize_recording(label, load, &cfg.synth, recording_seed(seed, label, i)))
        .collect()
}

pub fn recordings_to_features(recs: &[RawRecording], window_len: usize, hop: usize) -> Result<Vec<FeatureVector>> {
    let windows = recs
        .iter()
        .map(|r| segment(r, window_len, hop))
        .collect::<Result<Vec<_>>>()?
        .concat();
    windows.par_iter().map(extract_features).collect()
}

pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<FeatureVector>> {
    recordings_to_features(&synthesize_dataset(cfg, seed)?, cfg.window_len, cfg.hop)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub mc_samples: usize,
    /// Class withheld from training in the unseen-fault and ablation runs.
    pub held_out: Option<u8>,
    pub shift_levels: Vec<f64>,
    /// Mean offset per level, in training standard deviations.
    pub shift_offset: f64,
    /// Spread inflation per level.
    pub shift_gamma: f64,
    pub baseline_hidden: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            mc_samples: 100,
            held_out: Some(5),
            shift_levels: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            shift_offset: 0.5,
            shift_gamma: 0.3,
            baseline_hidden: DEFAULT_HIDDEN,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be positive"));
        }
        if let Some(c) = self.held_out {
            FaultLabel::new(c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub count: usize,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

pub fn summarize<'a>(preds: impl IntoIterator<Item = &'a PredictiveResult>) -> UncertaintySummary {
    let (mut n, mut t, mut a, mut e) = (0usize, 0.0, 0.0, 0.0);
    for p in preds {
        n += 1;
        t += p.total_uncertainty;
        a += p.aleatoric;
        e += p.epistemic;
    }
    let d = n.max(1) as f64;
    UncertaintySummary {
        count: n,
        total: t / d,
        aleatoric: a / d,
        epistemic: e / d,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<FaultLabel>,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Rows: true class, columns: predicted class.
    pub confusion: Vec<Vec<usize>>,
    pub class_counts: Vec<usize>,
    pub uncertainty: Vec<UncertaintySummary>,
    pub overall_uncertainty: UncertaintySummary,
    pub trainable_parameters: usize,
    /// Not serialized, so that reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

pub fn build_report(
    classes: &[FaultLabel],
    truth: &[usize],
    preds: &[PredictiveResult],
    trainable_parameters: usize,
) -> EvalReport {
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&y, p) in truth.iter().zip(preds) {
        confusion[y][p.argmax()] += 1;
    }
    let class_counts: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let per_class_accuracy = (0..k)
        .map(|c| {
            if class_counts[c] == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / class_counts[c] as f64
            }
        })
        .collect();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let uncertainty = (0..k)
        .map(|c| summarize(truth.iter().zip(preds).filter(|(&y, _)| y == c).map(|(_, p)| p)))
        .collect();
    EvalReport {
        classes: classes.to_vec(),
        accuracy: correct as f64 / truth.len().max(1) as f64,
        per_class_accuracy,
        confusion,
        class_counts,
        uncertainty,
        overall_uncertainty: summarize(preds),
        trainable_parameters,
        wall_time_s: 0.0,
    }
}

fn select(rows: &[FeatureVector], idx: &[usize]) -> Vec<FeatureVector> {
    idx.iter().map(|&i| rows[i].clone()).collect()
}

/// Stratified train/test split of `rows`.
pub fn split_rows(rows: &[FeatureVector], test_fraction: f64, seed: u64) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    let labels: Vec<FaultLabel> = rows.iter().map(|r| r.label).collect();
    let (train, test) = stratified_split(&labels, test_fraction, 1, derive_seed(seed, tag::SPLIT))?;
    Ok((select(rows, &train), select(rows, &test)))
}

fn fit_timed(train: &[FeatureVector], cfg: &ModelConfig, seed: u64) -> Result<(FaultModel, f64)> {
    let start = Instant::now();
    let model = FaultModel::fit(train, cfg, seed)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

fn predict_seed(seed: u64, part: u64) -> u64 {
    derive_seed(derive_seed(seed, tag::PREDICT), part)
}

fn exclude(rows: &[FeatureVector], held_out: Option<FaultLabel>) -> Vec<FeatureVector> {
    rows.iter().filter(|r| Some(r.label) != held_out).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub label: FaultLabel,
    pub seen: bool,
    pub predicted: FaultLabel,
    pub result: PredictiveResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenFaultOutcome {
    pub held_out: FaultLabel,
    pub seen: EvalReport,
    pub held_out_uncertainty: UncertaintySummary,
    /// How the held-out samples were assigned to the seen classes.
    pub held_out_assignments: Vec<usize>,
    pub epistemic_ratio: f64,
    pub initial_mean_sigma: f64,
    pub trained_mean_sigma: f64,
    pub predictions: Vec<SamplePrediction>,
}

/// Trains without `held_out`, then scores a seen-class test split and every
/// held-out sample.
pub fn unseen_fault_protocol(
    rows: &[FeatureVector],
    held_out: FaultLabel,
    mcfg: &ModelConfig,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<(UnseenFaultOutcome, FaultModel)> {
    ecfg.validate()?;
    let unseen: Vec<FeatureVector> = rows.iter().filter(|r| r.label == held_out).cloned().collect();
    if unseen.is_empty() {
        return Err(Error::invalid(format!("held-out class {} not in dataset", held_out.code())));
    }
    let seen = exclude(rows, Some(held_out));
    if distinct_labels(&seen).len() < 2 {
        return Err(Error::invalid("fewer than 2 classes remain after holding one out"));
    }
    let (train, test) = split_rows(&seen, ecfg.test_fraction, seed)?;
    let (model, secs) = fit_timed(&train, mcfg, seed)?;
    let seen_preds = model.predict(&test, ecfg.mc_samples, predict_seed(seed, 0))?;
    let unseen_preds = model.predict(&unseen, ecfg.mc_samples, predict_seed(seed, 1))?;
    let truth = model.class_indices(&test)?;
    let mut report = build_report(&model.classes, &truth, &seen_preds, model.trainable_parameters());
    report.wall_time_s = secs;

    let mut assignments = vec![0usize; model.num_classes()];
    for p in &unseen_preds {
        assignments[p.argmax()] += 1;
    }
    let held = summarize(&unseen_preds);
    let ratio = held.epistemic / report.overall_uncertainty.epistemic;
    let predictions = test
        .iter()
        .zip(&seen_preds)
        .map(|(r, p)| (r, p, true))
        .chain(unseen.iter().zip(&unseen_preds).map(|(r, p)| (r, p, false)))
        .map(|(r, p, seen)| SamplePrediction {
            label: r.label,
            seen,
            predicted: model.classes[p.argmax()],
            result: p.clone(),
        })
        .collect();
    let outcome = UnseenFaultOutcome {
        held_out,
        seen: report,
        held_out_uncertainty: held,
        held_out_assignments: assignments,
        epistemic_ratio: ratio,
        initial_mean_sigma: model.initial_posterior()?.sigma.mean(),
        trained_mean_sigma: model.mean_sigma(),
        predictions,
    };
    Ok((outcome, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub untrained: EvalReport,
    pub trained: EvalReport,
    pub accuracy_gain: f64,
    pub initial_mean_sigma: f64,
    pub trained_mean_sigma: f64,
}

/// Same reservoir and priors, scored with the prior-initialized readout and
/// with the trained one.
pub fn readout_ablation(
    rows: &[FeatureVector],
    mcfg: &ModelConfig,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<(AblationOutcome, FaultModel)> {
    ecfg.validate()?;
    let held = ecfg.held_out.map(FaultLabel::new).transpose()?;
    let data = exclude(rows, held);
    let (train, test) = split_rows(&data, ecfg.test_fraction, seed)?;
    let (model, secs) = fit_timed(&train, mcfg, seed)?;
    let z = model.transform_rows(&test);
    let truth = model.class_indices(&test)?;
    let q0 = model.initial_posterior()?;
    let pseed = predict_seed(seed, 0);
    let before = model.predict_with(&q0, &z, ecfg.mc_samples, pseed)?;
    let after = model.predict_transformed(&z, ecfg.mc_samples, pseed)?;
    let untrained = build_report(&model.classes, &truth, &before, model.trainable_parameters());
    let mut trained = build_report(&model.classes, &truth, &after, model.trainable_parameters());
    trained.wall_time_s = secs;
    let outcome = AblationOutcome {
        accuracy_gain: trained.accuracy - untrained.accuracy,
        untrained,
        trained,
        initial_mean_sigma: q0.sigma.mean(),
        trained_mean_sigma: model.mean_sigma(),
    };
    Ok((outcome, model))
}

/// `x' = x + level * offset * std + (x - mean) * gamma * level`, using the
/// training statistics. Level 0 returns the rows unchanged.
pub fn shift_rows(rows: &[FeatureVector], stats: &GlobalStats, level: f64, offset: f64, gamma: f64) -> Result<Vec<FeatureVector>> {
    if !(level >= 0.0) {
        return Err(Error::invalid(format!("shift level must be nonnegative, got {level}")));
    }
    if level == 0.0 {
        return Ok(rows.to_vec());
    }
    Ok(rows
        .iter()
        .map(|r| FeatureVector {
            values: r
                .values
                .iter()
                .enumerate()
                .map(|(j, &x)| x + level * offset * stats.std[j] + (x - stats.mean[j]) * gamma * level)
                .collect(),
            label: r.label,
            load_level: r.load_level,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub level: f64,
    pub accuracy: f64,
    pub uncertainty: UncertaintySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSweepOutcome {
    pub points: Vec<ShiftPoint>,
    /// Spearman correlation of level against mean total uncertainty.
    pub uncertainty_spearman: f64,
}

impl ShiftSweepOutcome {
    pub fn at(&self, level: f64) -> Option<&ShiftPoint> {
        self.points.iter().find(|p| p.level == level)
    }
}

/// One model on all classes; the test split is shifted per level.
pub fn shift_sweep(
    rows: &[FeatureVector],
    mcfg: &ModelConfig,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<(ShiftSweepOutcome, FaultModel)> {
    ecfg.validate()?;
    let levels = &ecfg.shift_levels;
    if !levels.contains(&0.0) {
        return Err(Error::invalid("shift levels must include 0"));
    }
    if let Some(l) = levels.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("shift level must be nonnegative, got {l}")));
    }
    let (train, test) = split_rows(rows, ecfg.test_fraction, seed)?;
    let (model, _) = fit_timed(&train, mcfg, seed)?;
    let truth = model.class_indices(&test)?;
    let points = levels
        .iter()
        .map(|&level| -> Result<ShiftPoint> {
            let shifted = shift_rows(&test, &model.global_stats, level, ecfg.shift_offset, ecfg.shift_gamma)?;
            let preds = model.predict(&shifted, ecfg.mc_samples, predict_seed(seed, 0))?;
            let correct = preds.iter().zip(&truth).filter(|(p, &y)| p.argmax() == y).count();
            Ok(ShiftPoint {
                level,
                accuracy: correct as f64 / truth.len() as f64,
                uncertainty: summarize(&preds),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.level).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.uncertainty.total).collect();
    let outcome = ShiftSweepOutcome {
        uncertainty_spearman: spearman(&xs, &ys),
        points,
    };
    Ok((outcome, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub trainable_parameters: usize,
    pub accuracy: f64,
    pub mean_total_uncertainty: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub proposed: ArmSummary,
    pub baseline: ArmSummary,
    pub parameter_ratio: f64,
    pub epochs: usize,
}

fn standardized_matrix(stats: &GlobalStats, rows: &[FeatureVector]) -> Matrix {
    let z: Vec<Vec<f64>> = rows.iter().map(|r| stats.standardize_values(&r.values)).collect();
    Matrix::from_rows(&z).unwrap_or_else(|| Matrix::zeros(0, stats.num_features()))
}

/// Reservoir model against a dense fully-variational network trained with
/// the same epochs, batch size, learning rate and noise draws per step.
pub fn baseline_bnn_compare(
    rows: &[FeatureVector],
    mcfg: &ModelConfig,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<BaselineComparison> {
    ecfg.validate()?;
    let (train, test) = split_rows(rows, ecfg.test_fraction, seed)?;
    let (model, model_secs) = fit_timed(&train, mcfg, seed)?;
    let preds = model.predict(&test, ecfg.mc_samples, predict_seed(seed, 0))?;
    let truth = model.class_indices(&test)?;
    let report = build_report(&model.classes, &truth, &preds, model.trainable_parameters());

    let start = Instant::now();
    let stats = fit_global_stats(&train)?;
    let x_train = standardized_matrix(&stats, &train);
    let y_train = model.class_indices(&train)?;
    let tcfg = crate::readout::TrainConfig {
        seed: derive_seed(seed, tag::BASELINE),
        ..mcfg.train.clone()
    };
    let (net, _) = train_dense_bnn(&x_train, &y_train, model.num_classes(), ecfg.baseline_hidden, &tcfg)?;
    let base_secs = start.elapsed().as_secs_f64();
    let base_preds = net.predict_batch(&standardized_matrix(&stats, &test), ecfg.mc_samples, predict_seed(seed, 1))?;
    let base_report = build_report(&model.classes, &truth, &base_preds, net.num_parameters());

    let proposed = ArmSummary {
        trainable_parameters: model.trainable_parameters(),
        accuracy: report.accuracy,
        mean_total_uncertainty: report.overall_uncertainty.total,
        wall_time_s: model_secs,
    };
    let baseline = ArmSummary {
        trainable_parameters: net.num_parameters(),
        accuracy: base_report.accuracy,
        mean_total_uncertainty: base_report.overall_uncertainty.total,
        wall_time_s: base_secs,
    };
    Ok(BaselineComparison {
        parameter_ratio: proposed.trainable_parameters as f64 / baseline.trainable_parameters as f64,
        epochs: tcfg.epochs,
        proposed,
        baseline,
    })
}

/// Mean of a field over predictions, for quick summaries.
pub fn mean_of(preds: &[PredictiveResult], f: impl Fn(&PredictiveResult) -> f64) -> f64 {
    mean(&preds.iter().map(f).collect::<Vec<_>>())
}
