use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use physres_core::eval::{
    baseline_bnn_compare, generate_dataset, readout_ablation, shift_sweep, unseen_fault_protocol, EvalReport,
};
use physres_core::explain::rank_channels;
use physres_core::features::{empirical_density, extract_features, feature_names, Density, FeatureVector};
use physres_core::model::{derive_seed, tag};
use physres_core::readout::{PredictiveResult, WeightDistribution};
use physres_core::signals::{ingest_csv, segment, FaultLabel};
use physres_core::FaultModel;
use serde::Serialize;

use crate::artifact::{ArtifactBody, ModelArtifact};
use crate::config::RunConfig;
use crate::data::{load_rows, write_recordings};

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    result: T,
}

fn write_json<T: Serialize>(path: &Path, command: &str, cfg: &RunConfig, result: T) -> Result<()> {
    let env = Envelope {
        command,
        seed: cfg.seed,
        config: cfg,
        result,
    };
    std::fs::write(path, serde_json::to_string_pretty(&env)?).with_context(|| format!("cannot write {}", path.display()))
}

fn write_csv_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    x.to_string()
}

fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn out_path(cfg: &RunConfig, stem: &str, ext: &str) -> PathBuf {
    cfg.out_dir.join(format!("{stem}_{}.{ext}", cfg.seed))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("cannot create {}", cfg.out_dir.display()))
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let manifest = write_recordings(cfg, &cfg.out_dir)?;
    let mut files: Vec<PathBuf> = manifest.recordings.iter().map(|e| cfg.out_dir.join(&e.file)).collect();
    files.push(cfg.out_dir.join(crate::data::MANIFEST_FILE));
    Ok(files)
}

#[derive(Serialize)]
struct DensityEntry {
    class: u8,
    feature: String,
    density: Density,
}

fn class_densities(model: &FaultModel, rows: &[FeatureVector], cfg: &RunConfig) -> Result<Vec<DensityEntry>> {
    let z = model.transform_rows(rows);
    let names = feature_names();
    let mut out = Vec::new();
    for &class in &model.classes {
        let members: Vec<&Vec<f64>> = z.iter().zip(rows).filter(|(_, r)| r.label == class).map(|(v, _)| v).collect();
        for (j, name) in names.iter().enumerate() {
            let samples: Vec<f64> = members.iter().map(|v| v[j]).collect();
            out.push(DensityEntry {
                class: class.code(),
                feature: name.clone(),
                density: empirical_density(&samples, cfg.model.density, None)?,
            });
        }
    }
    Ok(out)
}

/// Fits on every available class except the configured held-out one and
/// writes the artifact, its loss trace and the per-class feature densities.
pub fn train(cfg: &RunConfig) -> Result<(ModelArtifact, Vec<PathBuf>)> {
    prepare_out(cfg)?;
    let held = cfg.held_out.map(FaultLabel::new).transpose()?;
    let rows: Vec<FeatureVector> = load_rows(cfg)?.into_iter().filter(|r| Some(r.label) != held).collect();
    let model = FaultModel::fit(&rows, &cfg.model, cfg.seed).context("train")?;
    log::info!(
        "trained {} classes, {} nodes, final loss {:?}",
        model.num_classes(),
        model.reservoir.num_nodes,
        model.loss_trace.last()
    );
    let densities = class_densities(&model, &rows, cfg).context("densities")?;
    let artifact = ModelArtifact::new(ArtifactBody {
        seed: cfg.seed,
        held_out: cfg.held_out,
        config: cfg.clone(),
        model,
    })?;

    let model_path = out_path(cfg, "model", "json");
    artifact.save(&model_path).with_context(|| format!("cannot write {}", model_path.display()))?;
    let trace_path = out_path(cfg, "loss_trace", "csv");
    write_csv_rows(
        &trace_path,
        &strings(["epoch", "loss"]),
        artifact.body.model.loss_trace.iter().enumerate().map(|(e, l)| vec![(e + 1).to_string(), num(*l)]),
    )?;
    let density_path = out_path(cfg, "densities", "json");
    write_json(&density_path, "train", cfg, &densities)?;
    Ok((artifact, vec![model_path, trace_path, density_path]))
}

pub fn load_artifact(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::load(path).with_context(|| format!("loading artifact {}", path.display()))
}

#[derive(Serialize)]
struct PredictHeader<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    model_checksum: &'a str,
    input: String,
    mc_samples: usize,
    classes: Vec<u8>,
}

#[derive(Serialize)]
struct PredictLine<'a> {
    window: usize,
    start: usize,
    predicted: u8,
    probs: &'a [f64],
    total_uncertainty: f64,
    aleatoric: f64,
    epistemic: f64,
}

/// Scores every window of an unlabeled recording; one JSON line per window
/// after a header line.
pub fn predict(cfg: &RunConfig, artifact: &ModelArtifact, input: &Path) -> Result<PathBuf> {
    prepare_out(cfg)?;
    let model = &artifact.body.model;
    let rec = ingest_csv(input, FaultLabel::HEALTHY, cfg.dataset.synth.sample_rate_hz)
        .with_context(|| format!("ingesting {}", input.display()))?;
    let rows = segment(&rec, cfg.dataset.window_len, cfg.dataset.hop)?
        .iter()
        .map(extract_features)
        .collect::<physres_core::Result<Vec<_>>>()
        .context("features")?;
    let preds = model
        .predict(&rows, cfg.eval.mc_samples, derive_seed(cfg.seed, tag::PREDICT))
        .context("predict")?;

    let mut out = String::new();
    out.push_str(&serde_json::to_string(&PredictHeader {
        command: "predict",
        seed: cfg.seed,
        config: cfg,
        model_checksum: &artifact.checksum,
        input: input.display().to_string(),
        mc_samples: cfg.eval.mc_samples,
        classes: model.classes.iter().map(|c| c.code()).collect(),
    })?);
    out.push('\n');
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&serde_json::to_string(&PredictLine {
            window: i,
            start: i * cfg.dataset.hop,
            predicted: model.classes[p.argmax()].code(),
            probs: &p.probs,
            total_uncertainty: p.total_uncertainty,
            aleatoric: p.aleatoric,
            epistemic: p.epistemic,
        })?);
        out.push('\n');
    }
    let path = out_path(cfg, "predict", "jsonl");
    std::fs::write(&path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Ranks channels on validation windows. Without a data directory these are
/// freshly synthesized from a stream independent of the training data.
pub fn explain(cfg: &RunConfig, artifact: &ModelArtifact) -> Result<Vec<PathBuf>> {
    prepare_out(cfg)?;
    let model = &artifact.body.model;
    let rows = match cfg.data_dir {
        Some(_) => load_rows(cfg)?,
        None => generate_dataset(&cfg.dataset, derive_seed(cfg.seed, tag::DATA)).context("synthesis")?,
    };
    let rows: Vec<FeatureVector> = rows.into_iter().filter(|r| model.classes.contains(&r.label)).collect();
    let ranking = rank_channels(
        model,
        &rows,
        cfg.model.shap_mc_samples,
        derive_seed(cfg.seed, tag::SHAP_MC),
    )
    .context("explain")?;

    let mut header = vec!["channel".to_string()];
    header.extend(ranking.classes.iter().map(|c| format!("phi_{}", c.name())));
    header.push("aggregate".into());
    header.push("rank".into());
    let rows_out = ranking.channels.iter().enumerate().map(|(g, ch)| {
        let mut r = vec![ch.name().to_string()];
        r.extend(ranking.per_class.iter().map(|rep| num(rep.values[g])));
        r.push(num(ranking.aggregate.values[g]));
        r.push((ranking.aggregate.rank_of(g) + 1).to_string());
        r
    });
    let csv_path = out_path(cfg, "explain", "csv");
    write_csv_rows(&csv_path, &header, rows_out)?;
    let json_path = out_path(cfg, "explain", "json");
    write_json(&json_path, "explain", cfg, &ranking)?;
    Ok(vec![csv_path, json_path])
}

fn confusion_rows(report: &EvalReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["true".to_string()];
    header.extend(report.classes.iter().map(|c| format!("pred_{}", c.name())));
    let rows = report
        .classes
        .iter()
        .zip(&report.confusion)
        .map(|(c, row)| {
            let mut r = vec![c.name().to_string()];
            r.extend(row.iter().map(usize::to_string));
            r
        })
        .collect();
    (header, rows)
}

fn posterior_rows(init: &WeightDistribution, trained: &WeightDistribution, classes: &[FaultLabel]) -> Vec<Vec<String>> {
    let (k, cols) = trained.mu.shape();
    let mut out = Vec::with_capacity(k * cols);
    for r in 0..k {
        for c in 0..cols {
            let input = if c + 1 == cols { "bias".to_string() } else { format!("node{c}") };
            out.push(vec![
                classes[r].name().to_string(),
                input,
                num(init.mu.get(r, c)),
                num(init.sigma.get(r, c)),
                num(trained.mu.get(r, c)),
                num(trained.sigma.get(r, c)),
            ]);
        }
    }
    out
}

fn prediction_row(label: FaultLabel, seen: bool, predicted: FaultLabel, p: &PredictiveResult) -> Vec<String> {
    let mut r = vec![
        label.code().to_string(),
        seen.to_string(),
        predicted.code().to_string(),
    ];
    r.extend(p.probs.iter().map(|&x| num(x)));
    r.push(num(p.total_uncertainty));
    r.push(num(p.aleatoric));
    r.push(num(p.epistemic));
    r
}

#[derive(Serialize)]
struct Timing {
    seed: u64,
    unseen_fault_fit_s: Option<f64>,
    readout_ablation_fit_s: f64,
    proposed_fit_s: f64,
    baseline_fit_s: f64,
}

/// Unseen-fault protocol (when a held-out class is configured), readout
/// ablation and the dense-baseline comparison.
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    prepare_out(cfg)?;
    let rows = load_rows(cfg)?;
    let mut files = Vec::new();

    let unseen = match cfg.eval.held_out {
        Some(h) => {
            let (outcome, model) = unseen_fault_protocol(&rows, FaultLabel::new(h)?, &cfg.model, &cfg.eval, cfg.seed)
                .context("unseen-fault protocol")?;
            let mut header = strings(["label", "seen", "predicted"]);
            header.extend(model.classes.iter().map(|c| format!("p_{}", c.name())));
            header.extend(strings(["total_uncertainty", "aleatoric", "epistemic"]));
            let path = out_path(cfg, "unseen_fault", "csv");
            write_csv_rows(
                &path,
                &header,
                outcome
                    .predictions
                    .iter()
                    .map(|s| prediction_row(s.label, s.seen, s.predicted, &s.result)),
            )?;
            files.push(path);
            let path = out_path(cfg, "unseen_fault", "json");
            write_json(&path, "evaluate", cfg, &outcome)?;
            files.push(path);
            Some(outcome)
        }
        None => None,
    };

    let (ablation, ab_model) =
        readout_ablation(&rows, &cfg.model, &cfg.eval, cfg.seed).context("readout ablation")?;
    let path = out_path(cfg, "readout_ablation", "csv");
    write_csv_rows(
        &path,
        &strings(["readout", "accuracy", "total_uncertainty", "aleatoric", "epistemic", "mean_sigma"]),
        [("prior_initialized", &ablation.untrained, ablation.initial_mean_sigma), ("trained", &ablation.trained, ablation.trained_mean_sigma)]
            .into_iter()
            .map(|(name, rep, sigma)| {
                let u = &rep.overall_uncertainty;
                vec![name.to_string(), num(rep.accuracy), num(u.total), num(u.aleatoric), num(u.epistemic), num(sigma)]
            }),
    )?;
    files.push(path);
    let path = out_path(cfg, "readout_ablation", "json");
    write_json(&path, "evaluate", cfg, &ablation)?;
    files.push(path);
    let path = out_path(cfg, "posterior", "csv");
    write_csv_rows(
        &path,
        &strings(["class", "input", "init_mu", "init_sigma", "mu", "sigma"]),
        posterior_rows(&ab_model.initial_posterior()?, &ab_model.posterior, &ab_model.classes),
    )?;
    files.push(path);

    let report = unseen.as_ref().map_or(&ablation.trained, |u| &u.seen);
    let (header, rows_out) = confusion_rows(report);
    let path = out_path(cfg, "confusion", "csv");
    write_csv_rows(&path, &header, rows_out)?;
    files.push(path);

    let cmp = baseline_bnn_compare(&rows, &cfg.model, &cfg.eval, cfg.seed).context("baseline comparison")?;
    let path = out_path(cfg, "baseline_compare", "csv");
    write_csv_rows(
        &path,
        &strings(["arm", "trainable_parameters", "accuracy", "mean_total_uncertainty", "epochs"]),
        [("reservoir_bbb", &cmp.proposed), ("dense_bnn", &cmp.baseline)].into_iter().map(|(name, a)| {
            vec![
                name.to_string(),
                a.trainable_parameters.to_string(),
                num(a.accuracy),
                num(a.mean_total_uncertainty),
                cmp.epochs.to_string(),
            ]
        }),
    )?;
    files.push(path);
    let path = out_path(cfg, "baseline_compare", "json");
    write_json(&path, "evaluate", cfg, &cmp)?;
    files.push(path);

    // Wall-clock numbers live apart from the reproducible outputs.
    let path = out_path(cfg, "timing", "json");
    let timing = Timing {
        seed: cfg.seed,
        unseen_fault_fit_s: unseen.as_ref().map(|u| u.seen.wall_time_s),
        readout_ablation_fit_s: ablation.trained.wall_time_s,
        proposed_fit_s: cmp.proposed.wall_time_s,
        baseline_fit_s: cmp.baseline.wall_time_s,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&timing)?)?;
    files.push(path);
    Ok(files)
}

pub fn shift_sweep_cmd(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    prepare_out(cfg)?;
    let rows = load_rows(cfg)?;
    let (outcome, _) = shift_sweep(&rows, &cfg.model, &cfg.eval, cfg.seed).context("shift sweep")?;
    let csv_path = out_path(cfg, "shift_sweep", "csv");
    write_csv_rows(
        &csv_path,
        &strings(["level", "accuracy", "total_uncertainty", "aleatoric", "epistemic"]),
        outcome.points.iter().map(|p| {
            vec![
                num(p.level),
                num(p.accuracy),
                num(p.uncertainty.total),
                num(p.uncertainty.aleatoric),
                num(p.uncertainty.epistemic),
            ]
        }),
    )?;
    let json_path = out_path(cfg, "shift_sweep", "json");
    write_json(&json_path, "shift-sweep", cfg, &outcome)?;
    Ok(vec![csv_path, json_path])
}
