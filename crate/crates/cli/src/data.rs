use std::path::Path;

use anyhow::{bail, Context, Result};
use physres_core::eval::{recordings_to_features, synthesize_dataset};
use physres_core::features::FeatureVector;
use physres_core::signals::{ingest_csv, write_csv, FaultLabel, RawRecording};
use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: u8,
    pub load_level: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub num_samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub config: RunConfig,
    pub recordings: Vec<ManifestEntry>,
}

/// File name for the recording of `label` at the `load_index`-th load.
pub fn recording_file(label: FaultLabel, load_index: usize, seed: u64) -> String {
    format!("rec_class{}_load{}_seed{}.csv", label.code(), load_index, seed)
}

/// Writes the configured recordings and their manifest into `dir`.
pub fn write_recordings(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let recs = synthesize_dataset(&cfg.dataset, cfg.seed).context("synthesis")?;
    let mut entries = Vec::with_capacity(recs.len());
    for rec in &recs {
        let load_index = cfg
            .dataset
            .loads
            .iter()
            .position(|&l| l == rec.load_level)
            .expect("recording load comes from the config");
        let file = recording_file(rec.label, load_index, cfg.seed);
        let path = dir.join(&file);
        write_csv(rec, &path).with_context(|| format!("cannot write {}", path.display()))?;
        entries.push(ManifestEntry {
            sha256: sha256_hex(&std::fs::read(&path)?),
            file,
            label: rec.label.code(),
            load_level: rec.load_level,
            seed: rec.seed,
            sample_rate_hz: rec.sample_rate_hz,
            num_samples: rec.num_samples(),
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.clone(),
        recordings: entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads every recording listed in `dir`'s manifest, checking file hashes.
pub fn read_recordings(dir: &Path) -> Result<Vec<RawRecording>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).with_context(|| format!("cannot read {}", mpath.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", mpath.display()))?;
    let mut recs = Vec::with_capacity(manifest.recordings.len());
    for e in &manifest.recordings {
        let path = dir.join(&e.file);
        let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let digest = sha256_hex(&bytes);
        if digest != e.sha256 {
            bail!(crate::DataError(format!("{} does not match its manifest hash", path.display())));
        }
        let label = FaultLabel::new(e.label)?;
        let mut rec = ingest_csv(&path, label, e.sample_rate_hz).with_context(|| format!("ingesting {}", path.display()))?;
        rec.load_level = e.load_level;
        rec.seed = e.seed;
        recs.push(rec);
    }
    Ok(recs)
}

/// Feature rows for a run: from the manifest directory when configured,
/// otherwise synthesized in memory.
pub fn load_rows(cfg: &RunConfig) -> Result<Vec<FeatureVector>> {
    let recs = match &cfg.data_dir {
        Some(dir) => read_recordings(dir)?,
        None => synthesize_dataset(&cfg.dataset, cfg.seed).context("synthesis")?,
    };
    let rows = recordings_to_features(&recs, cfg.dataset.window_len, cfg.dataset.hop).context("features")?;
    log::info!("{} feature rows from {} recordings", rows.len(), recs.len());
    Ok(rows)
}
