use std::path::{Path, PathBuf};

use physres_core::eval::{DatasetConfig, EvalConfig};
use physres_core::signals::FaultLabel;
use physres_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything a command needs, as one JSON document.
///
/// Missing keys take their defaults and unknown keys are rejected. The
/// resolved document (file plus flag overrides) is echoed into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream in a run derives from it. Default 42.
    pub seed: u64,
    /// Synthetic recordings and windowing. Defaults: classes 1-5, loads
    /// 0.5 and 1.0, 20 s at 5 kHz, windows of 1000 samples without overlap.
    pub dataset: DatasetConfig,
    /// Priors, reservoir knobs, ranking and readout training.
    pub model: ModelConfig,
    /// Evaluation protocols. Default held-out class for `evaluate` is 5.
    pub eval: EvalConfig,
    /// Class left out of the training data by `train`. Default none.
    pub held_out: Option<u8>,
    /// Directory with a recording manifest written by `synth`. When absent,
    /// recordings are synthesized in memory from `dataset` and `seed`.
    pub data_dir: Option<PathBuf>,
    /// Where outputs go. Default `out`.
    pub out_dir: PathBuf,
    /// Threads for window-level prediction and ranking. Default 1.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            held_out: None,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub held_out: Option<u8>,
    pub no_shap: bool,
    pub mc_samples: Option<usize>,
    pub workers: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, UsageError> {
        serde_json::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(h) = o.held_out {
            self.held_out = Some(h);
            self.eval.held_out = Some(h);
        }
        if o.no_shap {
            self.model.shap = false;
        }
        if let Some(m) = o.mc_samples {
            self.eval.mc_samples = m;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(d) = &o.data_dir {
            self.data_dir = Some(d.clone());
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |e: physres_core::Error| UsageError(format!("invalid config: {e}"));
        self.dataset.synth.validate().map_err(bad)?;
        self.dataset.labels().map_err(bad)?;
        if self.dataset.window_len < 2 || self.dataset.hop == 0 {
            return Err(UsageError("invalid config: window_len must be at least 2 and hop positive".into()));
        }
        self.model.validate().map_err(bad)?;
        self.eval.validate().map_err(bad)?;
        if let Some(h) = self.held_out {
            FaultLabel::new(h).map_err(bad)?;
        }
        if self.workers == 0 {
            return Err(UsageError("invalid config: workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
