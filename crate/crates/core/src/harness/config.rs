//! JSON run configuration shared by every command.

use crate::data::{MaskPolicy, SyntheticCorpusConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{GroupLr, LossConfig, StepConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Loss constants; omitted fields take the standard values, and an omitted
/// `gamma` is rescaled to the model dimension.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub log_tau_init: Option<f64>,
}

impl LossSettings {
    pub fn resolve(&self, dim: usize) -> LossConfig {
        let base = LossConfig::for_dim(dim);
        LossConfig {
            a: self.a.unwrap_or(base.a),
            b: self.b.unwrap_or(base.b),
            alpha: self.alpha.unwrap_or(base.alpha),
            gamma: self.gamma.unwrap_or(base.gamma),
            k: self.k.unwrap_or(base.k),
            log_tau_init: self.log_tau_init.unwrap_or(base.log_tau_init),
        }
    }
}

/// Settings of the 2-D visualization head used for ellipse export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipseSettings {
    /// Items exported from the start of the test split.
    pub items: usize,
    pub dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Similarity scale for the head's contrastive loss.
    pub a: f64,
    pub alpha: f64,
    /// Entropy floor; defaults to the rescaled value for `dim`.
    pub gamma: Option<f64>,
    pub svg: bool,
}

impl Default for EllipseSettings {
    fn default() -> Self {
        Self {
            items: 64,
            dim: 2,
            steps: 300,
            batch_size: 16,
            lr: 1e-2,
            a: -1.0,
            alpha: 0.01,
            gamma: None,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsdSettings {
    /// Input score table (CSV).
    pub input: Option<PathBuf>,
    pub trials: usize,
}

impl Default for HsdSettings {
    fn default() -> Self {
        Self {
            input: None,
            trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `toy` or `full`.
    pub preset: String,
    /// Full model settings, replacing the preset when present.
    pub model: Option<ModelConfig>,
    pub loss: LossSettings,
    pub data: SyntheticCorpusConfig,
    /// Train split as JSONL instead of generating it.
    pub train_corpus: Option<PathBuf>,
    /// Test split as JSONL instead of generating it.
    pub test_corpus: Option<PathBuf>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: GroupLr,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub mask: MaskPolicy,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Model to evaluate or export.
    pub checkpoint: Option<PathBuf>,
    pub recall_k: Vec<usize>,
    pub ellipse: EllipseSettings,
    pub hsd: HsdSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            model: None,
            loss: LossSettings::default(),
            data: SyntheticCorpusConfig::default(),
            train_corpus: None,
            test_corpus: None,
            steps: 2000,
            batch_size: 8,
            lr: GroupLr::default(),
            warmup_steps: 100,
            weight_decay: 0.01,
            mask: MaskPolicy::default(),
            seed: 0,
            out_dir: None,
            checkpoint: None,
            recall_k: vec![1, 5, 10],
            ellipse: EllipseSettings::default(),
            hsd: HsdSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.train_corpus, &mut cfg.test_corpus, &mut cfg.checkpoint, &mut cfg.hsd.input]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = match self.model {
            Some(m) => m,
            None => ModelConfig::preset(&self.preset)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let l = self.loss.resolve(self.model_config()?.model_dim());
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model_config()?;
        self.loss_config()?;
        self.data.validate()?;
        self.mask.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let lrs = [self.lr.encoders, self.lr.fusion, self.lr.pde, self.lr.heads, self.ellipse.lr];
        if lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.model.is_none() {
            let e = &m.encoder;
            if self.data.vision_vocab > e.vision_vocab
                || self.data.text_vocab > e.text_vocab
                || self.data.vision_len > e.vision_len
                || self.data.text_len > e.text_len
            {
                return Err(Error::Config("corpus vocabularies or lengths exceed the model's".into()));
            }
        }
        if self.recall_k.is_empty() || self.recall_k.contains(&0) {
            return Err(Error::Config("recall_k must list positive cut-offs".into()));
        }
        if self.hsd.trials == 0 {
            return Err(Error::Config("hsd.trials must be positive".into()));
        }
        if self.ellipse.batch_size < 2 || self.ellipse.items == 0 || !(self.ellipse.a < 0.0) {
            return Err(Error::Config("invalid ellipse settings".into()));
        }
        Ok(())
    }

    /// Multiplier on the base learning rates: linear warmup, then linear
    /// decay towards zero at the last step.
    pub fn lr_scale(&self, step: u64) -> f64 {
        let warm = self.warmup_steps.min(self.steps.saturating_sub(1));
        if step < warm {
            (step + 1) as f64 / warm as f64
        } else {
            (self.steps - step) as f64 / (self.steps - warm) as f64
        }
    }

    pub fn step_config(&self, step: u64) -> Result<StepConfig> {
        Ok(StepConfig {
            loss: self.loss_config()?,
            lr: self.lr,
            lr_scale: self.lr_scale(step),
            weight_decay: self.weight_decay,
            mask: self.mask,
            reg_in_graph: true,
        })
    }
}
