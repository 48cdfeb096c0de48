//! Run configuration: one JSON document, validated up front.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterDims;
use crate::error::{Error, Result};
use crate::hetgraph::SyntheticSpec;
use crate::objective::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory in the on-disk graph format.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Optional pre-trained encoder file; when set, `d` and the pretraining
    /// settings are ignored.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 32, pretrain_epochs: 0, seed: 0, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Adapted width; defaults to the encoder width.
    pub d_out: Option<usize>,
    pub t: usize,
    pub t_het: usize,
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { d_out: None, t: 4, t_het: 4, k: 20, alpha: 1.0, beta: 1.0 }
    }
}

impl AdapterConfig {
    pub fn dims(&self, d: usize, num_classes: usize) -> AdapterDims {
        AdapterDims { d, d_out: self.d_out.unwrap_or(d), t: self.t, t_het: self.t_het, num_classes }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    #[default]
    Hinge,
    /// InfoNCE alignment in place of the hinge (ablation only).
    Infonce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
    /// Nodes per epoch in the reconstruction loss; all target nodes if unset.
    pub rec_sample: Option<usize>,
    /// Set to false to drop the contrastive term from the objective.
    pub use_contrastive: bool,
    pub margin_variant: MarginVariant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tau: 0.5,
            gamma: 1.0,
            eta: 1.0,
            mu: 0.01,
            rec_sample: None,
            use_contrastive: true,
            margin_variant: MarginVariant::Hinge,
        }
    }
}

impl ObjectiveConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, tau: self.tau, gamma: self.gamma, eta: self.eta, mu: self.mu }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Re-select the kNN neighbor sets every this many epochs.
    pub structure_refresh: usize,
    /// Record real per-epoch wall time in the history (breaks byte-identical
    /// reruns); zero is written otherwise.
    pub record_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { lr: 0.01, epochs: 200, seed: 0, structure_refresh: 1, record_wall_time: false }
    }
}

/// Everything the tuning loop needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub adapter: AdapterConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.objective.weights().validate()?;
        let a = &self.adapter;
        if !(a.alpha.is_finite() && a.alpha >= 0.0 && a.beta.is_finite() && a.beta >= 0.0) {
            return bad("alpha and beta must be finite and >= 0");
        }
        if a.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.trainer.lr.is_finite() && self.trainer.lr >= 0.0) {
            return bad("lr must be finite and >= 0");
        }
        if self.trainer.structure_refresh == 0 {
            return bad("structure_refresh must be >= 1");
        }
        if self.objective.rec_sample == Some(0) {
            return bad("rec_sample must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_owned()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        // relative dataset paths are resolved against the config file
        if let DatasetSource::Path(p) = &mut cfg.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig { adapter: self.adapter.clone(), objective: self.objective.clone(), trainer: self.trainer.clone() }
    }

    /// Overrides both the encoder and the trainer seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.encoder.seed = seed;
        self.trainer.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        if self.encoder.d == 0 {
            return Err(Error::Config("encoder d must be >= 1".into()));
        }
        self.tune_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"dataset": {"synthetic": {"seed": 3}}}"#, Path::new("x.json")).unwrap();
        match &cfg.dataset {
            DatasetSource::Synthetic(s) => assert_eq!(s.seed, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.trainer, TrainerConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        let err = RunConfig::from_json(r#"{"trainer": {"epoch": 3}}"#, Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("c.json"), "{err}");
        let err = RunConfig::from_json("{\n  \"trainer\": {,}\n}", Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.objective.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        cfg.dataset = DatasetSource::Path("data/acm".into());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("-")).unwrap(), cfg);
    }
}
