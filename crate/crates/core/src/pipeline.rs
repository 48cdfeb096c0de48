//! End-to-end wiring: dataset, frozen encoder, tuning and evaluation.

use log::info;

use crate::config::{DatasetSource, RunConfig};
use crate::encoder::{encode, init_encoder, pretrain, EncoderParams, FrozenReps};
use crate::error::Result;
use crate::hetgraph::{generate_synthetic, load_graph, HetGraph, SyntheticSpec};

pub fn load_dataset(cfg: &RunConfig) -> Result<HetGraph> {
    match &cfg.dataset {
        DatasetSource::Path(p) => load_graph(p),
        DatasetSource::Synthetic(spec) => generate_synthetic(spec),
    }
}

/// Loads the configured encoder checkpoint, or initialises and pretrains one.
pub fn prepare_encoder(graph: &HetGraph, cfg: &RunConfig) -> Result<EncoderParams> {
    let enc = &cfg.encoder;
    if let Some(path) = &enc.checkpoint {
        let params = EncoderParams::load(path)?;
        return Ok(if params.is_frozen() { params } else { params.freeze() });
    }
    let params = init_encoder(graph, enc.d, enc.seed)?;
    let (params, losses) = pretrain(graph, params, enc.pretrain_epochs, enc.seed)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("encoder pretraining: loss {first:.4} -> {last:.4}");
    }
    Ok(params)
}

pub fn frozen_reps(graph: &HetGraph, cfg: &RunConfig) -> Result<(EncoderParams, FrozenReps)> {
    let params = prepare_encoder(graph, cfg)?;
    let reps = encode(graph, &params)?;
    Ok((params, reps))
}

/// The small instance used for gradient verification: 12 target nodes,
/// two classes, `d = d' = 8`, ranks 2.
pub fn tiny_reference_config() -> RunConfig {
    let mut cfg = RunConfig {
        dataset: DatasetSource::Synthetic(SyntheticSpec {
            n_target: 12,
            num_classes: 2,
            feature_dim: 6,
            n_aux: 4,
            het_degree: 2,
            p_in: 0.5,
            p_out: 0.1,
            train_per_class: 3,
            ..Default::default()
        }),
        ..Default::default()
    };
    cfg.encoder.d = 8;
    cfg.encoder.pretrain_epochs = 20;
    cfg.adapter.t = 2;
    cfg.adapter.t_het = 2;
    cfg.adapter.k = 3;
    cfg.objective.lambda = 0.5;
    cfg.objective.eta = 0.1;
    cfg.objective.mu = 0.2;
    cfg
}
