//! Frozen two-branch encoder.
//!
//! Stands in for a pre-trained heterogeneous GNN: a one-layer ReLU MLP per
//! branch followed by one round of mean aggregation. The homogeneous branch
//! aggregates over the pre-given target-target structure (with self-loops),
//! the heterogeneous branch mean-pools each target-incident edge type
//! separately and then averages the present types.

use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::hetgraph::HetGraph;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tape::{Mat, Tape};

const PRETRAIN_LR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    d: usize,
    seed: u64,
    frozen: bool,
    w_hom: Mat,
    /// One mapping per node type, in graph node-type order.
    w_het: Vec<Mat>,
}

/// Encoder outputs for the target nodes. Immutable during tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenReps {
    /// Target representations before homogeneous message passing.
    pub htil: Mat,
    /// After mean aggregation over the homogeneous structure.
    pub etil: Mat,
    /// Per relation: mean of mapped neighbor representations (zero row if none).
    pub hhat_typed: Vec<Mat>,
    /// Heterogeneous-branch output: mean of the present `hhat_typed` rows.
    pub ehat: Mat,
    /// `neighbor_mask[r][i]`: node `i` has at least one neighbor in relation `r`.
    pub neighbor_mask: Vec<Vec<bool>>,
    pub relation_names: Vec<String>,
}

impl FrozenReps {
    pub fn n(&self) -> usize {
        self.htil.nrows()
    }

    pub fn d(&self) -> usize {
        self.htil.ncols()
    }

    pub fn num_relations(&self) -> usize {
        self.hhat_typed.len()
    }

    /// Row-major `n x R` mask, the layout `masked_softmax` expects.
    pub fn flat_mask(&self) -> Rc<[bool]> {
        let n = self.n();
        let r = self.num_relations();
        (0..n * r).map(|k| self.neighbor_mask[k % r][k / r]).collect()
    }
}

fn gaussian_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let normal = Normal::new(0.0, 1.0 / (rows.max(1) as f64).sqrt()).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn relu_map(x: &Mat, w: &Mat) -> Mat {
    x.dot(w).mapv(|v| v.max(0.0))
}

/// Random encoder weights, zero-mean with standard deviation `1/sqrt(f)`.
pub fn init_encoder(graph: &HetGraph, d: usize, seed: u64) -> Result<EncoderParams> {
    if d == 0 {
        return Err(Error::Config("encoder dimension d must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_hom = gaussian_init(&mut rng, graph.target_features().ncols(), d);
    let w_het = graph.all_features().iter().map(|x| gaussian_init(&mut rng, x.ncols(), d)).collect();
    Ok(EncoderParams { d, seed, frozen: false, w_hom, w_het })
}

/// Optional unsupervised warm-up followed by freezing.
///
/// Each branch mapping is trained with a throwaway linear decoder to
/// reconstruct its own input features (mean squared error). Returns the
/// frozen parameters and the objective value before every update.
pub fn pretrain(graph: &HetGraph, params: EncoderParams, epochs: usize, seed: u64) -> Result<(EncoderParams, Vec<f64>)> {
    if params.frozen {
        return Err(Error::AlreadyFrozen);
    }
    let mut params = params;
    let mut history = Vec::with_capacity(epochs);
    if epochs > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fe4_c0de);
        let d = params.d;
        // (input features, mapping, decoder) per branch
        let mut inputs: Vec<&Mat> = vec![graph.target_features()];
        inputs.extend(graph.all_features());
        let mut decoders: Vec<Mat> = inputs.iter().map(|x| gaussian_init(&mut rng, d, x.ncols())).collect();
        let targets: Vec<Rc<Mat>> = inputs.iter().map(|x| Rc::new((*x).clone())).collect();
        let scales: Vec<f64> = inputs.iter().map(|x| 1.0 / (x.len().max(1) as f64)).collect();

        let mut flat = flatten(&params, &decoders);
        let mut state = AdamState::new(flat.len());
        let cfg = AdamConfig::with_lr(PRETRAIN_LR);
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let mut maps = vec![tape.param(params.w_hom.clone())];
            maps.extend(params.w_het.iter().map(|w| tape.param(w.clone())));
            let decs: Vec<_> = decoders.iter().map(|w| tape.param(w.clone())).collect();
            let mut total = None;
            for b in 0..inputs.len() {
                let x = tape.constant(inputs[b].clone());
                let h = tape.matmul(x, maps[b]);
                let h = tape.relu(h);
                let rec = tape.matmul(h, decs[b]);
                let err = tape.squared_error(rec, targets[b].clone());
                let err = tape.scale(err, scales[b]);
                total = Some(match total {
                    None => err,
                    Some(t) => tape.add(t, err),
                });
            }
            let total = total.expect("at least one branch");
            let value = tape.scalar(total);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch: history.len() + 1, last_finite: history.len() });
            }
            history.push(value);
            let grads = tape.backward(total);
            let mut g = Vec::with_capacity(flat.len());
            for v in maps.iter().chain(&decs) {
                let shape = tape.value(*v).dim();
                match grads.wrt(*v) {
                    Some(m) => g.extend(m.iter()),
                    None => g.extend(std::iter::repeat_n(0.0, shape.0 * shape.1)),
                }
            }
            adam_step(&mut flat, &g, &mut state, &cfg);
            unflatten(&flat, &mut params, &mut decoders);
        }
    }
    params.frozen = true;
    Ok((params, history))
}

fn flatten(p: &EncoderParams, decoders: &[Mat]) -> Vec<f64> {
    let mut out: Vec<f64> = p.w_hom.iter().copied().collect();
    for w in p.w_het.iter().chain(decoders) {
        out.extend(w.iter());
    }
    out
}

fn unflatten(flat: &[f64], p: &mut EncoderParams, decoders: &mut [Mat]) {
    let mut off = 0;
    let mut fill = |m: &mut Mat| {
        for x in m.iter_mut() {
            *x = flat[off];
            off += 1;
        }
    };
    fill(&mut p.w_hom);
    p.w_het.iter_mut().for_each(&mut fill);
    decoders.iter_mut().for_each(&mut fill);
}

impl EncoderParams {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn w_hom(&self) -> &Mat {
        &self.w_hom
    }

    pub fn w_het(&self) -> &[Mat] {
        &self.w_het
    }

    /// Freezes without a warm-up.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Replaces the homogeneous mapping. Fails once frozen.
    pub fn set_w_hom(&mut self, w: Mat) -> Result<()> {
        if self.frozen {
            return Err(Error::AlreadyFrozen);
        }
        self.w_hom = w;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<String> = (0..self.w_het.len()).map(|k| format!("w_het_{k}")).collect();
        let mut tensors = vec![("w_hom", &self.w_hom)];
        tensors.extend(names.iter().map(String::as_str).zip(&self.w_het));
        checkpoint::encode("encoder", json!({"d": self.d, "seed": self.seed, "frozen": self.frozen}), &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut tensors) = checkpoint::decode(bytes, "encoder")?;
        let field = |k: &str| header.meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let d = field("d")?.as_u64().ok_or_else(|| Error::Checkpoint("d".into()))? as usize;
        let seed = field("seed")?.as_u64().ok_or_else(|| Error::Checkpoint("seed".into()))?;
        let frozen = field("frozen")?.as_bool().ok_or_else(|| Error::Checkpoint("frozen".into()))?;
        if tensors.is_empty() || tensors.iter().any(|t| t.ncols() != d) {
            return Err(Error::Checkpoint("tensor shapes disagree with d".into()));
        }
        let w_hom = tensors.remove(0);
        Ok(Self { d, seed, frozen, w_hom, w_het: tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Runs both branches. Requires frozen parameters.
pub fn encode(graph: &HetGraph, params: &EncoderParams) -> Result<FrozenReps> {
    if !params.frozen {
        return Err(Error::NotFrozen);
    }
    if params.w_het.len() != graph.node_types().len()
        || params.w_hom.nrows() != graph.target_features().ncols()
        || params.w_het.iter().zip(graph.all_features()).any(|(w, x)| w.nrows() != x.ncols())
    {
        return Err(Error::Config("encoder parameters do not match the graph schema".into()));
    }
    let n = graph.n_target();
    let d = params.d;

    let htil = relu_map(graph.target_features(), &params.w_hom);

    // closed neighborhood mean: (A + I) / deg
    let mut etil = htil.clone();
    let mut deg = vec![1.0f64; n];
    for &(a, b) in graph.hom_edges() {
        etil.row_mut(a).scaled_add(1.0, &htil.row(b));
        etil.row_mut(b).scaled_add(1.0, &htil.row(a));
        deg[a] += 1.0;
        deg[b] += 1.0;
    }
    for (i, mut row) in etil.rows_mut().into_iter().enumerate() {
        row /= deg[i];
    }

    let mapped: Vec<Mat> = graph.all_features().iter().zip(&params.w_het).map(|(x, w)| relu_map(x, w)).collect();

    let relations = graph.relations();
    let mut hhat_typed = Vec::with_capacity(relations.len());
    let mut neighbor_mask = Vec::with_capacity(relations.len());
    let mut relation_names = Vec::with_capacity(relations.len());
    for rel in &relations {
        let src = &mapped[rel.other_type];
        let mut h = Mat::zeros((n, d));
        let mut mask = vec![false; n];
        for (i, nb) in rel.neighbors.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            mask[i] = true;
            let mut row = h.row_mut(i);
            for &j in nb {
                row += &src.row(j);
            }
            row /= nb.len() as f64;
        }
        hhat_typed.push(h);
        neighbor_mask.push(mask);
        relation_names.push(graph.edge_types()[rel.edge_type].name.clone());
    }

    let mut ehat = Mat::zeros((n, d));
    for i in 0..n {
        let present: Vec<usize> = (0..relations.len()).filter(|&r| neighbor_mask[r][i]).collect();
        if present.is_empty() {
            continue;
        }
        let mut row = ehat.row_mut(i);
        for &r in &present {
            row += &hhat_typed[r].row(i);
        }
        row /= present.len() as f64;
    }

    Ok(FrozenReps { htil, etil, hhat_typed, ehat, neighbor_mask, relation_names })
}
