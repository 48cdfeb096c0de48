//! Dual structure-aware adapters.
//!
//! The homogeneous adapter maps the frozen pre-aggregation representations
//! through a low-rank ReLU MLP and re-aggregates them over a learned kNN
//! structure `A`; the heterogeneous adapter maps the per-relation pooled
//! neighborhoods through a second low-rank MLP and mixes them with learned
//! per-node relation weights `S`. Both residuals are added to the frozen
//! branch outputs, concatenated and projected to class scores.
//!
//! All forward computations are expressed on a [`Tape`] so the trainer can
//! differentiate them; the free functions in this module evaluate the same
//! graph on constants.

use std::path::Path;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::encoder::FrozenReps;
use crate::error::{Error, Result};
use crate::sparse::SymAdjacency;
use crate::tape::{Mat, Tape, Var};

/// Norm guard for cosine similarity.
pub const COS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    /// Frozen representation width.
    pub d: usize,
    /// Adapted representation width.
    pub d_out: usize,
    /// Rank of the homogeneous factors.
    pub t: usize,
    /// Rank of the heterogeneous factors.
    pub t_het: usize,
    pub num_classes: usize,
}

impl AdapterDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_out == 0 || self.t == 0 || self.t_het == 0 || self.num_classes == 0 {
            return bad("adapter dimensions must be >= 1".into());
        }
        let cap = self.d.min(self.d_out) / 4;
        if self.t > cap || self.t_het > cap {
            return bad(format!(
                "low-rank widths t={}, t'={} must be <= min(d, d')/4 = {cap}",
                self.t, self.t_het
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let AdapterDims { d, d_out, t, t_het, num_classes: c } = *self;
        2 * (d * t + t * d_out) + d * t_het + t_het * d_out + d + 2 * d_out * c
    }
}

/// Names of the trainable tensors, in catalog order.
pub const PARAM_NAMES: [&str; 8] =
    ["w_down", "w_up", "w_theta_down", "w_theta_up", "theta_down", "theta_up", "w_eps", "w_rho"];

/// Every trainable adapter parameter plus the fixed mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub dims: AdapterDims,
    pub w_down: Mat,
    pub w_up: Mat,
    pub w_theta_down: Mat,
    pub w_theta_up: Mat,
    pub theta_down: Mat,
    pub theta_up: Mat,
    pub w_eps: Mat,
    pub w_rho: Mat,
    pub alpha: f64,
    pub beta: f64,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl AdapterState {
    /// Residual-adapter initialisation: the up-projections of both mapping
    /// MLPs start at zero so the adapted representations equal the frozen
    /// ones; every other factor is Gaussian with std `1/sqrt(fan_in)`.
    pub fn init(dims: AdapterDims, alpha: f64, beta: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        let AdapterDims { d, d_out, t, t_het, num_classes: c } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            dims,
            w_down: normal(&mut rng, d, t),
            w_up: Mat::zeros((t, d_out)),
            w_theta_down: normal(&mut rng, d, t),
            w_theta_up: normal(&mut rng, t, d_out),
            theta_down: normal(&mut rng, d, t_het),
            theta_up: Mat::zeros((t_het, d_out)),
            w_eps: normal(&mut rng, d, 1),
            w_rho: normal(&mut rng, 2 * d_out, c),
            alpha,
            beta,
        })
    }

    pub fn tensors(&self) -> [&Mat; 8] {
        [
            &self.w_down,
            &self.w_up,
            &self.w_theta_down,
            &self.w_theta_up,
            &self.theta_down,
            &self.theta_up,
            &self.w_eps,
            &self.w_rho,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 8] {
        [
            &mut self.w_down,
            &mut self.w_up,
            &mut self.w_theta_down,
            &mut self.w_theta_up,
            &mut self.theta_down,
            &mut self.theta_up,
            &mut self.w_eps,
            &mut self.w_rho,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *it.next().expect("length checked");
            }
        }
    }

    /// Pushes every tensor onto `tape`, as trainable leaves when `trainable`.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |m: &Mat| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        ParamVars {
            w_down: leaf(&self.w_down),
            w_up: leaf(&self.w_up),
            w_theta_down: leaf(&self.w_theta_down),
            w_theta_up: leaf(&self.w_theta_up),
            theta_down: leaf(&self.theta_down),
            theta_up: leaf(&self.theta_up),
            w_eps: leaf(&self.w_eps),
            w_rho: leaf(&self.w_rho),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors: Vec<(&str, &Mat)> = PARAM_NAMES.iter().copied().zip(self.tensors()).collect();
        checkpoint::encode("adapter", json!({"dims": self.dims, "alpha": self.alpha, "beta": self.beta}), &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode(bytes, "adapter")?;
        let dims: AdapterDims = serde_json::from_value(header.meta["dims"].clone())?;
        let get = |k: &str| header.meta[k].as_f64().ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let mut state = Self::init(dims, get("alpha")?, get("beta")?, 0)?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Checkpoint("wrong tensor count".into()));
        }
        for (dst, src) in state.tensors_mut().into_iter().zip(tensors) {
            if dst.dim() != src.dim() {
                return Err(Error::Checkpoint("tensor shape disagrees with dims".into()));
            }
            *dst = src;
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// Tape handles for the tensors of an [`AdapterState`], field for field.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w_down: Var,
    pub w_up: Var,
    pub w_theta_down: Var,
    pub w_theta_up: Var,
    pub theta_down: Var,
    pub theta_up: Var,
    pub w_eps: Var,
    pub w_rho: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.w_down,
            self.w_up,
            self.w_theta_down,
            self.w_theta_up,
            self.theta_down,
            self.theta_up,
            self.w_eps,
            self.w_rho,
        ]
    }
}

/// Fixed column truncation / zero padding from width `d` to `d_out`.
pub fn proj_frozen(m: &Mat, d_out: usize) -> Mat {
    let d = m.ncols();
    if d == d_out {
        return m.clone();
    }
    let mut out = Mat::zeros((m.nrows(), d_out));
    let w = d.min(d_out);
    out.slice_mut(s![.., ..w]).assign(&m.slice(s![.., ..w]));
    out
}

/// The sparse kNN similarity `Ã` before rectification: directed edges
/// `i -> j` and their cosine weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnSimilarity {
    pub n: usize,
    pub edges: Rc<[(usize, usize)]>,
    pub weights: Vec<f64>,
}

/// `A = (ReLU(Ã) + ReLU(Ã)^T) / 2`
pub fn symmetrize_relu(knn: &KnnSimilarity) -> SymAdjacency {
    let w: Vec<f64> = knn.weights.iter().map(|x| x.max(0.0)).collect();
    SymAdjacency::from_directed(knn.n, &knn.edges, &w)
}

/// For every row of the unit-normalised projections `qn`, the `k` largest
/// cosine similarities over `j != i`. Ties go to the smaller index.
pub fn select_knn(qn: &Mat, k: usize) -> Vec<(usize, usize)> {
    let n = qn.nrows();
    let k = k.min(n.saturating_sub(1));
    let sim = qn.dot(&qn.t());
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = sim.row(i);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        edges.extend(order.iter().map(|&j| (i, j)));
    }
    edges
}

/// Learned heterogeneous structure `S` (`n x R`).
#[derive(Clone, Debug, PartialEq)]
pub struct HetScores {
    pub s: Mat,
    /// Nodes without any heterogeneous neighbor (all-zero row in `s`).
    pub no_neighbors: Vec<bool>,
}

/// Learned structures of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedStructures {
    pub a: SymAdjacency,
    pub s: HetScores,
}

/// Frozen inputs placed on a tape as constants.
#[derive(Clone, Debug)]
pub struct RepVars {
    pub htil: Var,
    pub etil: Var,
    pub ehat: Var,
    pub hhat_typed: Vec<Var>,
    pub mask: Rc<[bool]>,
}

impl RepVars {
    /// Pushes `reps` (with `proj_frozen` applied to the aggregated outputs).
    pub fn push(tape: &mut Tape, reps: &FrozenReps, d_out: usize) -> Self {
        Self {
            htil: tape.constant(reps.htil.clone()),
            etil: tape.constant(proj_frozen(&reps.etil, d_out)),
            ehat: tape.constant(proj_frozen(&reps.ehat, d_out)),
            hhat_typed: reps.hhat_typed.iter().map(|h| tape.constant(h.clone())).collect(),
            mask: reps.flat_mask(),
        }
    }
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub edges: Rc<[(usize, usize)]>,
    /// Rectified directed edge weights (`E x 1`).
    pub a_weights: Var,
    /// Raw cosine weights before rectification (`E x 1`).
    pub a_raw: Var,
    pub f: Var,
    pub ftil: Var,
    pub ztil: Var,
    pub s: Var,
    pub mhat: Var,
    pub zhat: Var,
    pub z: Var,
    pub p: Var,
}

impl ForwardVars {
    pub fn structure(&self, tape: &Tape, n: usize) -> SymAdjacency {
        let w: Vec<f64> = tape.value(self.a_weights).iter().copied().collect();
        SymAdjacency::from_directed(n, &self.edges, &w)
    }
}

/// Unit-normalised structure projections `h W_theta / |h W_theta|`.
pub fn tape_projection(tape: &mut Tape, htil: Var, p: &ParamVars) -> Var {
    let q = tape.matmul(htil, p.w_theta_down);
    let q = tape.matmul(q, p.w_theta_up);
    tape.row_normalize(q, COS_EPS)
}

pub fn tape_map_hom(tape: &mut Tape, htil: Var, p: &ParamVars) -> Var {
    let f = tape.matmul(htil, p.w_down);
    let f = tape.matmul(f, p.w_up);
    tape.relu(f)
}

/// Full adapter forward pass. When `edges` is `None` the kNN selection is
/// recomputed from the current projections; otherwise the given selection is
/// reused (weights are always recomputed).
pub fn forward(
    tape: &mut Tape,
    reps: &RepVars,
    p: &ParamVars,
    alpha: f64,
    beta: f64,
    k: usize,
    edges: Option<Rc<[(usize, usize)]>>,
) -> ForwardVars {
    // homogeneous adapter
    let f = tape_map_hom(tape, reps.htil, p);
    let qn = tape_projection(tape, reps.htil, p);
    let edges = edges.unwrap_or_else(|| select_knn(tape.value(qn), k).into());
    let a_raw = tape.edge_dot(qn, edges.clone());
    let a_weights = tape.relu(a_raw);
    let ftil = tape.sym_spmm(a_weights, f, edges.clone());
    let scaled = tape.scale(ftil, alpha);
    let ztil = tape.add(reps.etil, scaled);

    // heterogeneous adapter
    let logits: Vec<Var> = reps
        .hhat_typed
        .iter()
        .map(|&h| {
            let l = tape.matmul(h, p.w_eps);
            tape.tanh(l)
        })
        .collect();
    let n = tape.value(reps.htil).nrows();
    let d_out = tape.value(reps.etil).ncols();
    let s = match logits.split_first() {
        None => tape.constant(Mat::zeros((n, 0))),
        Some((&first, rest)) => {
            let cat = rest.iter().fold(first, |acc, &l| tape.concat_cols(acc, l));
            tape.masked_softmax(cat, reps.mask.clone())
        }
    };
    let mut mhat = None;
    for (r, &h) in reps.hhat_typed.iter().enumerate() {
        let m = tape.matmul(h, p.theta_down);
        let m = tape.matmul(m, p.theta_up);
        let m = tape.relu(m);
        let w = tape.col(s, r);
        let term = tape.row_scale(m, w);
        mhat = Some(match mhat {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let mhat = mhat.unwrap_or_else(|| tape.constant(Mat::zeros((n, d_out))));
    let scaled = tape.scale(mhat, beta);
    let zhat = tape.add(reps.ehat, scaled);

    let z = tape.concat_cols(ztil, zhat);
    let pred = tape.matmul(z, p.w_rho);
    ForwardVars { edges, a_weights, a_raw, f, ftil, ztil, s, mhat, zhat, z, p: pred }
}

fn with_consts<T>(state: &AdapterState, f: impl FnOnce(&mut Tape, &ParamVars) -> T) -> T {
    let mut tape = Tape::new();
    let p = state.to_tape(&mut tape, false);
    f(&mut tape, &p)
}

/// `F = ReLU(H W_down W_up)`
pub fn map_hom(htil: &Mat, state: &AdapterState) -> Mat {
    with_consts(state, |tape, p| {
        let h = tape.constant(htil.clone());
        let f = tape_map_hom(tape, h, p);
        tape.value(f).clone()
    })
}

/// Sparse cosine kNN similarities of the projected representations.
pub fn knn_similarity(htil: &Mat, state: &AdapterState, k: usize) -> KnnSimilarity {
    with_consts(state, |tape, p| {
        let h = tape.constant(htil.clone());
        let qn = tape_projection(tape, h, p);
        let edges: Rc<[(usize, usize)]> = select_knn(tape.value(qn), k).into();
        let w = tape.edge_dot(qn, edges.clone());
        KnnSimilarity { n: htil.nrows(), edges, weights: tape.value(w).iter().copied().collect() }
    })
}

/// Learned homogeneous structure `A`.
pub fn learn_hom_structure(htil: &Mat, state: &AdapterState, k: usize) -> SymAdjacency {
    symmetrize_relu(&knn_similarity(htil, state, k))
}

/// `(Z~, A)` with `Z~ = proj(E~) + alpha * A F`.
pub fn hom_forward(htil: &Mat, etil: &Mat, state: &AdapterState, k: usize) -> (Mat, SymAdjacency) {
    let a = learn_hom_structure(htil, state, k);
    let f = map_hom(htil, state);
    let mut ztil = proj_frozen(etil, state.dims.d_out);
    for &(i, j, w) in a.triplets() {
        ztil.row_mut(i).scaled_add(state.alpha * w, &f.row(j));
    }
    (ztil, a)
}

fn flat_mask(mask: &[Vec<bool>], n: usize) -> Rc<[bool]> {
    let r = mask.len();
    (0..n * r).map(|k| mask[k % r][k / r]).collect()
}

/// Relation weights `S`: masked softmax of `tanh(h_{i,r} W_eps)`.
pub fn learn_het_structure(hhat_typed: &[Mat], neighbor_mask: &[Vec<bool>], state: &AdapterState) -> HetScores {
    let n = hhat_typed.first().map_or(0, |h| h.nrows());
    let r = hhat_typed.len();
    let mut logits = Mat::zeros((n, r));
    for (k, h) in hhat_typed.iter().enumerate() {
        let l = h.dot(&state.w_eps).mapv(f64::tanh);
        logits.slice_mut(s![.., k..k + 1]).assign(&l);
    }
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let sv = tape.masked_softmax(x, flat_mask(neighbor_mask, n));
    let no_neighbors = (0..n).map(|i| neighbor_mask.iter().all(|m| !m[i])).collect();
    HetScores { s: tape.value(sv).clone(), no_neighbors }
}

/// `(Z^, M^, S)` with `Z^ = proj(E^) + beta * M^`.
pub fn het_forward(
    hhat_typed: &[Mat],
    ehat: &Mat,
    neighbor_mask: &[Vec<bool>],
    state: &AdapterState,
) -> (Mat, Mat, HetScores) {
    let scores = learn_het_structure(hhat_typed, neighbor_mask, state);
    let mut mhat = Mat::zeros((ehat.nrows(), state.dims.d_out));
    for (r, h) in hhat_typed.iter().enumerate() {
        let m = h.dot(&state.theta_down).dot(&state.theta_up).mapv(|x| x.max(0.0));
        for (i, mut row) in mhat.rows_mut().into_iter().enumerate() {
            row.scaled_add(scores.s[[i, r]], &m.row(i));
        }
    }
    let zhat = proj_frozen(ehat, state.dims.d_out) + &mhat * state.beta;
    (zhat, mhat, scores)
}

/// `Z = [Z~ | Z^]`, `P = Z W_rho`.
pub fn fuse_and_predict(ztil: &Mat, zhat: &Mat, state: &AdapterState) -> (Mat, Mat) {
    let z = ndarray::concatenate(ndarray::Axis(1), &[ztil.view(), zhat.view()]).expect("row counts agree");
    let p = z.dot(&state.w_rho);
    (z, p)
}

/// Values of a full forward pass on constants.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub z: Mat,
    pub p: Mat,
    pub mhat: Mat,
    pub structures: LearnedStructures,
}

/// Evaluates the full model with a fresh kNN selection.
pub fn predict(reps: &FrozenReps, state: &AdapterState, k: usize) -> ForwardOutput {
    let mut tape = Tape::new();
    let pv = state.to_tape(&mut tape, false);
    let rv = RepVars::push(&mut tape, reps, state.dims.d_out);
    let fv = forward(&mut tape, &rv, &pv, state.alpha, state.beta, k, None);
    let no_neighbors = (0..reps.n()).map(|i| reps.neighbor_mask.iter().all(|m| !m[i])).collect();
    ForwardOutput {
        z: tape.value(fv.z).clone(),
        p: tape.value(fv.p).clone(),
        mhat: tape.value(fv.mhat).clone(),
        structures: LearnedStructures {
            a: fv.structure(&tape, reps.n()),
            s: HetScores { s: tape.value(fv.s).clone(), no_neighbors },
        },
    }
}
