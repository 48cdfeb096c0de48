//! Label propagation and the three loss heads of the tuning objective.
//!
//! Each loss has a tape builder (used by the trainer for gradients) and a
//! plain function that evaluates the same builder on constants.

use std::rc::Rc;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SymAdjacency;
use crate::tape::{ContrastRow, MarginTriple, Mat, Tape, Var};

/// Guard inside logarithms and the feature shift.
pub const LOG_EPS: f64 = 1e-12;

/// Norm guard for cosine similarity.
pub const COS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedLabels {
    /// `A Y` (`n x c`).
    pub ytil: Mat,
    /// Hard labels; `None` marks undecided nodes.
    pub hard: Vec<Option<usize>>,
    /// Largest entry of each `ytil` row.
    pub confidence: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mu: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda, self.gamma, self.eta, self.mu].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("loss weights must be >= 0 and tau > 0".into()));
        }
        Ok(())
    }
}

/// Diffuses the one-hot training labels through `A`. Originally labeled
/// nodes keep their label; rows with a tied (or zero) maximum are undecided.
pub fn propagate_labels(a: &SymAdjacency, train_labels: &[Option<usize>], c: usize) -> PropagatedLabels {
    let n = a.n();
    assert_eq!(train_labels.len(), n);
    let mut ytil = Mat::zeros((n, c));
    for &(i, j, w) in a.triplets() {
        if let Some(y) = train_labels[j] {
            ytil[[i, y]] += w;
        }
    }
    let mut hard = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for i in 0..n {
        let row = ytil.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        confidence.push(max);
        let decided = match train_labels[i] {
            Some(y) => Some(y),
            None if max > 0.0 && row.iter().filter(|&&v| v == max).count() == 1 => {
                row.iter().position(|&v| v == max)
            }
            None => None,
        };
        hard.push(decided);
    }
    PropagatedLabels { ytil, hard, confidence }
}

/// `c x n` averaging operator over the labeled training nodes of each class,
/// so that `avg . X` stacks the class prototypes of `X`.
pub fn prototype_operator(train_labels: &[Option<usize>], c: usize) -> Result<Mat> {
    let n = train_labels.len();
    let mut counts = vec![0usize; c];
    for y in train_labels.iter().flatten() {
        counts[*y] += 1;
    }
    if let Some(y) = counts.iter().position(|&k| k == 0) {
        return Err(Error::EmptyClass(y));
    }
    let mut avg = Mat::zeros((c, n));
    for (i, y) in train_labels.iter().enumerate() {
        if let Some(y) = *y {
            avg[[y, i]] = 1.0 / counts[y] as f64;
        }
    }
    Ok(avg)
}

/// Prediction-space prototypes: mean `P` row per class over labeled nodes.
pub fn class_prototypes_pred(p: &Mat, train_labels: &[Option<usize>], c: usize) -> Result<Mat> {
    Ok(prototype_operator(train_labels, c)?.dot(p))
}

/// Representation-space prototypes: mean `M^` row per class.
pub fn class_prototypes_rep(mhat: &Mat, train_labels: &[Option<usize>], c: usize) -> Result<Mat> {
    class_prototypes_pred(mhat, train_labels, c)
}

/// Anchors of the contrastive loss: every labeled node with weight 1 and
/// every decided unlabeled node with weight `lambda` (skipped when zero).
pub fn contrast_rows(hard: &[Option<usize>], train_labels: &[Option<usize>], lambda: f64) -> Vec<ContrastRow> {
    let mut rows = Vec::new();
    for (i, (&h, &t)) in hard.iter().zip(train_labels).enumerate() {
        match (t, h) {
            (Some(y), _) => rows.push(ContrastRow { node: i, class: y, weight: 1.0 }),
            (None, Some(y)) if lambda > 0.0 => rows.push(ContrastRow { node: i, class: y, weight: lambda }),
            _ => {}
        }
    }
    rows
}

/// Cosine similarity between rows of `x` and prototypes `avg . x`.
fn tape_proto_cosine(tape: &mut Tape, x: Var, avg: Var) -> Var {
    let protos = tape.matmul(avg, x);
    let xn = tape.row_normalize(x, COS_EPS);
    let cn = tape.row_normalize(protos, COS_EPS);
    tape.matmul_t(xn, cn)
}

/// Contrastive loss with the positive class left out of the denominator.
pub fn tape_contrastive(tape: &mut Tape, p: Var, avg: Var, rows: Rc<[ContrastRow]>, tau: f64) -> Var {
    let sim = tape_proto_cosine(tape, p, avg);
    tape.proto_contrastive(sim, rows, tau, false)
}

/// InfoNCE alignment of `M^` to its representation prototypes, used in
/// place of the margin loss by the ablation variant.
pub fn tape_infonce(tape: &mut Tape, mhat: Var, avg: Var, rows: Rc<[ContrastRow]>, tau: f64) -> Var {
    let sim = tape_proto_cosine(tape, mhat, avg);
    tape.proto_contrastive(sim, rows, tau, true)
}

/// `-ln` of each anchor's positive share over the negative classes, using
/// cosine similarity between rows of `p` and the prototypes `c_pred`.
pub fn contrastive_loss(
    p: &Mat,
    c_pred: &Mat,
    hard: &[Option<usize>],
    train_labels: &[Option<usize>],
    weights: &LossWeights,
) -> Result<f64> {
    let c = c_pred.nrows();
    if c < 2 {
        return Err(Error::TooFewClasses);
    }
    let rows: Rc<[ContrastRow]> = contrast_rows(hard, train_labels, weights.lambda).into();
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let cv = tape.constant(c_pred.clone());
    let pn = tape.row_normalize(pv, COS_EPS);
    let cn = tape.row_normalize(cv, COS_EPS);
    let sim = tape.matmul_t(pn, cn);
    let loss = tape.proto_contrastive(sim, rows, weights.tau, false);
    Ok(tape.scalar(loss))
}

/// Shifts each row to be nonnegative, adds `LOG_EPS` and normalises it to a
/// probability distribution.
pub fn normalize_features(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.mapv_inplace(|v| v - min + LOG_EPS);
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Cross-entropy between `X^-` and its one-hop reconstruction
/// `(X^- + A X^-) / (1 + deg)` over the `sample` rows.
pub fn tape_reconstruction(
    tape: &mut Tape,
    a_weights: Var,
    edges: Rc<[(usize, usize)]>,
    xbar: Rc<Mat>,
    sample: Rc<[usize]>,
) -> Var {
    let n = xbar.nrows();
    let xb = tape.constant((*xbar).clone());
    let ones = tape.constant(Mat::ones((n, 1)));
    let ax = tape.sym_spmm(a_weights, xb, edges.clone());
    let deg = tape.sym_spmm(a_weights, ones, edges);
    let num = tape.add(xb, ax);
    let den = tape.add_scalar(deg, 1.0);
    let r = tape.row_div(num, den);
    tape.cross_entropy_rows(r, xbar, sample, LOG_EPS)
}

pub fn reconstruction_loss(a: &SymAdjacency, x: &Mat, sample: &[usize]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample("reconstruction sample"));
    }
    let edges: Vec<(usize, usize)> = a.triplets().iter().map(|&(i, j, _)| (i, j)).collect();
    // both orientations are listed, so the halves applied by sym_spmm add up
    let w = Mat::from_shape_vec((edges.len(), 1), a.triplets().iter().map(|t| t.2).collect()).expect("shape");
    let mut tape = Tape::new();
    let wv = tape.constant(w);
    let loss = tape_reconstruction(&mut tape, wv, edges.into(), Rc::new(normalize_features(x)), sample.into());
    Ok(tape.scalar(loss))
}

/// One partner per other class for every decided node, uniformly among the
/// decided nodes of that class.
pub fn sample_margin_triples(hard: &[Option<usize>], c: usize, rng: &mut impl Rng) -> Vec<MarginTriple> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, h) in hard.iter().enumerate() {
        if let Some(y) = h {
            by_class[*y].push(i);
        }
    }
    let mut triples = Vec::new();
    for (i, h) in hard.iter().enumerate() {
        let Some(y) = *h else { continue };
        for (other, members) in by_class.iter().enumerate() {
            if other == y || members.is_empty() {
                continue;
            }
            let j = members[rng.random_range(0..members.len())];
            triples.push(MarginTriple { anchor: i, other: j, class: y });
        }
    }
    triples
}

/// Margin hinge in representation space against `avg . M^`.
pub fn tape_margin(tape: &mut Tape, mhat: Var, avg: Var, triples: Rc<[MarginTriple]>, gamma: f64) -> Var {
    let protos = tape.matmul(avg, mhat);
    tape.margin_hinge(protos, mhat, triples, gamma)
}

pub fn margin_loss(c_rep: &Mat, mhat: &Mat, triples: &[MarginTriple], gamma: f64) -> f64 {
    if triples.is_empty() {
        warn!("margin loss: fewer than two decided classes, loss is 0");
        return 0.0;
    }
    let mut tape = Tape::new();
    let cv = tape.constant(c_rep.clone());
    let mv = tape.constant(mhat.clone());
    let loss = tape.margin_hinge(cv, mv, triples.to_vec().into(), gamma);
    tape.scalar(loss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_con: f64,
    pub l_rec: f64,
    pub l_mar: f64,
}

/// `J = L_con + eta L_rec + mu L_mar`
pub fn total_objective(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.l_con + weights.eta * parts.l_rec + weights.mu * parts.l_mar
}
