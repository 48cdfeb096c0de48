//! Classification and clustering metrics, and the ablation harness.

use std::collections::BTreeMap;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterState};
use crate::config::{MarginVariant, TuneConfig};
use crate::encoder::FrozenReps;
use crate::error::{Error, Result};
use crate::hetgraph::{homophily_ratio, HetGraph};
use crate::objective::COS_EPS;
use crate::tape::Mat;
use crate::trainer::{self, Problem};

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub labels: Vec<usize>,
    /// Row-wise class probabilities.
    pub probs: Mat,
}

fn unit_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n + COS_EPS;
    }
    out
}

/// Softmax over `cos(p_i, c_y) / tau`; ties go to the smallest class.
pub fn classify(p: &Mat, protos: &Mat, tau: f64) -> Classification {
    let sim = unit_rows(p).dot(&unit_rows(protos).t()) / tau;
    let mut probs = sim.clone();
    let mut labels = Vec::with_capacity(p.nrows());
    for mut row in probs.rows_mut() {
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        labels.push(best);
        let m = row[best];
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    Classification { labels, probs }
}

/// `(macro, micro)` F1 of single-label predictions.
pub fn f1_scores(pred: &[usize], truth: &[usize], c: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = (0..c).map(|k| f1(tp[k], fp[k], fn_[k])).sum::<f64>() / c as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok((macro_f1, micro_f1))
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ndarray::ArrayView1<f64>, centers: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_once(points: &Mat, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.nrows();
    let mut centers = Mat::zeros((k, points.ncols()));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, x) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, x) in points.rows().into_iter().enumerate() {
            let (c, _) = nearest(x, &centers);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, x) in points.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &x);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let inertia = points.rows().into_iter().zip(&assign).map(|(x, &c)| sq_dist(x, centers.row(c))).sum();
    (assign, inertia)
}

/// Lloyd's k-means with k-means++ seeding; the best of `restarts` runs by
/// inertia.
pub fn kmeans(points: &Mat, k: usize, seed: u64, restarts: usize, max_iter: usize) -> Vec<usize> {
    let n = points.nrows();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let (a, inertia) = kmeans_once(points, k, max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((a, inertia));
        }
    }
    best.expect("at least one restart").0
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), usize>, BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let mut joint = BTreeMap::new();
    let mut ra = BTreeMap::new();
    let mut rb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ra.entry(x).or_insert(0) += 1;
        *rb.entry(y).or_insert(0) += 1;
    }
    (joint, ra, rb)
}

/// Mutual information normalised by the arithmetic mean of the entropies;
/// 0 when both entropies vanish.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (joint, ra, rb) = contingency(a, b);
    let entropy = |m: &BTreeMap<usize, usize>| -m.values().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>();
    let (ha, hb) = (entropy(&ra), entropy(&rb));
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        mi += pxy * (pxy / ((ra[&x] as f64 / n) * (rb[&y] as f64 / n))).ln();
    }
    let denom = (ha + hb) / 2.0;
    if denom <= 0.0 {
        0.0
    } else {
        (mi / denom).clamp(0.0, 1.0)
    }
}

/// Adjusted Rand index; 1 for the degenerate case of a zero denominator.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let pairs = |k: usize| (k * k.saturating_sub(1) / 2) as f64;
    let (joint, ra, rb) = contingency(a, b);
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sa: f64 = ra.values().map(|&c| pairs(c)).sum();
    let sb: f64 = rb.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len());
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;

/// k-means on probability rows, scored against `truth`.
pub fn cluster_metrics(probs: &Mat, truth: &[usize], c: usize, seed: u64) -> (f64, f64) {
    let assign = kmeans(probs, c, seed, KMEANS_RESTARTS, KMEANS_MAX_ITER);
    (nmi(&assign, truth), ari(&assign, truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub train_error: f64,
    pub test_error: f64,
    /// `test_error - train_error`.
    pub gap: f64,
}

/// Misclassification rates on the two splits.
pub fn error_rates(pred: &[usize], truth: &[Option<usize>], train: &[usize], test: &[usize]) -> Result<ErrorRates> {
    let rate = |idx: &[usize], what: &'static str| -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::EmptySample(what));
        }
        let wrong = idx.iter().filter(|&&i| truth[i] != Some(pred[i])).count();
        Ok(wrong as f64 / idx.len() as f64)
    };
    let train_error = rate(train, "train split")?;
    let test_error = rate(test, "test split")?;
    Ok(ErrorRates { train_error, test_error, gap: test_error - train_error })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub nmi: f64,
    pub ari: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub generalization_gap: f64,
    pub final_homophily: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// FNV-1a over the canonical JSON of `cfg`.
pub fn fingerprint(cfg: &TuneConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Scores `state` on the test split with a fresh forward pass.
pub fn evaluate(problem: &Problem, state: &AdapterState, cfg: &TuneConfig) -> Result<MetricsReport> {
    let out = adapters::predict(problem.reps, state, cfg.adapter.k);
    let protos = problem.avg.dot(&out.p);
    let cls = classify(&out.p, &protos, cfg.objective.tau);
    let rates = error_rates(&cls.labels, &problem.truth, &problem.train, &problem.test)?;
    let truth_test: Vec<usize> = problem
        .test
        .iter()
        .map(|&i| problem.truth[i].ok_or_else(|| Error::Graph(format!("test node {i} has no label"))))
        .collect::<Result<_>>()?;
    let pred_test: Vec<usize> = problem.test.iter().map(|&i| cls.labels[i]).collect();
    let (macro_f1, micro_f1) = f1_scores(&pred_test, &truth_test, problem.num_classes)?;
    let probs_test = cls.probs.select(ndarray::Axis(0), &problem.test);
    let (nmi, ari) = cluster_metrics(&probs_test, &truth_test, problem.num_classes, cfg.trainer.seed);
    Ok(MetricsReport {
        macro_f1,
        micro_f1,
        nmi,
        ari,
        train_error: rates.train_error,
        test_error: rates.test_error,
        generalization_gap: rates.gap,
        final_homophily: homophily_ratio(&out.structures.a, &problem.truth).unwrap_or(f64::NAN),
        config_fingerprint: fingerprint(cfg),
        seed: cfg.trainer.seed,
    })
}

/// One ablation variant: named toggles plus dotted-path overrides such as
/// `"adapter.alpha": 0.1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridCell {
    Toggle(String),
    Custom {
        name: String,
        #[serde(default)]
        toggles: Vec<String>,
        #[serde(default)]
        set: BTreeMap<String, serde_json::Value>,
    },
}

impl GridCell {
    pub fn name(&self) -> &str {
        match self {
            GridCell::Toggle(t) => t,
            GridCell::Custom { name, .. } => name,
        }
    }

    pub fn apply(&self, base: &TuneConfig) -> Result<TuneConfig> {
        let mut cfg = base.clone();
        match self {
            GridCell::Toggle(t) => apply_toggle(&mut cfg, t)?,
            GridCell::Custom { toggles, set, .. } => {
                for t in toggles {
                    apply_toggle(&mut cfg, t)?;
                }
                if !set.is_empty() {
                    let mut v = serde_json::to_value(&cfg)?;
                    for (path, val) in set {
                        let mut slot = &mut v;
                        for key in path.split('.') {
                            slot = slot
                                .as_object_mut()
                                .and_then(|o| o.get_mut(key))
                                .ok_or_else(|| Error::Config(format!("unknown config path {path:?}")))?;
                        }
                        *slot = val.clone();
                    }
                    cfg = serde_json::from_value(v).map_err(|e| Error::Config(format!("grid cell {}: {e}", self.name())))?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Toggle names understood by [`GridCell`].
pub const TOGGLES: [&str; 9] = [
    "full",
    "drop_Lcon",
    "drop_Lrec",
    "drop_Lmar",
    "drop_hom_adapter",
    "drop_het_adapter",
    "drop_both_adapters",
    "drop_label_extension",
    "infonce_margin_variant",
];

pub fn apply_toggle(cfg: &mut TuneConfig, toggle: &str) -> Result<()> {
    let o = &mut cfg.objective;
    let a = &mut cfg.adapter;
    match toggle {
        "full" => {}
        "drop_Lcon" => o.use_contrastive = false,
        "drop_Lrec" => o.eta = 0.0,
        "drop_Lmar" => o.mu = 0.0,
        "drop_hom_adapter" => a.alpha = 0.0,
        "drop_het_adapter" => a.beta = 0.0,
        "drop_both_adapters" => {
            a.alpha = 0.0;
            a.beta = 0.0;
        }
        "drop_label_extension" => {
            o.lambda = 0.0;
            o.eta = 0.0;
            o.mu = 0.0;
        }
        "infonce_margin_variant" => o.margin_variant = MarginVariant::Infonce,
        other => return Err(Error::UnknownToggle(other.to_string())),
    }
    Ok(())
}

/// Parses a grid document: either a bare array of cells or `{"cells": [...]}`.
pub fn parse_grid(text: &str) -> Result<Vec<GridCell>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(Vec<GridCell>),
        Wrapped { cells: Vec<GridCell> },
    }
    let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    let cells = match doc {
        Doc::Bare(c) | Doc::Wrapped { cells: c } => c,
    };
    if cells.is_empty() {
        return Err(Error::Config("grid has no cells".into()));
    }
    Ok(cells)
}

/// The objective-component rows of the ablation table.
pub fn objective_grid() -> Vec<GridCell> {
    let custom = |name: &str, toggles: &[&str]| GridCell::Custom {
        name: name.into(),
        toggles: toggles.iter().map(|s| s.to_string()).collect(),
        set: BTreeMap::new(),
    };
    vec![
        custom("Lcon", &["drop_Lrec", "drop_Lmar"]),
        custom("Lrec", &["drop_Lcon", "drop_Lmar"]),
        custom("Lmar", &["drop_Lcon", "drop_Lrec"]),
        custom("Lcon+Lrec", &["drop_Lmar"]),
        custom("Lcon+Lmar", &["drop_Lrec"]),
        custom("Lrec+Lmar", &["drop_Lcon"]),
        GridCell::Toggle("full".into()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: TuneConfig,
    pub report: MetricsReport,
}

/// One tune + evaluate run.
pub fn run_cell(graph: &HetGraph, reps: &FrozenReps, cfg: &TuneConfig) -> Result<MetricsReport> {
    let problem = Problem::new(graph, reps)?;
    let (state, _) = trainer::tune(&problem, cfg)?;
    evaluate(&problem, &state, cfg)
}

/// Runs every grid cell (same seeds throughout) on a pool of `jobs` threads.
pub fn ablate(graph: &HetGraph, reps: &FrozenReps, base: &TuneConfig, grid: &[GridCell], jobs: usize) -> Result<Vec<AblationRow>> {
    let configs: Vec<(String, TuneConfig)> =
        grid.iter().map(|c| Ok((c.name().to_string(), c.apply(base)?))).collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        configs
            .into_par_iter()
            .map(|(variant, config)| {
                let report = run_cell(graph, reps, &config)?;
                info!("ablation {variant}: macro_f1={:.4}", report.macro_f1);
                Ok(AblationRow { variant, config, report })
            })
            .collect()
    })
}

pub const ABLATION_HEADER: [&str; 10] =
    ["variant", "macro_f1", "micro_f1", "nmi", "ari", "train_err", "test_err", "gap", "homophily", "seed"];

pub fn write_ablation_csv<W: std::io::Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let err = |e: csv::Error| Error::Config(format!("writing ablation table: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER).map_err(err)?;
    for r in rows {
        let m = &r.report;
        let nums = [m.macro_f1, m.micro_f1, m.nmi, m.ari, m.train_error, m.test_error, m.generalization_gap, m.final_homophily];
        let mut rec = vec![r.variant.clone()];
        rec.extend(nums.iter().map(|x| format!("{x:?}")));
        rec.push(m.seed.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing ablation table: {e}")))
}
