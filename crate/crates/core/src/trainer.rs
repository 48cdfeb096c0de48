//! Gradient computation, finite-difference verification and the tuning
//! loop.
//!
//! Each step runs the adapter forward pass on a fresh tape, fixes the
//! discrete choices of that step (kNN neighbor sets, propagated hard labels,
//! sampled margin partners, reconstruction sample) from the forward values,
//! appends the loss heads and differentiates `J` with respect to every
//! adapter tensor. The encoder never appears on the tape.

use std::rc::Rc;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterState, ForwardVars, ParamVars, RepVars, PARAM_NAMES};
use crate::config::{MarginVariant, TuneConfig};
use crate::encoder::FrozenReps;
use crate::error::{Error, Result};
use crate::eval;
use crate::hetgraph::{homophily_ratio, HetGraph};
use crate::objective::{self, normalize_features};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::sparse::SymAdjacency;
use crate::tape::{ContrastRow, MarginTriple, Mat, Tape, Var};

/// Labels and features of one graph, prepared for tuning.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub reps: &'a FrozenReps,
    pub num_classes: usize,
    /// Labels of training nodes only.
    pub train_labels: Vec<Option<usize>>,
    /// Ground truth, used only for diagnostics and evaluation.
    pub truth: Vec<Option<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Target features as probability rows.
    pub xbar: Rc<Mat>,
    /// Class-mean operator over the training labels (`c x n`).
    pub avg: Mat,
}

impl<'a> Problem<'a> {
    pub fn new(graph: &HetGraph, reps: &'a FrozenReps) -> Result<Self> {
        if reps.n() != graph.n_target() {
            return Err(Error::LengthMismatch(reps.n(), graph.n_target()));
        }
        let c = graph.num_classes();
        if c < 2 {
            return Err(Error::TooFewClasses);
        }
        let train_labels = graph.train_labels();
        let avg = objective::prototype_operator(&train_labels, c)?;
        Ok(Self {
            reps,
            num_classes: c,
            train_labels,
            truth: graph.labels().to_vec(),
            train: graph.split().train.clone(),
            test: graph.split().test.clone(),
            xbar: Rc::new(normalize_features(graph.target_features())),
            avg,
        })
    }

    pub fn n(&self) -> usize {
        self.reps.n()
    }

    pub fn init_state(&self, cfg: &TuneConfig) -> Result<AdapterState> {
        let dims = cfg.adapter.dims(self.reps.d(), self.num_classes);
        AdapterState::init(dims, cfg.adapter.alpha, cfg.adapter.beta, cfg.trainer.seed)
    }
}

/// Name, shape and flat offset of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Trainable tensors and a gradient aligned to them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSpec {
    pub catalog: Vec<CatalogEntry>,
    pub gradient: Vec<f64>,
}

pub fn catalog(state: &AdapterState) -> Vec<CatalogEntry> {
    let mut offset = 0;
    PARAM_NAMES
        .iter()
        .zip(state.tensors())
        .map(|(&name, t)| {
            let e = CatalogEntry { name, rows: t.nrows(), cols: t.ncols(), offset };
            offset += t.len();
            e
        })
        .collect()
}

pub fn lookup<'c>(catalog: &'c [CatalogEntry], name: &str) -> Result<&'c CatalogEntry> {
    catalog.iter().find(|e| e.name == name).ok_or_else(|| Error::NotInCatalog(name.to_string()))
}

/// Discrete choices held fixed during one gradient step.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub edges: Rc<[(usize, usize)]>,
    pub hard: Vec<Option<usize>>,
    pub contrast: Rc<[ContrastRow]>,
    pub triples: Rc<[MarginTriple]>,
    /// Anchors of the InfoNCE variant: decided nodes at weight 1.
    pub aligned: Rc<[ContrastRow]>,
    pub rec_sample: Rc<[usize]>,
}

struct Built {
    params: ParamVars,
    fwd: ForwardVars,
    l_con: Var,
    l_rec: Var,
    l_mar: Var,
    j: Var,
}

fn stream_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 * 4 + purpose);
    rng
}

fn forward_on(
    tape: &mut Tape,
    problem: &Problem,
    state: &AdapterState,
    cfg: &TuneConfig,
    edges: Option<Rc<[(usize, usize)]>>,
) -> (ParamVars, ForwardVars) {
    let params = state.to_tape(tape, true);
    let reps = RepVars::push(tape, problem.reps, state.dims.d_out);
    let fwd = adapters::forward(tape, &reps, &params, state.alpha, state.beta, cfg.adapter.k, edges);
    (params, fwd)
}

fn plan_step(problem: &Problem, a: &SymAdjacency, edges: Rc<[(usize, usize)]>, cfg: &TuneConfig, epoch: usize) -> StepPlan {
    let c = problem.num_classes;
    let hard = objective::propagate_labels(a, &problem.train_labels, c).hard;
    let contrast = objective::contrast_rows(&hard, &problem.train_labels, cfg.objective.lambda).into();
    let mut rng = stream_rng(cfg.trainer.seed, epoch, 1);
    let triples = objective::sample_margin_triples(&hard, c, &mut rng).into();
    let aligned = hard
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.map(|y| ContrastRow { node: i, class: y, weight: 1.0 }))
        .collect();
    let n = problem.n();
    let rec_sample = match cfg.objective.rec_sample {
        Some(m) if m < n => {
            let mut rng = stream_rng(cfg.trainer.seed, epoch, 2);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx.into()
        }
        _ => (0..n).collect(),
    };
    StepPlan { edges, hard, contrast, triples, aligned, rec_sample }
}

fn losses_on(tape: &mut Tape, problem: &Problem, fwd: &ForwardVars, plan: &StepPlan, cfg: &TuneConfig) -> (Var, Var, Var, Var) {
    let obj = &cfg.objective;
    let avg = tape.constant(problem.avg.clone());
    let l_con = objective::tape_contrastive(tape, fwd.p, avg, plan.contrast.clone(), obj.tau);
    let l_rec = objective::tape_reconstruction(
        tape,
        fwd.a_weights,
        plan.edges.clone(),
        problem.xbar.clone(),
        plan.rec_sample.clone(),
    );
    let l_mar = match obj.margin_variant {
        MarginVariant::Hinge => objective::tape_margin(tape, fwd.mhat, avg, plan.triples.clone(), obj.gamma),
        MarginVariant::Infonce => objective::tape_infonce(tape, fwd.mhat, avg, plan.aligned.clone(), obj.tau),
    };
    let rec = tape.scale(l_rec, obj.eta);
    let mar = tape.scale(l_mar, obj.mu);
    let aux = tape.add(rec, mar);
    let j = if obj.use_contrastive { tape.add(l_con, aux) } else { aux };
    (l_con, l_rec, l_mar, j)
}

/// Builds the full objective. Without `plan` the discrete choices are made
/// from this forward pass (`edges` may still pin the kNN selection).
fn build(
    tape: &mut Tape,
    problem: &Problem,
    state: &AdapterState,
    cfg: &TuneConfig,
    epoch: usize,
    edges: Option<Rc<[(usize, usize)]>>,
    plan: Option<&StepPlan>,
) -> (Built, StepPlan) {
    let edges = plan.map(|p| p.edges.clone()).or(edges);
    let (params, fwd) = forward_on(tape, problem, state, cfg, edges);
    let plan = match plan {
        Some(p) => p.clone(),
        None => {
            let a = fwd.structure(tape, problem.n());
            plan_step(problem, &a, fwd.edges.clone(), cfg, epoch)
        }
    };
    let (l_con, l_rec, l_mar, j) = losses_on(tape, problem, &fwd, &plan, cfg);
    (Built { params, fwd, l_con, l_rec, l_mar, j }, plan)
}

fn flat_gradient(tape: &Tape, built: &Built, state: &AdapterState) -> Result<Vec<f64>> {
    let grads = tape.backward(built.j);
    let mut flat = Vec::with_capacity(state.param_count());
    for ((name, v), t) in PARAM_NAMES.iter().zip(built.params.all()).zip(state.tensors()) {
        match grads.wrt(v) {
            Some(g) => {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
                flat.extend(g.iter().copied());
            }
            None => flat.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    Ok(flat)
}

/// Value and gradient of `J` at `state`, discrete choices made at `epoch`.
pub fn grad(problem: &Problem, state: &AdapterState, cfg: &TuneConfig, epoch: usize) -> Result<(f64, GradSpec, StepPlan)> {
    let mut tape = Tape::new();
    let (built, plan) = build(&mut tape, problem, state, cfg, epoch, None, None);
    let gradient = flat_gradient(&tape, &built, state)?;
    Ok((tape.scalar(built.j), GradSpec { catalog: catalog(state), gradient }, plan))
}

/// `J` at `state` with every discrete choice taken from `plan`.
pub fn objective_at(problem: &Problem, state: &AdapterState, cfg: &TuneConfig, plan: &StepPlan) -> f64 {
    let mut tape = Tape::new();
    let (built, _) = build(&mut tape, problem, state, cfg, 0, None, Some(plan));
    tape.scalar(built.j)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_con: f64,
    pub l_rec: f64,
    pub l_mar: f64,
    pub j: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub homophily: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const HEADER: [&'static str; 9] =
        ["epoch", "l_con", "l_rec", "l_mar", "j", "train_err", "test_err", "homophily", "wall_ms"];

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let io = |e: csv::Error| Error::Config(format!("writing history: {e}"));
        w.write_record(Self::HEADER).map_err(io)?;
        for r in &self.records {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Config(format!("writing history: {e}")))
    }
}

/// What an observer sees after each epoch's forward pass.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub a: &'a SymAdjacency,
    pub s: &'a Mat,
    pub mask: &'a [bool],
}

/// Tunes a fresh adapter (see [`tune_from`]).
pub fn tune(problem: &Problem, cfg: &TuneConfig) -> Result<(AdapterState, TrainHistory)> {
    let init = problem.init_state(cfg)?;
    tune_from(problem, init, cfg, &mut |_| {})
}

/// The tuning loop. `observe` is called once per epoch, before the update.
/// A non-finite objective aborts with [`Error::Diverged`]; the records seen
/// by `observe` up to then are the finite history.
pub fn tune_from(
    problem: &Problem,
    mut state: AdapterState,
    cfg: &TuneConfig,
    observe: &mut dyn FnMut(&EpochView),
) -> Result<(AdapterState, TrainHistory)> {
    cfg.validate()?;
    let adam = AdamConfig::with_lr(cfg.trainer.lr);
    let mut opt = AdamState::new(state.param_count());
    let mut history = TrainHistory::default();
    let mut edges: Option<Rc<[(usize, usize)]>> = None;
    let mask = problem.reps.flat_mask();

    for epoch in 1..=cfg.trainer.epochs {
        let started = Instant::now();
        if (epoch - 1) % cfg.trainer.structure_refresh == 0 {
            edges = None;
        }
        let mut tape = Tape::new();
        let (built, plan) = build(&mut tape, problem, &state, cfg, epoch, edges.clone(), None);
        edges = Some(plan.edges.clone());
        let j = tape.scalar(built.j);
        if !j.is_finite() {
            return Err(Error::Diverged { epoch, last_finite: epoch - 1 });
        }
        let gradient = flat_gradient(&tape, &built, &state)?;

        let a = built.fwd.structure(&tape, problem.n());
        let p = tape.value(built.fwd.p);
        let (train_err, test_err) = split_errors(problem, p, cfg.objective.tau)?;
        let homophily = homophily_ratio(&a, &problem.truth).unwrap_or(f64::NAN);
        let mut record = EpochRecord {
            epoch,
            l_con: tape.scalar(built.l_con),
            l_rec: tape.scalar(built.l_rec),
            l_mar: tape.scalar(built.l_mar),
            j,
            train_err,
            test_err,
            homophily,
            wall_ms: 0,
        };
        adam_step_state(&mut state, &gradient, &mut opt, &adam);
        if cfg.trainer.record_wall_time {
            record.wall_ms = started.elapsed().as_millis() as u64;
        }
        debug!("epoch {epoch}: J={j:.6} train_err={train_err:.4} homophily={homophily:.4}");
        observe(&EpochView { record: &record, a: &a, s: tape.value(built.fwd.s), mask: &mask });
        history.records.push(record);
    }
    Ok((state, history))
}

fn adam_step_state(state: &mut AdapterState, gradient: &[f64], opt: &mut AdamState, cfg: &AdamConfig) {
    let mut flat = state.flatten();
    adam_step(&mut flat, gradient, opt, cfg);
    state.load_flat(&flat);
}

/// Training and test misclassification rates of predictions `p`.
pub fn split_errors(problem: &Problem, p: &Mat, tau: f64) -> Result<(f64, f64)> {
    let protos = problem.avg.dot(p);
    let pred = eval::classify(p, &protos, tau).labels;
    let rates = eval::error_rates(&pred, &problem.truth, &problem.train, &problem.test)?;
    Ok((rates.train_error, rates.test_error))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub name: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Perturbs the zero-initialised up-projections so every factor carries
/// signal, making the check exercise all paths.
pub fn gradcheck_state(problem: &Problem, cfg: &TuneConfig) -> Result<AdapterState> {
    let mut state = problem.init_state(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed ^ 0x9e37_79b9);
    let scale = |m: &Mat| 1.0 / (m.nrows() as f64).sqrt();
    for m in [&mut state.w_up, &mut state.theta_up] {
        let s = scale(m);
        m.mapv_inplace(|_| rng.random_range(-s..s));
    }
    Ok(state)
}

/// Compares the analytic gradient with central differences of `J` at
/// `n_probes` randomly chosen parameters (or at `names` when given).
pub fn grad_check(
    problem: &Problem,
    state: &AdapterState,
    cfg: &TuneConfig,
    n_probes: usize,
    names: Option<&[&str]>,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let (_, spec, plan) = grad(problem, state, cfg, 1)?;
    let mut gradient = spec.gradient;
    if corrupt {
        for g in &mut gradient {
            *g = *g * 1.5 + 1e-3;
        }
    }
    let total = gradient.len();
    let mut indices: Vec<usize> = match names {
        Some(names) => {
            let mut idx = Vec::new();
            for name in names {
                let e = lookup(&spec.catalog, name)?;
                idx.extend(e.offset..e.offset + e.rows * e.cols);
            }
            idx
        }
        None => (0..total).collect(),
    };
    let n_probes = n_probes.max(1);
    if n_probes > indices.len() {
        warn!("n_probes {n_probes} exceeds {} candidate parameters; clamped", indices.len());
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed.wrapping_add(17));
        indices = index::sample(&mut rng, indices.len(), n_probes).into_iter().map(|k| indices[k]).collect();
        indices.sort_unstable();
    }

    let base = state.flatten();
    let mut probes = Vec::with_capacity(indices.len());
    let mut probe_state = state.clone();
    for idx in indices {
        let mut eval_at = |delta: f64| {
            let mut flat = base.clone();
            flat[idx] += delta;
            probe_state.load_flat(&flat);
            objective_at(problem, &probe_state, cfg, &plan)
        };
        let numeric = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
        let analytic = gradient[idx];
        let entry = spec.catalog.iter().rev().find(|e| e.offset <= idx).expect("catalog covers index");
        probes.push(Probe { name: entry.name, index: idx - entry.offset, analytic, numeric, rel_error: rel_error(analytic, numeric) });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, init_encoder};
    use crate::hetgraph::{generate_synthetic, SyntheticSpec};

    fn tiny_graph(seed: u64) -> HetGraph {
        generate_synthetic(&SyntheticSpec {
            n_target: 12,
            num_classes: 2,
            feature_dim: 6,
            n_aux: 4,
            het_degree: 2,
            p_in: 0.5,
            p_out: 0.1,
            train_per_class: 3,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TuneConfig {
        let mut cfg = TuneConfig::default();
        cfg.adapter.t = 2;
        cfg.adapter.t_het = 2;
        cfg.adapter.k = 3;
        cfg.objective.lambda = 0.5;
        cfg.objective.eta = 0.1;
        cfg.objective.mu = 0.2;
        cfg.trainer.epochs = 5;
        cfg
    }

    fn reps(g: &HetGraph, seed: u64) -> FrozenReps {
        encode(g, &init_encoder(g, 8, seed).unwrap().freeze()).unwrap()
    }

    #[test]
    fn catalog_covers_state() {
        let g = tiny_graph(0);
        let r = reps(&g, 0);
        let p = Problem::new(&g, &r).unwrap();
        let s = p.init_state(&tiny_cfg()).unwrap();
        let cat = catalog(&s);
        assert_eq!(cat.len(), 8);
        let last = cat.last().unwrap();
        assert_eq!(last.offset + last.rows * last.cols, s.param_count());
        assert!(lookup(&cat, "w_hom").is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let g = tiny_graph(seed);
            let r = reps(&g, seed);
            let p = Problem::new(&g, &r).unwrap();
            let mut cfg = tiny_cfg();
            cfg.trainer.seed = seed;
            let s = gradcheck_state(&p, &cfg).unwrap();
            let report = grad_check(&p, &s, &cfg, usize::MAX, None, false).unwrap();
            assert_eq!(report.probes.len(), s.param_count());
            // every entry: relative agreement, or absolute agreement at the
            // roundoff level of a central difference with step 1e-5
            for pr in &report.probes {
                assert!(pr.rel_error < 1e-4 || (pr.analytic - pr.numeric).abs() < 1e-9, "seed {seed}: {pr:?}");
            }
        }
    }

    #[test]
    fn infonce_variant_gradient_matches() {
        let g = tiny_graph(4);
        let r = reps(&g, 4);
        let p = Problem::new(&g, &r).unwrap();
        let mut cfg = tiny_cfg();
        cfg.objective.margin_variant = MarginVariant::Infonce;
        let s = gradcheck_state(&p, &cfg).unwrap();
        assert!(grad_check(&p, &s, &cfg, 60, None, false).unwrap().max_rel_error < 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let g = tiny_graph(0);
        let r = reps(&g, 0);
        let p = Problem::new(&g, &r).unwrap();
        let cfg = tiny_cfg();
        let s = gradcheck_state(&p, &cfg).unwrap();
        assert!(grad_check(&p, &s, &cfg, 20, None, true).unwrap().max_rel_error > 1e-4);
        assert!(matches!(grad_check(&p, &s, &cfg, 5, Some(&["w_het"]), false), Err(Error::NotInCatalog(_))));
        // clamped
        let rep = grad_check(&p, &s, &cfg, 10_000, Some(&["w_eps"]), false).unwrap();
        assert_eq!(rep.probes.len(), 8);
    }

    #[test]
    fn w_eps_gradient_vanishes_without_het_residual() {
        let g = tiny_graph(1);
        let r = reps(&g, 1);
        let p = Problem::new(&g, &r).unwrap();
        let mut cfg = tiny_cfg();
        cfg.adapter.beta = 0.0;
        cfg.objective.mu = 0.0;
        let s = gradcheck_state(&p, &cfg).unwrap();
        let (_, spec, _) = grad(&p, &s, &cfg, 1).unwrap();
        let e = lookup(&spec.catalog, "w_eps").unwrap();
        assert!(spec.gradient[e.offset..e.offset + e.rows].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_epochs_and_zero_lr() {
        let g = tiny_graph(2);
        let r = reps(&g, 2);
        let p = Problem::new(&g, &r).unwrap();
        let mut cfg = tiny_cfg();
        let init = p.init_state(&cfg).unwrap();
        cfg.trainer.epochs = 0;
        let (s, h) = tune(&p, &cfg).unwrap();
        assert_eq!(s, init);
        assert!(h.records.is_empty());
        cfg.trainer.epochs = 4;
        cfg.trainer.lr = 0.0;
        let (s, h) = tune(&p, &cfg).unwrap();
        assert_eq!(s, init);
        assert_eq!(h.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn tuning_is_deterministic() {
        let g = tiny_graph(3);
        let r = reps(&g, 3);
        let p = Problem::new(&g, &r).unwrap();
        let mut cfg = tiny_cfg();
        cfg.trainer.epochs = 15;
        cfg.objective.rec_sample = Some(5);
        cfg.trainer.structure_refresh = 3;
        let (s1, h1) = tune(&p, &cfg).unwrap();
        let (s2, h2) = tune(&p, &cfg).unwrap();
        assert_eq!(s1.to_bytes(), s2.to_bytes());
        assert_eq!(h1, h2);
    }

    #[test]
    fn test_labels_do_not_affect_objective() {
        let g = tiny_graph(5);
        let r = reps(&g, 5);
        let cfg = tiny_cfg();
        let p1 = Problem::new(&g, &r).unwrap();
        let mut p2 = p1.clone();
        // permute ground truth on the test split
        let test = p2.test.clone();
        let vals: Vec<_> = test.iter().map(|&i| p2.truth[i]).collect();
        for (k, &i) in test.iter().enumerate() {
            p2.truth[i] = vals[(k + 1) % vals.len()];
        }
        let s = gradcheck_state(&p1, &cfg).unwrap();
        let (j1, g1, _) = grad(&p1, &s, &cfg, 1).unwrap();
        let (j2, g2, _) = grad(&p2, &s, &cfg, 1).unwrap();
        assert_eq!(j1.to_bits(), j2.to_bits());
        assert_eq!(g1, g2);
    }

    /// With lambda = eta = mu = 0 the objective is the labeled-only
    /// contrastive loss; rebuild it by hand from the forward outputs.
    #[test]
    fn supervised_reduction_matches_reference() {
        let g = tiny_graph(6);
        let r = reps(&g, 6);
        let p = Problem::new(&g, &r).unwrap();
        let mut cfg = tiny_cfg();
        cfg.objective.lambda = 0.0;
        cfg.objective.eta = 0.0;
        cfg.objective.mu = 0.0;
        let s = gradcheck_state(&p, &cfg).unwrap();
        let (j, spec, _) = grad(&p, &s, &cfg, 1).unwrap();

        let mut tape = Tape::new();
        let pv = s.to_tape(&mut tape, true);
        let rv = RepVars::push(&mut tape, &r, s.dims.d_out);
        let fwd = adapters::forward(&mut tape, &rv, &pv, s.alpha, s.beta, cfg.adapter.k, None);
        let rows: Vec<ContrastRow> = p.train.iter().map(|&i| ContrastRow { node: i, class: p.truth[i].unwrap(), weight: 1.0 }).collect();
        let avg = tape.constant(p.avg.clone());
        let loss = objective::tape_contrastive(&mut tape, fwd.p, avg, rows.into(), cfg.objective.tau);
        assert!((tape.scalar(loss) - j).abs() < 1e-12);
        let grads = tape.backward(loss);
        let mut flat = Vec::new();
        for (v, t) in pv.all().into_iter().zip(s.tensors()) {
            match grads.wrt(v) {
                Some(g) => flat.extend(g.iter().copied()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        for (a, b) in flat.iter().zip(&spec.gradient) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_bytes_untouched() {
        let g = tiny_graph(7);
        let enc = init_encoder(&g, 8, 7).unwrap().freeze();
        let before = enc.to_bytes();
        let r = encode(&g, &enc).unwrap();
        let p = Problem::new(&g, &r).unwrap();
        tune(&p, &tiny_cfg()).unwrap();
        assert_eq!(enc.to_bytes(), before);
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        let h = TrainHistory {
            records: vec![EpochRecord { epoch: 1, l_con: 1.0, l_rec: 2.0, l_mar: 0.0, j: 3.0, train_err: 0.0, test_err: 0.5, homophily: 0.75, wall_ms: 0 }],
        };
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,l_con,l_rec,l_mar,j,train_err,test_err,homophily,wall_ms");
        assert_eq!(text.lines().nth(1).unwrap(), "1,1.0,2.0,0.0,3.0,0.0,0.5,0.75,0");
    }
}
