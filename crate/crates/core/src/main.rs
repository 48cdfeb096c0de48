use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;
use serde_json::json;

use hga_core::adapters::{self, AdapterState};
use hga_core::config::RunConfig;
use hga_core::error::{Error, Result};
use hga_core::eval;
use hga_core::hetgraph::{generate_synthetic, save_graph, SyntheticSpec};
use hga_core::pipeline;
use hga_core::tape::Mat;
use hga_core::trainer::{self, Problem, TrainHistory};

/// Adapter tuning for frozen heterogeneous graph encoders.
#[derive(Parser)]
#[command(name = "hga", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the encoder and trainer seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    structure_refresh: Option<usize>,
    #[arg(long)]
    rec_sample: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a generator spec.
    Gen {
        /// Generator spec (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the encoder.
    Pretrain(Common),
    /// Tune adapters, then evaluate.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Also write the learned structures and fused representations.
        #[arg(long)]
        export: bool,
    },
    /// Evaluate a saved adapter.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Defaults to the built-in tiny reference instance.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        /// Negative control: perturbs the analytic gradient.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e @ Error::Diverged { .. }) => {
            error!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(t) = common.structure_refresh {
        cfg.trainer.structure_refresh = t;
    }
    if common.rec_sample.is_some() {
        cfg.objective.rec_sample = common.rec_sample;
    }
    cfg.validate()?;
    let out = common.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("hga-out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.out_dir = Some(out.clone());
    write_json(&out.join("config.json"), &cfg)?;
    Ok((cfg, out))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    history.write_csv(file)
}

fn run(cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::Gen { config, seed, out } => {
            if !config.is_file() {
                return Err(Error::MissingFile(config));
            }
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut spec: SyntheticSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let graph = generate_synthetic(&spec)?;
            save_graph(&graph, &out)?;
            write_json(&out.join("generator.json"), &spec)?;
            info!("wrote {} target nodes to {}", graph.n_target(), out.display());
        }
        Cmd::Pretrain(common) => {
            let (cfg, out) = resolve(&common)?;
            let graph = pipeline::load_dataset(&cfg)?;
            let params = pipeline::prepare_encoder(&graph, &cfg)?;
            params.save(&out.join("encoder.bin"))?;
        }
        Cmd::Tune { common, export } => {
            let (cfg, out) = resolve(&common)?;
            let graph = pipeline::load_dataset(&cfg)?;
            let (_, reps) = pipeline::frozen_reps(&graph, &cfg)?;
            let problem = Problem::new(&graph, &reps)?;
            let tc = cfg.tune_config();
            let init = problem.init_state(&tc)?;
            let mut seen = TrainHistory::default();
            let result = trainer::tune_from(&problem, init, &tc, &mut |v| seen.records.push(*v.record));
            let (state, history) = match result {
                Ok(r) => r,
                Err(e) => {
                    write_history(&out.join("history.csv"), &seen)?;
                    return Err(e);
                }
            };
            write_history(&out.join("history.csv"), &history)?;
            state.save(&out.join("adapter.bin"))?;
            let report = eval::evaluate(&problem, &state, &tc)?;
            write_json(&out.join("metrics.json"), &json!({"config": cfg, "seed": tc.trainer.seed, "metrics": report}))?;
            if export {
                export_structures(&out, &reps, &state, tc.adapter.k)?;
            }
            info!("macro_f1={:.4} micro_f1={:.4} test_err={:.4}", report.macro_f1, report.micro_f1, report.test_error);
        }
        Cmd::Eval { common, checkpoint } => {
            let (cfg, out) = resolve(&common)?;
            let graph = pipeline::load_dataset(&cfg)?;
            let (_, reps) = pipeline::frozen_reps(&graph, &cfg)?;
            let problem = Problem::new(&graph, &reps)?;
            let state = AdapterState::load(&checkpoint)?;
            let tc = cfg.tune_config();
            let report = eval::evaluate(&problem, &state, &tc)?;
            write_json(&out.join("metrics.json"), &json!({"config": cfg, "seed": tc.trainer.seed, "metrics": report}))?;
        }
        Cmd::Ablate { common, grid, jobs } => {
            let (cfg, out) = resolve(&common)?;
            if !grid.is_file() {
                return Err(Error::MissingFile(grid));
            }
            let text = fs::read_to_string(&grid).map_err(|e| Error::io(&grid, e))?;
            let cells = eval::parse_grid(&text)?;
            let graph = pipeline::load_dataset(&cfg)?;
            let (_, reps) = pipeline::frozen_reps(&graph, &cfg)?;
            let rows = eval::ablate(&graph, &reps, &cfg.tune_config(), &cells, jobs)?;
            let path = out.join("ablation.csv");
            eval::write_ablation_csv(&rows, fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
            write_json(&out.join("ablation.json"), &json!({"config": cfg, "seed": cfg.trainer.seed, "rows": rows}))?;
        }
        Cmd::Gradcheck { config, seed, probes, corrupt_gradient } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => pipeline::tiny_reference_config(),
            };
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            cfg.validate()?;
            let graph = pipeline::load_dataset(&cfg)?;
            let (_, reps) = pipeline::frozen_reps(&graph, &cfg)?;
            let problem = Problem::new(&graph, &reps)?;
            let tc = cfg.tune_config();
            let state = trainer::gradcheck_state(&problem, &tc)?;
            let report = trainer::grad_check(&problem, &state, &tc, probes, None, corrupt_gradient)?;
            let pass = report.max_rel_error < 1e-4;
            println!("{}", json!({"max_rel_error": report.max_rel_error, "probes": report.probes.len(), "pass": pass}));
            if !pass {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn write_matrix(path: &Path, header: &[String], m: &Mat) -> Result<()> {
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|x| format!("{x:?}"))).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn export_structures(out: &Path, reps: &hga_core::encoder::FrozenReps, state: &AdapterState, k: usize) -> Result<()> {
    let fwd = adapters::predict(reps, state, k);
    let path = out.join("A.csv");
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["row", "col", "weight"]).map_err(err)?;
    for &(i, j, v) in fwd.structures.a.triplets() {
        w.write_record([i.to_string(), j.to_string(), format!("{v:?}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_matrix(&out.join("S.csv"), &reps.relation_names, &fwd.structures.s.s)?;
    let zh: Vec<String> = (0..fwd.z.ncols()).map(|c| format!("z{c}")).collect();
    write_matrix(&out.join("Z.csv"), &zh, &fwd.z)
}
