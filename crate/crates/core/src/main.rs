use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use unbuild::config::{ExperimentConfig, TaskKind};
use unbuild::experiment::{find_instance, run_steps_table, train_value};
use unbuild::heatmap::{build_dpi, DpiWriter};
use unbuild::io::{f32_le_bytes, write_tensor, write_text, Meta, TensorSidecar, TENSOR_SCHEMA_VERSION};
use unbuild::protocol::{run_oracle, serve, EvalSession};
use unbuild::render::{render, Camera, Phase};
use unbuild::search::{sample_episode, Method};
use unbuild::unmake::build_dmu;
use unbuild::value::{StateValue, ValueNet};
use unbuild::world::M_MAX;
use unbuild::WorldState;

#[derive(Parser)]
#[command(name = "unbuild", version, about = "Learn to assemble block shape categories by disassembling them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Arch height in U.
    #[arg(long)]
    height: Option<u8>,
    /// Arch heights for multi-height tasks, comma separated.
    #[arg(long, value_delimiter = ',')]
    heights: Option<Vec<u8>>,
    /// Tower cube count.
    #[arg(long)]
    cubes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Arch,
    MultiHeight,
    Tower,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pick,
    Place,
}

#[derive(Subcommand)]
enum Command {
    /// List the instances of a category.
    Enumerate(Common),
    /// Disassemble instances into the assembly dataset (JSONL).
    Unmake {
        #[command(flatten)]
        common: Common,
        /// Instance id; all instances when omitted.
        #[arg(long)]
        instance: Option<String>,
    },
    /// Run the value-learning loop and save the network.
    TrainValue {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instance: Option<String>,
    },
    /// Compare steps-to-build across methods.
    StepsTable {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "random,mcts,ours,oracle")]
        methods: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Trained value network; trained per height when omitted.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Render observations and heatmaps into a policy dataset directory.
    GenPolicyData(Common),
    /// Render one observation of a state.
    Render {
        #[command(flatten)]
        common: Common,
        /// State JSON; a scattered episode start when omitted.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "pick")]
        phase: PhaseArg,
        #[arg(long)]
        held: Option<u32>,
    },
    /// Serve closed-loop evaluation episodes over stdin/stdout.
    ServeEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Closed loop driven by ground-truth heatmaps.
    EvalOraclePolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] unbuild::config::ConfigError),
    #[error(transparent)]
    Experiment(#[from] unbuild::experiment::ExperimentError),
    #[error(transparent)]
    Shape(#[from] unbuild::shapes::ShapeError),
    #[error(transparent)]
    Unmake(#[from] unbuild::unmake::UnmakeError),
    #[error(transparent)]
    Net(#[from] unbuild::value::NetError),
    #[error(transparent)]
    Heatmap(#[from] unbuild::heatmap::HeatmapError),
    #[error(transparent)]
    Protocol(#[from] unbuild::protocol::ProtocolError),
    #[error(transparent)]
    Render(#[from] unbuild::render::RenderError),
    #[error(transparent)]
    World(#[from] unbuild::WorldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Experiment(_) => "experiment",
            CliError::Shape(_) => "shape",
            CliError::Unmake(_) => "unmake",
            CliError::Net(_) => "value_net",
            CliError::Heatmap(_) => "heatmap",
            CliError::Protocol(_) => "protocol",
            CliError::Render(_) => "render",
            CliError::World(_) => "world",
            CliError::Io(_) => "io",
        }
    }
}

fn resolve(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.task {
        cfg.task.kind = match t {
            TaskArg::Arch => TaskKind::Arch,
            TaskArg::MultiHeight => TaskKind::MultiHeight,
            TaskArg::Tower => TaskKind::Tower,
        };
    }
    if let Some(h) = c.height {
        cfg.task.height = h;
    }
    if let Some(h) = &c.heights {
        cfg.task.heights = h.clone();
    }
    if let Some(n) = c.cubes {
        cfg.task.n_cubes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, name: &str) -> Result<PathBuf, CliError> {
    let d = c.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

fn meta(cfg: &ExperimentConfig) -> Meta {
    Meta::new(cfg.hash(), cfg.seed)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("json") + "\n"))?;
    Ok(())
}

fn eval_steps(cfg: &ExperimentConfig) -> usize {
    if cfg.eval.max_steps == 0 {
        2 * M_MAX
    } else {
        cfg.eval.max_steps
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Enumerate(c) => {
            let cfg = resolve(&c)?;
            let cat = cfg.task.category()?;
            let ids: Vec<String> = cat.instances().into_iter().map(|i| i.id).collect();
            let report = json!({
                "category": cat.label(),
                "count": ids.len(),
                "instances": ids,
                "meta": meta(&cfg),
            });
            match &c.out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("json")),
            }
        }
        Command::Unmake { common, instance } => {
            let cfg = resolve(&common)?;
            let cat = cfg.task.category()?;
            let insts = match instance {
                Some(id) => vec![find_instance(&cat, &id)?],
                None => cat.instances(),
            };
            let dmu = build_dmu(&insts, &cat, cfg.policy_data.paths_per_instance, &cfg.unmake_config(), cfg.seed)?;
            let dir = out_dir(&common, "unmake")?;
            write_text(&dir.join("dmu.jsonl"), &dmu.to_jsonl(&meta(&cfg)))?;
            eprintln!("{} entries", dmu.len());
        }
        Command::TrainValue { common, instance } => {
            let cfg = resolve(&common)?;
            let cat = cfg.task.category()?;
            let input = instance.map(|id| find_instance(&cat, &id)).transpose()?;
            let dir = out_dir(&common, "train-value")?;
            let mut rounds = String::new();
            let outcome = train_value(&cat, input.as_ref().map(std::slice::from_ref), &cfg, cfg.seed, |m| {
                eprintln!("round {}: {} instances, {} pairs, mse {:.3e}", m.round, m.instances, m.dataset_size, m.final_mse);
                let mut v = serde_json::to_value(m).expect("metrics serialize");
                v["meta"] = serde_json::to_value(meta(&cfg)).expect("meta");
                rounds.push_str(&(v.to_string() + "\n"));
            })?;
            outcome.net.save(&dir.join("value_net.ubvn"))?;
            write_text(&dir.join("metrics.jsonl"), &rounds)?;
            let ids: Vec<&str> = outcome.instances.iter().map(|i| i.id.as_str()).collect();
            write_json(&dir.join("instances.json"), &json!({ "instances": ids, "meta": meta(&cfg) }))?;
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
        }
        Command::StepsTable { common, methods, episodes, net } => {
            let cfg = resolve(&common)?;
            let methods = methods
                .iter()
                .map(|m| Method::parse(m).ok_or_else(|| CliError::Usage(format!("unknown method {m}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let loaded = net.map(|p| ValueNet::load(&p)).transpose()?;
            let heights = common.heights.clone().unwrap_or_else(|| vec![cfg.task.height]);
            let episodes = episodes.unwrap_or(cfg.search.episodes);
            let dir = out_dir(&common, "steps-table")?;
            let table = run_steps_table(
                &cfg,
                &heights,
                &methods,
                episodes,
                loaded.as_ref().map(|n| n as &dyn StateValue),
                cfg.seed,
                |c| eprintln!("{}U {}: mean {:.1} ({}/{} solved)", c.height, c.method.name(), c.mean, c.successes, c.episodes),
            )?;
            let csv = table.to_csv();
            write_text(&dir.join("steps_table.csv"), &csv)?;
            write_json(&dir.join("steps_table.json"), &json!({ "cells": table.cells, "meta": meta(&cfg) }))?;
            print!("{csv}");
        }
        Command::GenPolicyData(c) => {
            let cfg = resolve(&c)?;
            let cat = cfg.task.category()?;
            let insts = cat.instances();
            let dmu = build_dmu(&insts, &cat, cfg.policy_data.paths_per_instance, &cfg.unmake_config(), cfg.seed)?;
            let ws = std::sync::Arc::new(cat.workspace());
            let goals = insts.iter().map(|i| i.instantiate(ws.clone())).collect::<Result<Vec<_>, _>>()?;
            let camera = Camera::from_config(&cfg.camera);
            let dir = out_dir(&c, "policy-data")?;
            let mut w = DpiWriter::create(&dir, meta(&cfg), &camera)?;
            build_dpi(
                &dmu,
                &goals,
                &camera,
                &cfg.heatmap,
                &cfg.augment,
                cfg.policy_data.perturbations_per_state,
                cfg.seed,
                &mut |s| w.write(s),
            )?;
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
            eprintln!("{} samples", w.count());
        }
        Command::Render { common, state, phase, held } => {
            let cfg = resolve(&common)?;
            let cat = cfg.task.category()?;
            let s = match state {
                Some(p) => WorldState::from_json(&std::fs::read_to_string(p)?)?,
                None => sample_episode(&cat, cfg.seed),
            };
            let phase = match phase {
                PhaseArg::Pick => Phase::Pick,
                PhaseArg::Place => Phase::Place,
            };
            let camera = Camera::from_config(&cfg.camera);
            let obs = render(&s, phase, held, &camera)?;
            let dir = out_dir(&common, "render")?;
            let side = |dtype: &str| TensorSidecar {
                schema_version: TENSOR_SCHEMA_VERSION,
                shape: vec![obs.height, obs.width],
                dtype: dtype.into(),
                camera: Some(serde_json::to_value(&camera).expect("camera")),
                meta: meta(&cfg),
            };
            write_tensor(&dir.join("depth.f32"), &f32_le_bytes(&obs.depth), &side("float32"))?;
            write_tensor(&dir.join("seg.u8"), &obs.segmentation, &side("uint8"))?;
        }
        Command::ServeEval { common, episodes } => {
            let cfg = resolve(&common)?;
            let dir = out_dir(&common, "serve-eval")?;
            let mut session = EvalSession::new(
                cfg.task.category()?,
                Camera::from_config(&cfg.camera),
                episodes.unwrap_or(cfg.eval.episodes),
                eval_steps(&cfg),
                cfg.seed,
                &dir.join("obs"),
                meta(&cfg),
            )?;
            let stdin = std::io::stdin();
            let summary = serve(&mut session, BufReader::new(stdin.lock()), std::io::stdout().lock())?;
            write_json(&dir.join("eval_report.json"), &serde_json::to_value(&summary).expect("summary"))?;
        }
        Command::EvalOraclePolicy { common, episodes } => {
            let cfg = resolve(&common)?;
            let dir = out_dir(&common, "eval-oracle-policy")?;
            let mut session = EvalSession::new(
                cfg.task.category()?,
                Camera::from_config(&cfg.camera),
                episodes.unwrap_or(cfg.eval.episodes),
                eval_steps(&cfg),
                cfg.seed,
                &dir.join("obs"),
                meta(&cfg),
            )?;
            let summary = run_oracle(&mut session, &cfg.heatmap)?;
            let v = serde_json::to_value(&summary).expect("summary");
            write_json(&dir.join("eval_report.json"), &v)?;
            println!("{}", json!({ "success_rate": summary.success_rate, "mean_steps": summary.mean_steps, "episodes": summary.episodes }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
