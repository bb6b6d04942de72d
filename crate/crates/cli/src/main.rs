use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lgu_core::autodiff::{load_checkpoint, save_checkpoint, ParamStore, Tape};
use lgu_core::bench::{run_bench, BenchOptions};
use lgu_core::config::RunConfig;
use lgu_core::error::{Error, Result};
use lgu_core::gaussian::build_mask;
use lgu_core::geometry::generate_scene;
use lgu_core::gradcheck::run_gradcheck;
use lgu_core::model::Model;
use lgu_core::tensor::{save_tensor, DType, Tensor};
use lgu_core::train::{corpus_splits, evaluate, train, TrainOptions};

#[derive(Parser)]
#[command(name = "lgu", version, about = "Gradient checks, benchmarks, toy training and demo dumps")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Copy, Default)]
struct Toggles {
    #[arg(long)]
    no_lgu: bool,
    #[arg(long)]
    no_deform: bool,
    #[arg(long)]
    no_kan: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Finite-difference check of every differentiable op and the composed pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Runtime scaling of the materialized and on-the-fly correlation paths.
    Bench {
        /// Square sides, comma separated; defaults to the config ladder.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Adam training on the synthetic corpus; evaluates before and after, saves checkpoints.
    Train {
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dumps mask fields, gates, offsets and per-iteration flow for one scene.
    Demo {
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out EPE of a checkpoint (or of the untrained model).
    Eval {
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Writes every record to stdout and to `<out>/<command>.jsonl`.
struct Reporter {
    file: Option<BufWriter<File>>,
}

impl Reporter {
    fn new(out: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(format!("{name}.jsonl"));
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Reporter {
            file: Some(BufWriter::new(f)),
        })
    }

    fn emit(&mut self, rec: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(io::stdout().lock(), "{line}").map_err(|e| Error::io("stdout", e))?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io("report", e))?;
        }
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Oracle(_) => 2,
        Error::Config(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli, toggles: Option<Toggles>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = toggles {
        cfg.no_lgu |= t.no_lgu;
        cfg.no_deform |= t.no_deform;
        cfg.no_kan |= t.no_kan;
    }
    if let Ok(v) = std::env::var("LGU_DTYPE") {
        cfg.dtype = v.parse::<DType>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the model and, when given, replaces its parameters with a checkpoint
/// whose names and shapes must match exactly.
fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new(cfg.seed);
    let model = Model::new(&mut store, cfg.seed, cfg.model_config())?;
    let Some(dir) = checkpoint else {
        return Ok((model, store));
    };
    let loaded = load_checkpoint(dir)?;
    if loaded.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (a, b) in store.ids().zip(loaded.ids()) {
        if store.name(a) != loaded.name(b) || store.value(a).shape() != loaded.value(b).shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                loaded.name(b),
                loaded.value(b).shape(),
                store.name(a),
                store.value(a).shape()
            )));
        }
    }
    Ok((model, loaded))
}

fn cmd_gradcheck(cfg: &RunConfig, seeds: usize, filter: Option<&str>) -> Result<()> {
    let mut rep = Reporter::new(&cfg.out_dir, "gradcheck")?;
    let mut io_err = None;
    let recs = run_gradcheck(seeds, cfg.seed, filter, |r| {
        if let Err(e) = rep.emit(r) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    if recs.is_empty() {
        return Err(Error::Config(format!("no gradcheck case matches {filter:?}")));
    }
    let failed = recs.iter().filter(|r| !r.passed).count();
    rep.emit(&json!({"summary": "gradcheck", "checks": recs.len(), "failed": failed}))?;
    if failed > 0 {
        return Err(Error::Oracle(format!("{failed} of {} checks out of tolerance", recs.len())));
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, sizes: Option<Vec<usize>>, reps: Option<usize>) -> Result<()> {
    let mut rep = Reporter::new(&cfg.out_dir, "bench")?;
    let opts = BenchOptions {
        sizes: sizes.unwrap_or_else(|| cfg.bench_sizes.clone()),
        channels: cfg.channels,
        r: cfg.radius,
        reps: reps.unwrap_or(cfg.bench_reps),
        seed: cfg.seed,
    };
    let mut io_err = None;
    let (_, summary) = run_bench(&opts, |r| {
        if let Err(e) = rep.emit(r) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    rep.emit(&summary)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut rep = Reporter::new(&cfg.out_dir, "train")?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let (corpus, heldout) = corpus_splits(cfg)?;
    let (model, mut store) = load_model(cfg, None)?;
    let opts = TrainOptions::from_config(cfg);
    let before = evaluate(&model, &store, &heldout, cfg.ablation(), cfg.dtype)?;
    rep.emit(&json!({"eval": "untrained", "mean_epe": before.mean_epe, "zero_flow_epe": before.zero_flow_epe}))?;
    let mut io_err = None;
    train(&model, &mut store, &corpus, &opts, |r| {
        if let Err(e) = rep.emit(r) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    save_checkpoint(&store, cfg.out_dir.join("checkpoint_final"))?;
    let after = evaluate(&model, &store, &heldout, cfg.ablation(), cfg.dtype)?;
    rep.emit(&json!({"eval": "trained", "mean_epe": after.mean_epe, "zero_flow_epe": after.zero_flow_epe}))
}

fn cmd_demo(cfg: &RunConfig, scene_seed: u64, checkpoint: Option<&Path>) -> Result<()> {
    let mut rep = Reporter::new(&cfg.out_dir, "demo")?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let scene = generate_scene(&cfg.scene_config(), scene_seed)?;
    let dir = cfg.out_dir.join(format!("demo_scene_{scene_seed}"));
    scene.export(dir.join("scene"))?;
    let mut tape = Tape::new();
    let fw = model.forward(&mut tape, &store, &scene.f_i, &scene.f_j, cfg.ablation())?;
    let mut dumps: Vec<(String, Tensor)> = Vec::new();
    if let (Some(mu), Some(c)) = (fw.e_mu, fw.e_c) {
        let (mu, c) = (tape.value(mu).clone(), tape.value(c).clone());
        let mask = build_mask(&mu, &c, model.cfg.mask)?;
        dumps.push(("e_mu".into(), mu));
        dumps.push(("e_c".into(), c));
        dumps.push(("mask_windows".into(), mask.values));
    }
    for (t, &g) in fw.gates.iter().enumerate() {
        dumps.push((format!("gate_iter{t}"), tape.value(g).clone()));
    }
    for (l, &o) in fw.offsets.iter().enumerate() {
        dumps.push((format!("offsets_level{l}"), tape.value(o).clone()));
    }
    for (t, &f) in fw.flows.iter().enumerate() {
        dumps.push((format!("flow_iter{t}"), tape.value(f).clone()));
    }
    for (name, t) in &dumps {
        let path = dir.join(format!("{name}.lgut"));
        save_tensor(t, &path)?;
        rep.emit(&json!({"tensor": name, "path": path, "shape": t.shape()}))?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let mut rep = Reporter::new(&cfg.out_dir, "eval")?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let (_, heldout) = corpus_splits(cfg)?;
    let report = evaluate(&model, &store, &heldout, cfg.ablation(), cfg.dtype)?;
    rep.emit(&report)
}

fn run(cli: Cli) -> Result<()> {
    let toggles = match &cli.cmd {
        Cmd::Train { toggles, .. } | Cmd::Eval { toggles, .. } => Some(*toggles),
        _ => None,
    };
    let mut cfg = resolve_config(&cli, toggles)?;
    if let Cmd::Train { steps: Some(s), .. } = cli.cmd {
        cfg.steps = s;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("dtype {} threads {} seed {}", cfg.dtype, cfg.threads, cfg.seed);
    match cli.cmd {
        Cmd::Gradcheck { seeds, ref filter } => cmd_gradcheck(&cfg, seeds, filter.as_deref()),
        Cmd::Bench { sizes, reps } => cmd_bench(&cfg, sizes, reps),
        Cmd::Train { .. } => cmd_train(&cfg),
        Cmd::Demo { scene_seed, ref checkpoint } => cmd_demo(&cfg, scene_seed, checkpoint.as_deref()),
        Cmd::Eval { ref checkpoint, .. } => cmd_eval(&cfg, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "lgu: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
