//! Command-line front end.
//!
//! Five subcommands wire the pipeline together: `gen-data` samples
//! transition datasets from a map, `train-encoder` fits the footprint
//! autoencoder, `fit` calibrates a pipeline bundle, `eval-coverage` scores a
//! bundle against held-out test cases, and `plan` runs closed-loop episodes.
//!
//! Every tunable lives under a dotted configuration key (`sensor.fov`,
//! `planner.horizon`, ...). A `--config FILE` of `key=value` lines supplies
//! defaults, `--set key=value` overrides from the command line, and the
//! handful of conventional per-command flags (`--seed`, `--epochs`,
//! `--alpha`, ...) are aliases for specific keys and take precedence over
//! both. Unknown keys are rejected everywhere. Exit codes: 0 on success, 2
//! for usage/configuration/I-O problems, 3 for malformed or mismatched
//! artifacts.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::conformal::{
    fit_pipeline, load_pipeline, save_pipeline, PipelineSpec, Variant, DEFAULT_SPLIT_SEED,
};
use crate::dataset::{
    generate_calibration, generate_testcases, load_dataset, load_particles, merge_datasets,
    save_dataset, save_particles, GridSpec, TestCase,
};
use crate::dynamics::DynamicsParams;
use crate::encoder::EncoderModel;
use crate::encoder::train::{train_cae, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{episode_summary_csv, evaluate_pipeline, summarize_episodes};
use crate::planner::{
    apply_planner_override, load_episode_spec, run_episode, write_trace_csv, PlannerConfig,
};
use crate::render::render_episode;
use crate::sensor::SensorParams;
use crate::tree::TreeConfig;
use crate::world::GridMap;

/// Every configuration key, grouped by the module it configures. The config
/// file, `--set`, and the per-command alias flags all resolve into this one
/// namespace.
pub const CONFIG_KEYS: &[&str] = &[
    "dynamics.dt",
    "dynamics.q_scale",
    "dynamics.shift_factor",
    "dynamics.a_max",
    "sensor.fov",
    "sensor.max_range",
    "sensor.n_angles",
    "sensor.n_depths",
    "grid.n_px",
    "grid.n_py",
    "grid.n_v",
    "grid.n_a",
    "data.seed",
    "data.n_particles",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "tree.max_depth",
    "tree.min_samples_leaf",
    "tree.min_samples_split",
    "conformal.alpha",
    "conformal.split_seed",
    "planner.horizon",
    "planner.n_samples",
    "planner.lambda",
    "planner.noise_sd",
    "planner.c_dist_run",
    "planner.c_dist_term",
    "planner.c_trace_run",
    "planner.c_col",
    "planner.max_steps",
    "planner.require_viewed",
    "planner.seed",
    "planner.built_cell_size",
    "planner.contact_radius",
];

pub fn is_known_key(key: &str) -> bool {
    CONFIG_KEYS.contains(&key)
}

/// The help appendix listing the full key namespace.
pub fn config_keys_help() -> String {
    let mut out = String::from(
        "Configuration keys (config file `key=value` lines, or `--set key=value`):\n",
    );
    for key in CONFIG_KEYS {
        out.push_str("  ");
        out.push_str(key);
        out.push('\n');
    }
    out
}

/// Resolved key=value settings: file values overlaid by command-line ones.
#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: HashMap<String, String>,
}

impl Settings {
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.assign(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known_key(key) {
            return Err(Error::Config(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn assign_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{pair}'"))
        })?;
        self.assign(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(is_known_key(key), "unlisted key '{key}'");
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{raw}' for {key}"))),
        }
    }

    pub fn dynamics(&self) -> Result<DynamicsParams> {
        let d = DynamicsParams::default();
        Ok(DynamicsParams {
            dt: self.parse("dynamics.dt", d.dt)?,
            q_scale: self.parse("dynamics.q_scale", d.q_scale)?,
            shift_factor: self.parse("dynamics.shift_factor", d.shift_factor)?,
            a_max: self.parse("dynamics.a_max", d.a_max)?,
        })
    }

    pub fn sensor(&self) -> Result<SensorParams> {
        let d = SensorParams::default();
        let s = SensorParams {
            fov: self.parse("sensor.fov", d.fov)?,
            max_range: self.parse("sensor.max_range", d.max_range)?,
            n_angles: self.parse("sensor.n_angles", d.n_angles)?,
            n_depths: self.parse("sensor.n_depths", d.n_depths)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn grid(&self, base: GridSpec) -> Result<GridSpec> {
        let g = GridSpec {
            n_px: self.parse("grid.n_px", base.n_px)?,
            n_py: self.parse("grid.n_py", base.n_py)?,
            n_v: self.parse("grid.n_v", base.n_v)?,
            n_a: self.parse("grid.n_a", base.n_a)?,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn tree(&self) -> Result<TreeConfig> {
        let d = TreeConfig::default();
        let t = TreeConfig {
            max_depth: self.parse("tree.max_depth", d.max_depth)?,
            min_samples_leaf: self.parse("tree.min_samples_leaf", d.min_samples_leaf)?,
            min_samples_split: self.parse("tree.min_samples_split", d.min_samples_split)?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = TrainConfig {
            learning_rate: self.parse("train.learning_rate", d.learning_rate)?,
            batch_size: self.parse("train.batch_size", d.batch_size)?,
            epochs: self.parse("train.epochs", d.epochs)?,
            beta1: self.parse("train.beta1", d.beta1)?,
            beta2: self.parse("train.beta2", d.beta2)?,
            eps: self.parse("train.eps", d.eps)?,
            seed: self.parse("train.seed", d.seed)?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn planner(&self) -> Result<PlannerConfig> {
        let mut cfg = PlannerConfig::default();
        for key in CONFIG_KEYS.iter().filter(|k| k.starts_with("planner.")) {
            if let Some(value) = self.get(key) {
                apply_planner_override(&mut cfg, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha(&self) -> Result<f64> {
        self.parse("conformal.alpha", 0.10)
    }

    pub fn split_seed(&self) -> Result<u64> {
        self.parse("conformal.split_seed", DEFAULT_SPLIT_SEED)
    }

    pub fn data_seed(&self) -> Result<u64> {
        self.parse("data.seed", 0)
    }

    pub fn n_particles(&self) -> Result<usize> {
        self.parse("data.n_particles", 2000)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ocular",
    about = "Locally calibrated dynamics uncertainty and probabilistically safe sampling-based planning",
    version
)]
struct Cli {
    /// Worker threads (default: the OCULAR_THREADS env var, then all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// key=value defaults file; command-line settings override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set planner.horizon=9.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a transition dataset over a map's free-space lattice.
    GenData(GenDataArgs),
    /// Train the semantic-footprint autoencoder on dataset footprints.
    TrainEncoder(TrainEncoderArgs),
    /// Calibrate a pipeline bundle from calibration datasets.
    Fit(FitArgs),
    /// Score a bundle's regions against held-out test cases.
    EvalCoverage(EvalCoverageArgs),
    /// Run closed-loop planning episodes from an episode spec.
    Plan(PlanArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Ground-truth map file.
    #[arg(long)]
    map: PathBuf,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Lattice shorthand P/V/A: n_px = n_py = P, n_v = V, n_a = A.
    #[arg(long, value_name = "P/V/A")]
    grid: Option<String>,
    /// Master seed (alias for data.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo particles per test case (alias for data.n_particles).
    #[arg(long)]
    particles: Option<usize>,
    /// Calibration dataset over the calibration lattice (the default).
    #[arg(long, conflicts_with = "test")]
    cal: bool,
    /// Test dataset over the test lattice, with a particle sidecar file.
    #[arg(long)]
    test: bool,
}

#[derive(Args, Debug)]
struct TrainEncoderArgs {
    /// Calibration dataset(s) whose footprints form the training set.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output encoder file.
    #[arg(long)]
    out: PathBuf,
    /// Training epochs (alias for train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (alias for train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Pipeline variant: nocp, splitcp, poselocal, ocular, ocular-noencode.
    #[arg(long)]
    variant: String,
    /// Calibration dataset(s); unused by the nocp variant.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Trained encoder file (required by the ocular variant).
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Miscoverage level (alias for conformal.alpha).
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalCoverageArgs {
    /// Pipeline bundle directory.
    #[arg(long)]
    pipeline: PathBuf,
    /// Test dataset; its `<path>.particles` sidecar must exist.
    #[arg(long)]
    tests: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Pipeline bundle directory (overrides the episode file's `bundle=`).
    #[arg(long)]
    pipeline: Option<PathBuf>,
    /// Episode spec file; relative paths inside resolve against its directory.
    #[arg(long)]
    episode: PathBuf,
    /// Output directory for traces and the summary.
    #[arg(long)]
    out: PathBuf,
    /// Number of episodes; run r uses seed base_seed + r.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Base seed (alias for planner.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a PPM trajectory image per run.
    #[arg(long)]
    render: bool,
}

fn init_threads(explicit: Option<usize>) -> Result<()> {
    let n = match explicit {
        Some(n) => Some(n),
        None => match std::env::var("OCULAR_THREADS") {
            Err(_) => None,
            Ok(raw) => Some(raw.parse().map_err(|_| {
                Error::Config(format!("bad OCULAR_THREADS value '{raw}'"))
            })?),
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".to_string()));
        }
        // A later init (e.g. in tests) is a no-op; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn parse_grid_shorthand(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "--grid expects P/V/A, e.g. 16/8/4, got '{s}'"
        )));
    }
    let num = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad grid dimension '{t}' in '{s}'")))
    };
    Ok((num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

fn resolve_relative(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn particles_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".particles");
    dataset.with_file_name(name)
}

/// Prefix I/O errors with the file they came from; artifact loaders below the
/// CLI see only a stream and cannot name it themselves.
fn annotate_path<T>(result: Result<T>, path: &Path) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn cmd_gen_data(args: &GenDataArgs, settings: &mut Settings) -> Result<()> {
    if let Some(seed) = args.seed {
        settings.assign("data.seed", &seed.to_string())?;
    }
    if let Some(p) = args.particles {
        settings.assign("data.n_particles", &p.to_string())?;
    }
    if let Some(shorthand) = &args.grid {
        let (p, v, a) = parse_grid_shorthand(shorthand)?;
        settings.assign("grid.n_px", &p.to_string())?;
        settings.assign("grid.n_py", &p.to_string())?;
        settings.assign("grid.n_v", &v.to_string())?;
        settings.assign("grid.n_a", &a.to_string())?;
    }
    let base = if args.test {
        GridSpec::test()
    } else {
        GridSpec::calibration()
    };
    let grid = settings.grid(base)?;
    let map = GridMap::load(&args.map)?;
    let dyn_params = settings.dynamics()?;
    let sensor = settings.sensor()?;
    let seed = settings.data_seed()?;

    if args.test {
        let cases = generate_testcases(
            &map,
            grid,
            &dyn_params,
            &sensor,
            seed,
            settings.n_particles()?,
        )?;
        let records: Vec<_> = cases.iter().map(|c| c.record.clone()).collect();
        save_dataset(&args.out, &records)?;
        let sidecar = particles_path(&args.out);
        save_particles(&sidecar, &cases)?;
        println!(
            "{} test cases -> {} (particles in {})",
            cases.len(),
            args.out.display(),
            sidecar.display()
        );
    } else {
        let records = generate_calibration(&map, grid, &dyn_params, &sensor, seed)?;
        save_dataset(&args.out, &records)?;
        println!("{} calibration records -> {}", records.len(), args.out.display());
    }
    Ok(())
}

fn load_merged(paths: &[PathBuf]) -> Result<Vec<crate::dataset::CalRecord>> {
    let lists = paths
        .iter()
        .map(|p| annotate_path(load_dataset(p), p))
        .collect::<Result<Vec<_>>>()?;
    merge_datasets(&lists)
}

fn cmd_train_encoder(args: &TrainEncoderArgs, settings: &mut Settings) -> Result<()> {
    if let Some(epochs) = args.epochs {
        settings.assign("train.epochs", &epochs.to_string())?;
    }
    if let Some(seed) = args.seed {
        settings.assign("train.seed", &seed.to_string())?;
    }
    let records = load_merged(&args.data)?;
    let footprints: Vec<_> = records.into_iter().map(|r| r.footprint).collect();
    let cfg = settings.train()?;
    let (model, losses) = train_cae(&footprints, &cfg)?;
    model.save(&args.out)?;
    println!(
        "trained on {} footprints for {} epochs (final loss {:.6}) -> {}",
        footprints.len(),
        cfg.epochs,
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_fit(args: &FitArgs, settings: &mut Settings) -> Result<()> {
    if let Some(alpha) = args.alpha {
        settings.assign("conformal.alpha", &alpha.to_string())?;
    }
    let variant = Variant::from_str(&args.variant)?;
    let spec = PipelineSpec {
        variant,
        alpha: settings.alpha()?,
    };
    spec.validate()?;
    if variant.needs_encoder() && args.encoder.is_none() {
        return Err(Error::Config(format!(
            "variant '{}' needs --encoder",
            variant.as_str()
        )));
    }
    if !variant.needs_encoder() && args.encoder.is_some() {
        return Err(Error::Config(format!(
            "variant '{}' does not use an encoder; drop --encoder",
            variant.as_str()
        )));
    }
    if variant != Variant::NoCp && args.data.is_empty() {
        return Err(Error::Config(format!(
            "variant '{}' needs at least one --data file",
            variant.as_str()
        )));
    }
    let records = load_merged(&args.data)?;
    let encoder = match &args.encoder {
        Some(path) => Some(EncoderModel::load(path)?),
        None => None,
    };
    let pipe = fit_pipeline(
        &spec,
        &records,
        encoder,
        &settings.tree()?,
        &settings.dynamics()?,
        settings.split_seed()?,
    )?;
    save_pipeline(&args.out, &pipe)?;
    println!(
        "fit {} on {} records: {} leaves -> {}",
        variant.as_str(),
        records.len(),
        pipe.tree.n_leaves(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval_coverage(args: &EvalCoverageArgs, settings: &Settings) -> Result<()> {
    let pipe = load_pipeline(&args.pipeline)?;
    let records = annotate_path(load_dataset(&args.tests), &args.tests)?;
    let sidecar = particles_path(&args.tests);
    let particles = annotate_path(load_particles(&sidecar), &sidecar)?;
    if records.len() != particles.len() {
        return Err(Error::Format(format!(
            "test dataset has {} records but the particle sidecar has {} blocks",
            records.len(),
            particles.len()
        )));
    }
    let cases: Vec<TestCase> = records
        .into_iter()
        .zip(particles)
        .map(|(record, particles)| TestCase { record, particles })
        .collect();
    let report = evaluate_pipeline(&pipe, &cases, &settings.dynamics()?)?;
    let csv = report.to_csv();
    std::fs::write(&args.out, &csv)?;
    print!("{csv}");
    println!("-> {}", args.out.display());
    Ok(())
}

fn cmd_plan(args: &PlanArgs, settings: &Settings) -> Result<()> {
    let base_cfg = settings.planner()?;
    let episode = load_episode_spec(&args.episode, &base_cfg)?;
    let episode_dir = args
        .episode
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let map = GridMap::load(&resolve_relative(&episode_dir, &episode.map_path))?;
    let bundle = match (&args.pipeline, &episode.bundle_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => resolve_relative(&episode_dir, p),
        (None, None) => {
            return Err(Error::Config(
                "no pipeline bundle: pass --pipeline or put bundle= in the episode spec"
                    .to_string(),
            ))
        }
    };
    let pipe = load_pipeline(&bundle)?;
    let sensor = settings.sensor()?;
    let dyn_params = settings.dynamics()?;
    let base_seed = args.seed.unwrap_or(episode.cfg.seed);

    std::fs::create_dir_all(&args.out)?;
    let mut episodes = Vec::with_capacity(args.runs);
    for r in 0..args.runs {
        let cfg = PlannerConfig {
            seed: base_seed + r as u64,
            ..episode.cfg
        };
        let ep = run_episode(
            &map,
            &episode.start,
            &episode.subgoals,
            &pipe,
            &sensor,
            &dyn_params,
            &cfg,
        )?;
        let mut csv = Vec::new();
        write_trace_csv(&mut csv, &ep)?;
        std::fs::write(args.out.join(format!("run_{r:03}.trace.csv")), csv)?;
        if args.render {
            let path: Vec<[f64; 2]> = ep.trace.iter().map(|s| s.state.position()).collect();
            let img = render_episode(&map, &path, &episode.subgoals, 4);
            img.save_ppm(&args.out.join(format!("run_{r:03}.ppm")))?;
        }
        println!(
            "run {r}: {} after {} steps (seed {})",
            ep.outcome.as_str(),
            ep.steps,
            cfg.seed
        );
        episodes.push(ep);
    }
    let summary = summarize_episodes(&episodes);
    let csv = episode_summary_csv(&[(pipe.spec.variant.as_str().to_string(), summary)]);
    std::fs::write(args.out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Parse arguments and execute. The caller maps errors to exit codes via
/// `Error::exit_code`.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let help = config_keys_help();
    let command = Cli::command().after_help(help.clone()).after_long_help(help);
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp
                    | clap::error::ErrorKind::DisplayVersion
                    | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) =>
        {
            e.print().ok();
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    let cli = Cli::from_arg_matches(&matches)
        .map_err(|e| Error::Config(e.to_string()))?;

    init_threads(cli.threads)?;
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.load_file(path)?;
    }
    for pair in &cli.set {
        settings.assign_pair(pair)?;
    }

    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, &mut settings),
        Command::TrainEncoder(a) => cmd_train_encoder(a, &mut settings),
        Command::Fit(a) => cmd_fit(a, &mut settings),
        Command::EvalCoverage(a) => cmd_eval_coverage(a, &settings),
        Command::Plan(a) => cmd_plan(a, &settings),
    }
}
