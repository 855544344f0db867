//! Command-line front end.
//!
//! Configuration is resolved as: defaults, then the `--config` JSON file,
//! then `--set key=value` overrides in order, then `--seed`. Unknown keys
//! are rejected at every layer.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::data::{load_dataset, save_dataset};
use crate::diffusion::NoiseSchedule;
use crate::nn::save_params;
use crate::sched::{omega_from_pipeline_scale, GuidanceSchedule, ScheduleShape, ShapeKind};
use crate::xp::{
    build_model, execute, fmt_f64, generate_samples, write_manifest, Reference, RunConfig,
    RunManifest, Runner, XpError, MANIFEST_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<XpError> for CliError {
    fn from(e: XpError) -> Self {
        if e.is_config() || matches!(e, XpError::ManifestExists(_)) {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "guidelab",
    version,
    about = "Guidance-weight schedulers for classifier-free guidance, with a desk-scale diffusion lab"
)]
pub struct Cli {
    /// Print the difference coefficient ω = g − 1 for a pipeline-style
    /// guidance scale g, then exit.
    #[arg(long, value_name = "G", allow_negative_numbers = true)]
    pub convert_scale: Option<f64>,

    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file; keys not given keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key by dotted path; the value is parsed as JSON,
    /// falling back to a plain string. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (same as `--set output_dir=DIR`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Validate the config and print the resolved plan without writing
    /// anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Log progress to standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured dataset and write dataset.bin.
    GenData,
    /// Train the denoiser and write params.bin.
    Train,
    /// Sample from the denoiser under one guidance schedule; writes samples.bin.
    Sample(SampleArgs),
    /// Print a guidance schedule as CSV: shape,omega,param,t,weight.
    Curves(CurveArgs),
    /// Scheduler × ω × replicate sweep; writes sweep.csv.
    Sweep,
    /// Zero the guidance on one interval at a time; writes perturb.csv.
    Perturb,
    /// Record and project sampling trajectories; writes traj.csv and traj_diag.csv.
    Traj,
    /// Metrics of a samples file as one CSV row.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Schedule shape.
    #[arg(long, default_value = "static", value_parser = parse_shape)]
    pub shape: ShapeKind,
    /// Total guidance weight ω.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub omega: f64,
    /// Shape parameter: exponent for pcs, floor for the clamp shapes.
    #[arg(long)]
    pub param: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Sample this class only; all classes when absent.
    #[arg(long)]
    pub class: Option<usize>,
    /// Samples per class; defaults to sweep.samples_per_class.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Horizon T; defaults to noise.horizon.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<u32>,
    /// Grid points from t = 0 to t = T inclusive.
    #[arg(long, default_value_t = 1001)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Samples file (dataset format, labels are the conditioning classes).
    #[arg(long, value_name = "PATH")]
    pub samples: PathBuf,
    /// Run id for the row; defaults to the file name.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value = "static", value_parser = parse_shape)]
    pub scheduler: ShapeKind,
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub param: Option<f64>,
}

fn parse_shape(s: &str) -> Result<ShapeKind, String> {
    ShapeKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ShapeKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown shape `{s}` (expected one of {})", names.join(", "))
    })
}

/// Dotted keys of the config schema with their default values.
pub fn schema_help() -> String {
    let mut lines = Vec::new();
    let root = serde_json::to_value(RunConfig::default()).expect("config serializes");
    flatten_keys("", &root, &mut lines);
    let mut out =
        String::from("Config keys (JSON via --config, or --set key=value; shown with defaults):\n");
    for (k, v) in lines {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out.push_str(
        "\n`data` is tagged by `kind`: two-gaussians {n, side, mu_low, mu_high, sigma}, \
         gmm {n, centers, sigma} or file {path}.\n\
         `embed` is tagged by `kind`: moments-proj {k, seed} or identity.\n\
         Shapes: static, linear, invlinear, cosine, sine, vshape, lambda, pcs (param s), \
         clamp-linear and clamp-cosine (param c).\n\
         Exit codes: 0 success, 2 config or usage error, 3 runtime error.",
    );
    out
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_keys(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn command_with_schema() -> clap::Command {
    let help = schema_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    let names: Vec<String> = cmd
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    for name in names {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, move |sc| sc.after_long_help(h));
    }
    cmd
}

/// Applies one `key=value` override to a serialized config.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let unknown = || CliError::Config(format!("unknown config key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let slot = match node {
            Value::Object(map) => map.get_mut(*part).ok_or_else(unknown)?,
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| unknown())?;
                items.get_mut(idx).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
        if last {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

fn decode_config(v: Value, origin: &str) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            CliError::Config(format!("{origin}: {inner}"))
        } else {
            CliError::Config(format!("{origin}: `{path}`: {inner}"))
        }
    })
}

/// Resolves the effective configuration from the common options.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let mut de = serde_json::Deserializer::from_str(&text);
            let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
                let p = e.path().to_string();
                CliError::Config(format!("{}: `{p}`: {}", path.display(), e.into_inner()))
            })?;
            cfg
        }
        None => RunConfig::default(),
    };
    if !common.set.is_empty() {
        let mut root = serde_json::to_value(&cfg).map_err(runtime)?;
        for s in &common.set {
            apply_override(&mut root, s)?;
            decode_config(root.clone(), &format!("--set {s}"))?;
        }
        cfg = decode_config(root, "--set")?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit code. Data goes to `stdout`, diagnostics to
/// `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command_with_schema().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_CONFIG
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return EXIT_CONFIG;
        }
    };
    init_logging(cli.common.verbose);
    match dispatch(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // a second initialization (tests run many commands) is harmless
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    if let Some(g) = cli.convert_scale {
        writeln!(stdout, "{}", omega_from_pipeline_scale(g)).map_err(runtime)?;
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given (see --help)".into()));
    };
    let cfg = resolve_config(&cli.common)?;
    if let Command::Curves(args) = command {
        return curves(&cfg, args, cli.common.dry_run, stdout);
    }
    cfg.validate()?;
    if cli.common.dry_run {
        let plan = plan(&cfg, command)?;
        writeln!(
            stdout,
            "{}",
            serde_json::to_string_pretty(&plan).map_err(runtime)?
        )
        .map_err(runtime)?;
        return Ok(());
    }
    let dir = cfg.output_dir.clone();
    match command {
        Command::GenData => gen_data(&cfg, &dir),
        Command::Train => train_cmd(&cfg, &dir),
        Command::Sample(args) => sample_cmd(&cfg, args, &dir),
        Command::Sweep => execute(&cfg, Runner::Sweep, &dir)
            .map(drop)
            .map_err(Into::into),
        Command::Perturb => execute(&cfg, Runner::Perturb, &dir)
            .map(drop)
            .map_err(Into::into),
        Command::Traj => execute(&cfg, Runner::Traj, &dir)
            .map(drop)
            .map_err(Into::into),
        Command::Metrics(args) => metrics_cmd(&cfg, args, stdout),
        Command::Curves(_) => unreachable!("handled above"),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train => "train",
        Command::Sample(_) => "sample",
        Command::Curves(_) => "curves",
        Command::Sweep => "sweep",
        Command::Perturb => "perturb",
        Command::Traj => "traj",
        Command::Metrics(_) => "metrics",
    }
}

fn plan(cfg: &RunConfig, command: &Command) -> Result<Value, CliError> {
    let s = &cfg.sweep;
    let classes_hint = match &cfg.data {
        crate::data::DatasetSpec::TwoGaussians(_) => Some(2),
        crate::data::DatasetSpec::Gmm { centers, .. } => Some(centers.len()),
        crate::data::DatasetSpec::File { .. } => None,
    };
    let (cells, outputs): (usize, Vec<&str>) = match command {
        Command::GenData => (0, vec!["dataset.bin"]),
        Command::Train => (0, vec!["params.bin"]),
        Command::Sample(_) => (1, vec!["samples.bin"]),
        Command::Sweep => (
            s.schedulers.len() * s.omegas.len() * s.replicates,
            vec!["sweep.csv"],
        ),
        Command::Perturb => {
            let per = match &cfg.perturb.intervals {
                Some(v) => v.len(),
                None => (cfg.noise.horizon / cfg.perturb.width) as usize,
            };
            ((1 + per) * s.replicates, vec!["perturb.csv"])
        }
        Command::Traj => (
            cfg.traj.omegas.len() * cfg.traj.seeds_per_class * classes_hint.unwrap_or(0),
            vec!["traj.csv", "traj_diag.csv"],
        ),
        Command::Metrics(_) | Command::Curves(_) => (0, vec![]),
    };
    Ok(json!({
        "command": command_name(command),
        "output_dir": cfg.output_dir,
        "config_digest": cfg.digest()?,
        "seeds": cfg.seeds(s.replicates),
        "cells": cells,
        "outputs": outputs,
        "config": cfg,
    }))
}

fn ensure_fresh(dir: &Path) -> Result<(), CliError> {
    if dir.join(MANIFEST_FILE).exists() {
        return Err(XpError::ManifestExists(dir.join(MANIFEST_FILE)).into());
    }
    fs::create_dir_all(dir).map_err(runtime)
}

fn finish(
    cfg: &RunConfig,
    runner: &str,
    dir: &Path,
    outputs: Vec<&str>,
    timings: Vec<(String, f64)>,
) -> Result<(), CliError> {
    let stages = timings.iter().map(|(k, _)| k.clone()).collect();
    let manifest = RunManifest::new(
        cfg,
        runner,
        outputs.into_iter().map(String::from).collect(),
        stages,
    )?;
    write_manifest(dir, &manifest, &timings)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    ensure_fresh(dir)?;
    let clock = Instant::now();
    let ds = cfg
        .data
        .generate(cfg.seeds(0).data)
        .map_err(XpError::from)?;
    save_dataset(&ds, &dir.join("dataset.bin")).map_err(XpError::from)?;
    finish(
        cfg,
        "gen-data",
        dir,
        vec!["dataset.bin"],
        vec![("data".into(), clock.elapsed().as_secs_f64())],
    )
}

fn train_cmd(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    ensure_fresh(dir)?;
    let ds = cfg
        .data
        .generate(cfg.seeds(0).data)
        .map_err(XpError::from)?;
    let ns = NoiseSchedule::new(cfg.noise.kind, cfg.noise.horizon).map_err(XpError::from)?;
    let clock = Instant::now();
    let (model, _) = build_model(cfg, &ds, &ns)?;
    let timings = vec![("train".to_string(), clock.elapsed().as_secs_f64())];
    save_params(&model, &dir.join("params.bin")).map_err(XpError::from)?;
    finish(cfg, "train", dir, vec!["params.bin"], timings)
}

fn schedule_from(args: &ScheduleArgs, horizon: u32) -> Result<GuidanceSchedule, CliError> {
    let shape = ScheduleShape::from_kind(args.shape, args.param)
        .map_err(|e| CliError::Config(format!("--param: {e}")))?;
    GuidanceSchedule::new(shape, args.omega, horizon).map_err(|e| CliError::Config(e.to_string()))
}

fn sample_cmd(cfg: &RunConfig, args: &SampleArgs, dir: &Path) -> Result<(), CliError> {
    ensure_fresh(dir)?;
    let schedule = schedule_from(&args.schedule, cfg.noise.horizon)?;
    let ds = cfg
        .data
        .generate(cfg.seeds(0).data)
        .map_err(XpError::from)?;
    let ns = NoiseSchedule::new(cfg.noise.kind, cfg.noise.horizon).map_err(XpError::from)?;
    let classes: Vec<usize> = match args.class {
        Some(k) if k >= ds.classes() => {
            return Err(CliError::Config(format!(
                "--class {k}: dataset has {} classes",
                ds.classes()
            )))
        }
        Some(k) => vec![k],
        None => (0..ds.classes()).collect(),
    };
    let per_class = args.n.unwrap_or(cfg.sweep.samples_per_class);
    if per_class == 0 {
        return Err(CliError::Config("--n must be ≥ 1".into()));
    }
    let mut timings = Vec::new();
    let clock = Instant::now();
    let (model, _) = build_model(cfg, &ds, &ns)?;
    timings.push(("train".to_string(), clock.elapsed().as_secs_f64()));
    let clock = Instant::now();
    let seed = cfg.seeds(1).replicates[0];
    let samples = generate_samples(cfg, &model, &ns, &schedule, &classes, per_class, seed)?;
    timings.push(("sample".to_string(), clock.elapsed().as_secs_f64()));
    save_dataset(&samples, &dir.join("samples.bin")).map_err(XpError::from)?;
    save_params(&model, &dir.join("params.bin")).map_err(XpError::from)?;
    finish(
        cfg,
        "sample",
        dir,
        vec!["samples.bin", "params.bin"],
        timings,
    )
}

fn curves(
    cfg: &RunConfig,
    args: &CurveArgs,
    dry_run: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let horizon = args.horizon.unwrap_or(cfg.noise.horizon);
    if horizon == 0 {
        return Err(CliError::Config("--T must be ≥ 1".into()));
    }
    if args.points < 2 {
        return Err(CliError::Config("--points must be ≥ 2".into()));
    }
    let schedule = schedule_from(&args.schedule, horizon)?;
    if dry_run {
        writeln!(
            stdout,
            "curves: {} rows for {} over T = {horizon}",
            args.points, args.schedule.shape
        )
        .map_err(runtime)?;
        return Ok(());
    }
    let mut out = String::from("shape,omega,param,t,weight\n");
    let param = args.schedule.param.map(fmt_f64).unwrap_or_default();
    let omega = fmt_f64(args.schedule.omega);
    let n = args.points - 1;
    for i in 0..=n {
        let t = f64::from(horizon) * i as f64 / n as f64;
        let w = schedule.weight_at(t).map_err(runtime)?;
        out.push_str(&format!(
            "{},{omega},{param},{},{}\n",
            args.schedule.shape,
            fmt_f64(t),
            fmt_f64(w)
        ));
    }
    stdout.write_all(out.as_bytes()).map_err(runtime)
}

pub const METRICS_HEADER: &str =
    "run_id,scheduler,omega,param,fd,adherence,is_analog,diversity,uturn_mean,wander_mean";

fn metrics_cmd(
    cfg: &RunConfig,
    args: &MetricsArgs,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let samples =
        load_dataset(&args.samples).map_err(|e| CliError::Config(format!("--samples: {e}")))?;
    let ds = cfg
        .data
        .generate(cfg.seeds(0).data)
        .map_err(XpError::from)?;
    if samples.dim() != ds.dim() {
        return Err(CliError::Config(format!(
            "samples have dim {}, dataset has {}",
            samples.dim(),
            ds.dim()
        )));
    }
    let refs = Reference::build(cfg, &ds)?;
    let rows: Vec<&[f64]> = (0..samples.len()).map(|i| samples.row(i)).collect();
    let m = refs.metrics(&rows, samples.labels(), cfg.sweep.diversity_group, &[], &[])?;
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        args.samples
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let row = [
        run_id,
        args.scheduler.to_string(),
        args.omega.map(fmt_f64).unwrap_or_default(),
        args.param.map(fmt_f64).unwrap_or_default(),
        fmt_f64(m.fd),
        fmt_f64(m.adherence),
        fmt_f64(m.is_analog),
        fmt_f64(m.diversity),
        fmt_f64(m.uturn_mean),
        fmt_f64(m.wander_mean),
    ]
    .join(",");
    writeln!(stdout, "{METRICS_HEADER}\n{row}").map_err(runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("guidelab").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn convert_scale_prints_difference_coefficient() {
        let (code, out, _) = run_args(&["--convert-scale", "7.5"]);
        assert_eq!(code, 0);
        assert_eq!(out.trim(), "6.5");
    }

    #[test]
    fn unknown_override_key_is_named() {
        let (code, _, err) = run_args(&["sweep", "--dry-run", "--set", "omga=3"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("omga"), "{err}");
        let (code, _, err) = run_args(&["sweep", "--dry-run", "--set", "sweep.omga=3"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("sweep.omga"), "{err}");
    }

    #[test]
    fn override_type_error_names_key() {
        let (code, _, err) = run_args(&["sweep", "--dry-run", "--set", "sweep.replicates=abc"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("sweep.replicates"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let common = Common {
            set: vec![
                "sweep.omegas=[2.0, 3.0]".into(),
                "sweep.schedulers.0.shape=pcs".into(),
                "sweep.schedulers.0.param=2".into(),
                "noise.kind=cosine-alpha".into(),
            ],
            seed: Some(9),
            ..Common::default()
        };
        let cfg = resolve_config(&common).unwrap();
        assert_eq!(cfg.sweep.omegas, vec![2.0, 3.0]);
        assert_eq!(cfg.sweep.schedulers[0].shape, ShapeKind::Pcs);
        assert_eq!(cfg.sweep.schedulers[0].param, Some(2.0));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.noise.kind, crate::diffusion::NoiseKind::CosineAlpha);
    }

    #[test]
    fn help_lists_config_keys() {
        let (code, out, _) = run_args(&["sweep", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("sweep.omegas"), "{out}");
        assert!(out.contains("train.steps"));
    }

    #[test]
    fn missing_subcommand_is_usage_error() {
        let (code, _, err) = run_args(&[]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(!err.is_empty());
        let (code, _, _) = run_args(&["frobnicate"]);
        assert_eq!(code, EXIT_CONFIG);
    }
}
