//! The `dssi` command: runs experiments from a JSON config and writes CSV
//! and JSON reports plus a run manifest.
//!
//! Exit codes: 0 on success, 1 on usage or config errors, 2 when a bound
//! check is violated.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dssi_core::analysis::suite::{self, rows_to_csv, CheckRow, SuiteConfig};
use dssi_core::pipeline::{kappa_sweep, mask_noise_experiment, mode_ablation, build_scene, ExperimentReport, WeightsDocument};
use dssi_core::reflow::euler_from;
use dssi_core::{BoundReport, PipelineConfig};
use serde::Serialize;

pub use config::{canonical_json, config_hash, parse_config, validate_config, ConfigError, Diagnostic, Override};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "DSSI_SEED";

#[derive(Debug, Parser)]
#[command(name = "dssi", version, about = "Style-injection attention experiments and bound checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Dot-path override applied to the config, e.g. `dssi.kappa=1.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<Override>,

    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,

    /// Scales every trial count of the check batteries.
    #[arg(long, global = true, default_value_t = 1.0, hide = true)]
    pub trials_scale: f64,

    /// Marks the first check as violated, for exercising the exit code.
    #[arg(long, global = true, hide = true)]
    pub force_violation: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the proposition and bound battery.
    VerifyPropositions,
    /// MAE of vanilla and DSSI attention against the clean run, per mask fraction.
    MaskExperiment,
    /// Style and prompt contributions over the kappa grid.
    KappaSweep,
    /// Mask experiment for vanilla, fixed and dynamic fusion.
    ModeAblation,
    /// Rectified-flow sampler checks on Gaussian endpoints.
    ReflowCheck,
    /// Print or write the default config.
    EmitConfigTemplate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyPropositions => "verify-propositions",
            Command::MaskExperiment => "mask-experiment",
            Command::KappaSweep => "kappa-sweep",
            Command::ModeAblation => "mode-ablation",
            Command::ReflowCheck => "reflow-check",
            Command::EmitConfigTemplate => "emit-config-template",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    fn csv(self) -> bool {
        self != Format::Json
    }

    fn json(self) -> bool {
        self != Format::Csv
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    pub threads: usize,
    pub format: Format,
    pub outputs: Vec<String>,
    pub violations: usize,
    pub wall_time_s: f64,
}

/// What a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub violations: usize,
    pub outputs: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.violations > 0 {
            EXIT_VIOLATION
        } else {
            EXIT_OK
        }
    }
}

struct Writer<'a> {
    dir: &'a Path,
    format: Format,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn file(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        if self.format.csv() {
            self.file(name, contents)?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        if self.format.json() {
            let mut s = serde_json::to_string_pretty(value)?;
            s.push('\n');
            self.file(name, &s)?;
        }
        Ok(())
    }
}

/// Loads the config named on the command line, applying `--set` and the
/// seed environment override.
pub fn load_config(cli: &Cli, seed_env: Option<&str>) -> anyhow::Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        bail!("{} needs --config PATH", cli.command.name());
    };
    Ok(validate_config(path, &cli.overrides, seed_env)?)
}

fn suite_config(cli: &Cli, cfg: &PipelineConfig) -> anyhow::Result<SuiteConfig> {
    if !(cli.trials_scale > 0.0 && cli.trials_scale.is_finite()) {
        bail!("--trials-scale must be positive");
    }
    Ok(SuiteConfig {
        trials_scale: cli.trials_scale,
        ..SuiteConfig::new(cfg.seed, cfg.dssi.clone())
    })
}

fn count_violations(rows: &mut [CheckRow], force: bool) -> usize {
    if force {
        if let Some(r) = rows.first_mut() {
            let bound = r.report.bound;
            r.report = BoundReport::new(bound + bound.abs().max(1.0), bound);
        }
    }
    rows.iter().filter(|r| !r.report.satisfied).count()
}

fn write_checks(w: &mut Writer, stem: &str, rows: &[CheckRow]) -> anyhow::Result<()> {
    w.csv(&format!("{stem}.csv"), &rows_to_csv(rows))?;
    w.json(&format!("{stem}.json"), &rows)
}

fn write_mae(w: &mut Writer, stem: &str, report: &ExperimentReport) -> anyhow::Result<()> {
    w.csv(&format!("{stem}.csv"), &report.mae_csv())?;
    w.csv(&format!("{stem}_layers.csv"), &report.layer_csv())?;
    w.json(&format!("{stem}.json"), report)
}

fn print_check_summary(rows: &[CheckRow]) {
    for r in rows.iter().filter(|r| !r.report.satisfied) {
        eprintln!(
            "violated: {} at {} (empirical {:e}, bound {:e})",
            r.check_name, r.delta_or_sigma, r.report.empirical, r.report.bound
        );
    }
    let bad = rows.iter().filter(|r| !r.report.satisfied).count();
    println!("{} checks, {} satisfied, {bad} violated", rows.len(), rows.len() - bad);
}

/// Runs a parsed command line. `seed_env` is the value of [`SEED_ENV`], if
/// set.
pub fn run(cli: &Cli, seed_env: Option<&str>) -> anyhow::Result<RunOutcome> {
    let start = Instant::now();
    if cli.command == Command::EmitConfigTemplate {
        return emit_template(cli);
    }
    let cfg = load_config(cli, seed_env)?;
    let Some(dir) = &cli.out else {
        bail!("{} needs --out DIR", cli.command.name());
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    let threads = pool.current_num_threads();
    let mut w = Writer {
        dir,
        format: cli.format,
        written: Vec::new(),
    };
    let violations = pool.install(|| execute(cli, &cfg, &mut w))?;

    let manifest = Manifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: config_hash(&cfg),
        threads,
        format: cli.format,
        outputs: w
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        violations,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    w.format = Format::Json;
    w.json("manifest.json", &manifest)?;
    Ok(RunOutcome {
        violations,
        outputs: w.written,
    })
}

fn execute(cli: &Cli, cfg: &PipelineConfig, w: &mut Writer) -> anyhow::Result<usize> {
    match cli.command {
        Command::VerifyPropositions => {
            let mut rows = suite::verify_propositions(&suite_config(cli, cfg)?)?;
            let bad = count_violations(&mut rows, cli.force_violation);
            write_checks(w, "propositions", &rows)?;
            print_check_summary(&rows);
            Ok(bad)
        }
        Command::ReflowCheck => {
            let mut rows = suite::reflow_suite(&suite_config(cli, cfg)?)?;
            let bad = count_violations(&mut rows, cli.force_violation);
            write_checks(w, "reflow", &rows)?;
            // one sample path for plotting
            let ep = suite::reflow_endpoints();
            let x0 = ep.sample_source(&mut dssi_core::SeededRng::child(cfg.seed, 0));
            w.csv("reflow_trajectory.csv", &euler_from(&ep, x0, 100)?.to_csv())?;
            print_check_summary(&rows);
            Ok(bad)
        }
        Command::MaskExperiment => {
            let report = mask_noise_experiment(cfg)?;
            write_mae(w, "mask_experiment", &report)?;
            write_weights(w, cfg)?;
            println!("{} MAE rows", report.mae.len());
            Ok(0)
        }
        Command::ModeAblation => {
            let report = mode_ablation(cfg)?;
            write_mae(w, "mode_ablation", &report)?;
            write_weights(w, cfg)?;
            println!("{} MAE rows", report.mae.len());
            Ok(0)
        }
        Command::KappaSweep => {
            let report = kappa_sweep(cfg, &cfg.kappa_grid())?;
            w.csv("kappa_sweep.csv", &report.kappa_csv())?;
            w.json("kappa_sweep.json", &report)?;
            for (k, style, prompt) in report.mean_kappa() {
                println!("kappa {k}: style {style:.4}, prompt {prompt:.4}");
            }
            Ok(0)
        }
        Command::EmitConfigTemplate => unreachable!("handled before config loading"),
    }
}

/// Weights of the base seed, so a run can be replayed exactly.
fn write_weights(w: &mut Writer, cfg: &PipelineConfig) -> anyhow::Result<()> {
    if w.format.json() {
        let scene = build_scene(cfg, cfg.seed)?;
        w.json("weights.json", &WeightsDocument::from_scene(&scene, cfg.seed))?;
    }
    Ok(())
}

fn emit_template(cli: &Cli) -> anyhow::Result<RunOutcome> {
    let template = canonical_json(&PipelineConfig::default());
    let text = if cli.overrides.is_empty() {
        template
    } else {
        canonical_json(&parse_config(&template, &cli.overrides, None).map_err(|diagnostics| ConfigError {
            source_name: "template".into(),
            diagnostics,
        })?)
    };
    let mut outputs = Vec::new();
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("config.json");
            std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            outputs.push(path);
        }
        None => print!("{text}"),
    }
    Ok(RunOutcome { violations: 0, outputs })
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I, seed_env: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli, seed_env) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}
