use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cimste::diagnostics::{self, GradReport};
use cimste::train::{self, checkpoint, RunStatus};
use cimste::{Config, GradMode, NoiseConfig};

mod manifest;

use manifest::{RunManifest, CONFIG_SNAPSHOT};

/// Noise-aware training for simulated compute-in-memory crossbars.
#[derive(Parser, Debug)]
#[command(name = "cimste", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed (train.seed).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory; defaults to runs/<command>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Gradient handling of the noise path (train.grad_mode).
    #[arg(long, global = true, value_name = "MODE")]
    grad_mode: Option<GradMode>,

    /// Noise level (noise.level). For `sweep` it replaces the level list.
    #[arg(long, global = true, value_name = "LEVEL")]
    noise_level: Option<f64>,

    /// Parallel runs for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its metrics and checkpoint.
    Train(Overrides),
    /// Train clean and noise-injected models at every level and compare them
    /// under noise.
    Sweep(Overrides),
    /// Compare the straight-through gradient of a small layer with
    /// finite-difference gradients of the noisy layer.
    Diagnose(Overrides),
    /// Time and measure one training step under every gradient mode.
    Profile(Overrides),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Config overrides such as train.steps=500 or noise.enabled_sources=["read"].
    #[arg(value_name = "SECTION.KEY=VALUE")]
    assignments: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Diagnose(_) => "diagnose",
            Command::Profile(_) => "profile",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::Train(o) | Command::Sweep(o) | Command::Diagnose(o) | Command::Profile(o) => {
                &o.assignments
            }
        }
    }
}

/// Configuration problems exit with 2, like argument errors.
struct UsageError(cimste::Error);

fn resolve_config(cli: &Cli) -> std::result::Result<Config, UsageError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) => Config::load(path).map_err(UsageError)?,
        None => Config::default(),
    };
    for a in cli.command.overrides() {
        cfg.apply_override(a).map_err(UsageError)?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = c.grad_mode {
        cfg.train.grad_mode = mode;
    }
    if let Some(level) = c.noise_level {
        cfg.noise.level = level;
        if matches!(cli.command, Command::Sweep(_)) {
            cfg.train.levels = vec![level];
        }
    }
    cfg.validate().map_err(UsageError)?;
    if matches!(cli.command, Command::Sweep(_)) && cfg.train.levels.is_empty() {
        return Err(UsageError(cimste::Error::Config(
            "train.levels is empty; sweep needs at least one level".into(),
        )));
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(UsageError(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli, cfg: &Config) -> Result<()> {
    let name = cli.command.name();
    let out = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(name));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let snapshot = cfg.to_toml()?;
    let snapshot_path = out.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot_path, &snapshot)
        .with_context(|| format!("writing {}", snapshot_path.display()))?;
    let mut manifest = RunManifest::start(name, snapshot, cfg.train.seed);
    manifest.outputs.push(CONFIG_SNAPSHOT.into());
    manifest.write(&out)?;

    let result = match cli.command {
        Command::Train(_) => cmd_train(cfg, &out, &mut manifest.outputs),
        Command::Sweep(_) => cmd_sweep(cfg, &out, cli.common.jobs, &mut manifest.outputs),
        Command::Diagnose(_) => cmd_diagnose(cfg, &out, &mut manifest.outputs),
        Command::Profile(_) => cmd_profile(cfg, &out, &mut manifest.outputs),
    };
    manifest.finish(&result);
    manifest.write(&out)?;
    result
}

fn write(out: &Path, file: impl AsRef<Path>, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let path = out.join(file.as_ref());
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(file.as_ref().to_path_buf());
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let run = train::train(cfg)?;
    write(out, "metrics.csv", &run.log.to_csv(), outputs)?;
    checkpoint::save(&out.join("model.ckpt"), &run.model.parameters())?;
    outputs.push("model.ckpt".into());
    if let RunStatus::Diverged { step } = run.log.status {
        bail!("training diverged at step {step}; metrics up to that step were written");
    }
    for split in [train::SplitKind::Eval, train::SplitKind::EvalClean] {
        if let Some(r) = run.log.last(split) {
            println!(
                "{:<10} loss {:.4}  accuracy {:.4}",
                split.name(),
                r.loss,
                r.accuracy
            );
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &Config, out: &Path, jobs: usize, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let sweep = train::noise_sweep(cfg, &cfg.train.levels, jobs)?;
    let mut diverged = Vec::new();
    for r in &sweep.runs {
        write(out, train::sweep_run_file(r.level, r.mode), &r.log.to_csv(), outputs)?;
        if let RunStatus::Diverged { step } = r.log.status {
            diverged.push(format!("level {} {} at step {step}", r.level, r.mode));
        }
    }
    let summary = sweep.summary_csv();
    write(out, "summary.csv", &summary, outputs)?;
    print!("{summary}");
    if !diverged.is_empty() {
        bail!("runs diverged: {}", diverged.join(", "));
    }
    Ok(())
}

fn samples_csv(report: &GradReport, discontinuous: &[Vec<usize>]) -> String {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s = String::from("sample,cos,gstar_norm,delta_norm,discontinuous\n");
    for (i, ((g, d), c)) in report
        .g_star_samples
        .iter()
        .zip(&report.delta_samples)
        .zip(&report.cos_samples)
        .enumerate()
    {
        let flagged = discontinuous.get(i).map_or(0, Vec::len);
        s.push_str(&format!("{i},{c},{},{},{flagged}\n", norm(g), norm(d)));
    }
    s
}

fn cmd_diagnose(cfg: &Config, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let noise = if cfg.noise_active() {
        cfg.run_noise()
    } else {
        NoiseConfig::ideal()
    };
    let d = diagnostics::diagnose(&cfg.diagnose, &noise, cfg.train.seed)?;
    let json = serde_json::to_string_pretty(&d.report)? + "\n";
    write(out, "report.json", &json, outputs)?;
    write(out, "samples.csv", &samples_csv(&d.report, &d.discontinuous), outputs)?;
    let r = &d.report;
    println!(
        "cos_mean {:.6}  cos_predicted {:.6}  var_gstar {:.6e}  mag_ratio {:.6}",
        r.cos_mean, r.cos_predicted, r.var_gstar, r.mag_ratio
    );
    Ok(())
}

fn cmd_profile(cfg: &Config, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let noise = cfg.run_noise();
    let reports =
        diagnostics::profile_modes(&GradMode::ALL, &cfg.profile, &noise, cfg.train.seed)?;
    let csv = diagnostics::profile_csv(&reports);
    write(out, "profile.csv", &csv, outputs)?;
    print!("{csv}");
    Ok(())
}
