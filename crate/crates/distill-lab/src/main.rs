//! Command-line front end: `distill-lab <train|enhance|generate|verify>`.
//!
//! Every run is driven by a JSON experiment config; `--out` and `--seed`
//! override the file without editing it. Exit codes: 0 success, 2 config
//! or argument problems, 3 missing input artifacts, 4 failed acceptance
//! checks, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distill_lab::config::ExperimentConfig;
use distill_lab::distill::RefineLoss;
use distill_lab::harness::{self, EnhanceArgs, GenerateArgs};
use distill_lab::verify::{self, VerifyOptions};
use distill_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "distill-lab", version, about = "Reference-guided distillation lab")]
struct Cli {
    /// Experiment config (JSON)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the config's base seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Run independent pipeline variants on worker threads
    #[arg(long, global = true)]
    parallel: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the procedural corpus and train the denoiser
    Train,
    /// Enhance a degraded novel view and compare against the ablations
    Enhance(EnhanceCli),
    /// Distill a texture field for one scene (coarse stage, then refine)
    Generate(GenerateCli),
    /// Run the acceptance suite and print one line per check
    Verify(VerifyCli),
}

#[derive(Args)]
struct EnhanceCli {
    /// Scene to enhance; defaults to the config's first scene seed
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Azimuth of the clean reference view, radians
    #[arg(long, default_value_t = 0.0)]
    ref_azimuth: f64,
    /// Azimuth of the degraded target view, radians
    #[arg(long, default_value_t = verify::FIXTURE_TARGET_AZIMUTH)]
    target_azimuth: f64,
    /// Degradation severity in [0, 1]; defaults to the config value
    #[arg(long)]
    severity: Option<f64>,
    /// Trained weights; defaults to <out_dir>/weights.dlw1
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateCli {
    /// Scene to distill; defaults to the config's first scene seed
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Azimuth of the clean reference view, radians
    #[arg(long, default_value_t = 0.0)]
    ref_azimuth: f64,
    /// Refine-stage objective: rgsd, sds, or image
    #[arg(long, default_value = "rgsd")]
    loss_kind: String,
    /// Trained weights; defaults to <out_dir>/weights.dlw1
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyCli {
    /// Trained weights; trains a fresh denoiser from the config if omitted
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Run only these check ids (repeatable), e.g. --check ac1 --check ac5
    #[arg(long = "check", value_name = "ID")]
    checks: Vec<String>,
    /// Mutation-testing hook; `invert-sign` must make the round trip fail
    #[arg(long, value_name = "NAME")]
    mutate: Option<String>,
}

fn parse_loss_kind(s: &str) -> Result<RefineLoss> {
    match s {
        "rgsd" => Ok(RefineLoss::Rgsd),
        "sds" => Ok(RefineLoss::Sds),
        "image" => Ok(RefineLoss::Image),
        other => Err(Error::InvalidArgument(format!(
            "unknown loss kind {other}; expected rgsd, sds, or image"
        ))),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train => {
            let art = harness::cmd_train(&cfg)?;
            println!("trained denoiser: final epoch loss {:.6}", art.final_loss);
            println!("weights: {}", art.weights.display());
            println!("loss curve: {}", art.loss_csv.display());
            Ok(0)
        }
        Command::Enhance(e) => {
            let args = EnhanceArgs {
                scene_seed: e.scene_seed,
                ref_azimuth: e.ref_azimuth,
                target_azimuth: e.target_azimuth,
                severity: e.severity,
                weights: e.weights.clone(),
                parallel: cli.parallel,
            };
            let art = harness::cmd_enhance(&cfg, &args)?;
            println!("{:<14} {:>8} {:>8} {:>10}", "variant", "psnr", "ssim", "mse");
            for (name, m) in &art.rows {
                println!(
                    "{name:<14} {:>8.3} {:>8.4} {:>10.3e}",
                    m.psnr_db, m.ssim, m.mse
                );
            }
            println!("panel: {}", art.panel.display());
            println!("metrics: {}", art.metrics_csv.display());
            Ok(0)
        }
        Command::Generate(g) => {
            let args = GenerateArgs {
                scene_seed: g.scene_seed,
                ref_azimuth: g.ref_azimuth,
                loss_kind: parse_loss_kind(&g.loss_kind)?,
                weights: g.weights.clone(),
                parallel: cli.parallel,
            };
            let art = harness::cmd_generate(&cfg, &args)?;
            println!(
                "mean novel-view psnr: coarse {:.3} dB, refined {:.3} dB",
                art.mean_novel_psnr_coarse, art.mean_novel_psnr_refined
            );
            println!("metrics: {}", art.novel_csv.display());
            Ok(0)
        }
        Command::Verify(v) => {
            let mutate_invert_sign = match v.mutate.as_deref() {
                None => false,
                Some("invert-sign") => true,
                Some(other) => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown mutation {other}; expected invert-sign"
                    )))
                }
            };
            let opts = VerifyOptions {
                weights: v.weights.clone(),
                only: v.checks.clone(),
                mutate_invert_sign,
            };
            let report = verify::run_all(&cfg, &opts)?;
            for c in &report.checks {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                println!(
                    "[{mark}] {:<5} {:<32} ({:>6.2}s) {}",
                    c.id, c.label, c.seconds, c.detail
                );
            }
            let failed = report.checks.iter().filter(|c| !c.passed).count();
            if failed == 0 {
                println!("all {} checks passed", report.checks.len());
                Ok(0)
            } else {
                println!("{failed} of {} checks failed", report.checks.len());
                Ok(4)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
