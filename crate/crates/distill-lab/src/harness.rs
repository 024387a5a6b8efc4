//! Experiment harness behind the CLI. Each command lives here as a library
//! function so the acceptance suite can drive the real artifact paths
//! in-process; `main` only parses flags and maps errors to exit codes.
//!
//! All outputs are deterministic for a fixed config and seed: CSV floats
//! use Rust's shortest round-trip formatting and PNGs go through one
//! encoder, so byte digests are stable across runs.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::distill::{
    coarse_stage, refine_stage, write_log_csv, RefineLoss, StageOptions, StageRun,
};
use crate::metrics::{self, MetricReport};
use crate::nncore::{load_params, save_params, train, DenoiserParams, TrainOptions};
use crate::rgnv;
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor;
use crate::toyworld::{
    degrade_view, hstack_panel, make_dataset, render_view, save_png, Pose, Scene,
};
use crate::{rng, Error, Result};

/// Worker cap from `DISTILL_LAB_THREADS`; unlimited when unset or invalid.
pub fn thread_cap() -> usize {
    std::env::var("DISTILL_LAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX)
}

type Job<'a> = Box<dyn FnOnce() -> Result<Tensor> + Send + 'a>;

/// Run independent image-producing jobs, in order when sequential, in
/// capped waves of scoped threads when parallel. Results keep job order.
pub fn run_jobs(jobs: Vec<Job<'_>>, parallel: bool) -> Vec<Result<Tensor>> {
    let cap = if parallel {
        thread_cap().min(jobs.len().max(1))
    } else {
        1
    };
    let mut out: Vec<Option<Result<Tensor>>> = (0..jobs.len()).map(|_| None).collect();
    if cap <= 1 {
        for (slot, job) in out.iter_mut().zip(jobs) {
            *slot = Some(job());
        }
    } else {
        let mut remaining: Vec<(usize, Job)> = jobs.into_iter().enumerate().collect();
        while !remaining.is_empty() {
            let take = cap.min(remaining.len());
            let wave: Vec<(usize, Job)> = remaining.drain(..take).collect();
            std::thread::scope(|s| {
                let handles: Vec<(usize, std::thread::ScopedJoinHandle<Result<Tensor>>)> = wave
                    .into_iter()
                    .map(|(i, job)| (i, s.spawn(job)))
                    .collect();
                for (i, h) in handles {
                    out[i] = Some(h.join().expect("worker thread panicked"));
                }
            });
        }
    }
    out.into_iter()
        .map(|o| o.expect("every job slot filled"))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", dir.display())))
}

fn load_weights_for(cfg: &ExperimentConfig, weights: Option<&Path>) -> Result<DenoiserParams> {
    let path = weights
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("weights.dlw1"));
    let params = load_params(&path)?;
    if params.cfg.image_size != cfg.world.view {
        return Err(Error::Config(format!(
            "weights at {} were trained for {}x{} inputs but world.view is {}",
            path.display(),
            params.cfg.image_size,
            params.cfg.image_size,
            cfg.world.view
        )));
    }
    Ok(params)
}

fn metric_header(cfg: &ExperimentConfig) -> String {
    let mut cols = vec!["variant".to_string()];
    if cfg.metrics.psnr {
        cols.push("psnr".into());
    }
    if cfg.metrics.ssim {
        cols.push("ssim".into());
    }
    if cfg.metrics.mse {
        cols.push("mse".into());
    }
    cols.join(",")
}

fn metric_row(cfg: &ExperimentConfig, name: &str, m: &MetricReport) -> String {
    let mut cols = vec![name.to_string()];
    if cfg.metrics.psnr {
        cols.push(format!("{}", m.psnr_db));
    }
    if cfg.metrics.ssim {
        cols.push(format!("{}", m.ssim));
    }
    if cfg.metrics.mse {
        cols.push(format!("{}", m.mse));
    }
    cols.join(",")
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainArtifacts {
    pub weights: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
}

/// Build the procedural corpus, train the denoiser, and write weights plus
/// the per-epoch loss curve.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let geom = cfg.geometry();
    let items = make_dataset(
        cfg.train.num_scenes,
        cfg.train.views_per_scene,
        rng::derive_seed(cfg.seed, "dataset", 0),
        geom,
    );
    let schedule = NoiseSchedule::new(cfg.schedule.train_steps, cfg.schedule.kind)?;
    let opts = TrainOptions {
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
    };
    let (params, report) = train(
        &items,
        &cfg.denoiser,
        &schedule,
        &opts,
        rng::derive_seed(cfg.seed, "train", 0),
    )?;

    ensure_dir(&cfg.out_dir)?;
    let weights = cfg.out_dir.join("weights.dlw1");
    save_params(&params, &weights)?;
    let loss_csv = cfg.out_dir.join("train_loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    std::fs::write(&loss_csv, text)?;
    let final_loss = *report
        .epoch_losses
        .last()
        .expect("training ran at least one epoch");
    Ok(TrainArtifacts {
        weights,
        loss_csv,
        final_loss,
    })
}

// ── enhance ──────────────────────────────────────────────────────────────

pub struct EnhanceArgs {
    pub scene_seed: Option<u64>,
    pub ref_azimuth: f64,
    pub target_azimuth: f64,
    pub severity: Option<f64>,
    pub weights: Option<PathBuf>,
    pub parallel: bool,
}

impl Default for EnhanceArgs {
    fn default() -> Self {
        EnhanceArgs {
            scene_seed: None,
            ref_azimuth: 0.0,
            target_azimuth: 0.9,
            severity: None,
            weights: None,
            parallel: false,
        }
    }
}

#[derive(Debug)]
pub struct EnhanceArtifacts {
    pub panel: PathBuf,
    pub metrics_csv: PathBuf,
    /// Variant name and its quality vs the ground-truth target view.
    pub rows: Vec<(&'static str, MetricReport)>,
}

/// Degrade a novel view, enhance it every way we know, and write the
/// side-by-side panel plus one metrics row per variant.
pub fn cmd_enhance(cfg: &ExperimentConfig, args: &EnhanceArgs) -> Result<EnhanceArtifacts> {
    cfg.validate()?;
    let params = load_weights_for(cfg, args.weights.as_deref())?;
    let geom = cfg.geometry();
    let scene_seed = args.scene_seed.unwrap_or(cfg.scene_seeds[0]);
    let scene = Scene::generate(scene_seed, geom);
    let class = scene.class_id();
    let reference = render_view(&scene, &Pose::from_azimuth(args.ref_azimuth, &geom));
    let target = render_view(&scene, &Pose::from_azimuth(args.target_azimuth, &geom));
    let severity = args.severity.unwrap_or(cfg.world.degrade_severity);
    let coarse = degrade_view(&target, severity, rng::derive_seed(cfg.seed, "degrade", 0))?;
    let schedule = NoiseSchedule::new(cfg.rgnv.steps, cfg.schedule.kind)?;
    let strength = cfg.rgnv.start_rung() as f64 / cfg.rgnv.steps as f64;
    let sdedit_seed = rng::derive_seed(cfg.seed, "sdedit", 0);

    let (p, s, c, r) = (&params, &schedule, &coarse, &reference);
    let jobs: Vec<Job> = vec![
        Box::new(move || Ok(r.image.clone())),
        Box::new(move || Ok(c.image.clone())),
        Box::new(move || {
            rgnv::sdedit_baseline(
                p,
                s,
                class,
                &c.image,
                &c.depth,
                strength,
                cfg.rgnv.guidance,
                sdedit_seed,
            )
        }),
        Box::new(move || {
            Ok(rgnv::enhance_without_depth(p, s, class, &c.image, &r.image, &cfg.rgnv)?.enhanced)
        }),
        Box::new(move || {
            rgnv::enhance_without_injection(p, s, class, &c.image, &c.depth, &cfg.rgnv)
        }),
        Box::new(move || {
            Ok(rgnv::enhance(
                p,
                s,
                class,
                &c.image,
                &c.depth,
                &r.image,
                &r.depth,
                &cfg.rgnv,
            )?
            .enhanced)
        }),
    ];
    let names = ["reference", "coarse", "sdedit", "no_depth", "no_injection", "rgnv"];
    let images: Vec<Tensor> = run_jobs(jobs, args.parallel)
        .into_iter()
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(names.len());
    for (name, img) in names.iter().zip(&images) {
        rows.push((*name, metrics::report(img, &target.image)?));
    }

    ensure_dir(&cfg.out_dir)?;
    let metrics_csv = cfg.out_dir.join("enhance_metrics.csv");
    let mut text = metric_header(cfg);
    text.push('\n');
    for (name, m) in &rows {
        text.push_str(&metric_row(cfg, name, m));
        text.push('\n');
    }
    std::fs::write(&metrics_csv, text)?;

    // panel order: reference | GT target | coarse | sdedit | no-depth |
    // no-injection | enhanced
    let panel_img = hstack_panel(&[
        &images[0],
        &target.image,
        &images[1],
        &images[2],
        &images[3],
        &images[4],
        &images[5],
    ])?;
    let panel = cfg.out_dir.join("enhance_panel.png");
    save_png(&panel_img, &panel)?;
    Ok(EnhanceArtifacts {
        panel,
        metrics_csv,
        rows,
    })
}

// ── generate ─────────────────────────────────────────────────────────────

pub struct GenerateArgs {
    pub scene_seed: Option<u64>,
    pub ref_azimuth: f64,
    pub loss_kind: RefineLoss,
    pub weights: Option<PathBuf>,
    pub parallel: bool,
}

impl Default for GenerateArgs {
    fn default() -> Self {
        GenerateArgs {
            scene_seed: None,
            ref_azimuth: 0.0,
            loss_kind: RefineLoss::Rgsd,
            weights: None,
            parallel: false,
        }
    }
}

#[derive(Debug)]
pub struct GenerateArtifacts {
    pub coarse: StageRun,
    pub refined: StageRun,
    pub novel_csv: PathBuf,
    pub mean_novel_psnr_coarse: f64,
    pub mean_novel_psnr_refined: f64,
}

/// Eight evenly spaced test azimuths covering the full orbit, offset half a
/// step so none coincides with the reference pose or the fixed refine poses.
pub fn novel_azimuths() -> Vec<f64> {
    (0..8)
        .map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / 8.0)
        .collect()
}

/// Run both distillation stages against a scene and write field PNGs,
/// per-iteration logs, and novel-view metrics.
pub fn cmd_generate(cfg: &ExperimentConfig, args: &GenerateArgs) -> Result<GenerateArtifacts> {
    cfg.validate()?;
    let params = load_weights_for(cfg, args.weights.as_deref())?;
    let geom = cfg.geometry();
    let scene_seed = args.scene_seed.unwrap_or(cfg.scene_seeds[0]);
    let scene = Scene::generate(scene_seed, geom);
    let class = scene.class_id();
    let reference = render_view(&scene, &Pose::from_azimuth(args.ref_azimuth, &geom));
    // both stages speak the distillation ladder
    let schedule = NoiseSchedule::new(cfg.rgsd.steps, cfg.schedule.kind)?;

    let coarse = coarse_stage(
        &scene,
        &reference,
        class,
        &params,
        &schedule,
        &cfg.sds,
        &StageOptions {
            iters: cfg.stages.coarse_iters,
            seed: rng::derive_seed(cfg.seed, "coarse", 0),
            checkpoint_every: Some(cfg.stages.checkpoint_every),
            field_lr: cfg.stages.field_lr,
        },
    )?;
    let refined = refine_stage(
        &coarse.field,
        &scene,
        &reference,
        class,
        &params,
        &schedule,
        &cfg.rgsd,
        &StageOptions {
            iters: cfg.stages.refine_iters,
            seed: rng::derive_seed(cfg.seed, "refine", 0),
            checkpoint_every: Some(cfg.stages.checkpoint_every),
            field_lr: cfg.stages.field_lr,
        },
        args.loss_kind,
    )?;

    ensure_dir(&cfg.out_dir)?;
    save_png(&coarse.field.data, &cfg.out_dir.join("field_coarse.png"))?;
    save_png(&refined.field.data, &cfg.out_dir.join("field_refined.png"))?;
    for (stage, run) in [("coarse", &coarse), ("refine", &refined)] {
        for (iter, field) in &run.checkpoints {
            save_png(
                &field.data,
                &cfg.out_dir.join(format!("field_{stage}_iter{iter:04}.png")),
            )?;
        }
    }
    write_log_csv(&coarse.log, &cfg.out_dir.join("coarse_log.csv"))?;
    write_log_csv(&refined.log, &cfg.out_dir.join("refine_log.csv"))?;

    // novel-view quality of both stage outputs against the analytic scene
    let mut text = format!("azimuth,{}\n", metric_header(cfg));
    let mut views = Vec::new();
    let (mut sum_coarse, mut sum_refined) = (0.0, 0.0);
    for az in novel_azimuths() {
        let pose = Pose::from_azimuth(az, &geom);
        let gt = render_view(&scene, &pose);
        for (variant, field) in [("coarse", &coarse.field), ("refined", &refined.field)] {
            let img = crate::repfield::render(field, &pose, &geom)?;
            let m = metrics::report(&img, &gt.image)?;
            let capped = metrics::psnr_db_capped(&img, &gt.image)?;
            match variant {
                "coarse" => sum_coarse += capped,
                _ => sum_refined += capped,
            }
            text.push_str(&format!("{az},{}\n", metric_row(cfg, variant, &m)));
            if variant == "refined" {
                views.push(img);
            }
        }
    }
    let novel_csv = cfg.out_dir.join("novel_metrics.csv");
    std::fs::write(&novel_csv, text)?;
    let refs: Vec<&Tensor> = views.iter().collect();
    save_png(&hstack_panel(&refs)?, &cfg.out_dir.join("novel_views.png"))?;

    let n = novel_azimuths().len() as f64;
    Ok(GenerateArtifacts {
        coarse,
        refined,
        novel_csv,
        mean_novel_psnr_coarse: sum_coarse / n,
        mean_novel_psnr_refined: sum_refined / n,
    })
}
