//! Integrity of the committed fixtures: config, weights, loss curve,
//! thresholds, and the golden scene render must stay in sync with the
//! code that produced them. `regenerate_fixtures` (ignored by default)
//! rebuilds everything in place:
//!
//! ```text
//! cargo test -p distill-lab --test fixtures regenerate_fixtures -- --ignored --nocapture
//! ```

use std::fs;
use std::path::PathBuf;

use distill_lab::config::ExperimentConfig;
use distill_lab::harness;
use distill_lab::metrics;
use distill_lab::nncore::load_params;
use distill_lab::rgnv;
use distill_lab::scheduler::NoiseSchedule;
use distill_lab::toyworld::{
    dataset_digest, make_dataset, render_view, save_png, to_rgb8, Pose, Scene,
};
use distill_lab::verify::thresholds;
use distill_lab::{distill, rng};

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn fixture_config() -> ExperimentConfig {
    let path = fixtures_dir().join("lab.json");
    let cfg = ExperimentConfig::load(&path).expect("fixtures/lab.json must load");
    cfg.validate().expect("fixture config must validate");
    cfg
}

#[test]
fn fixture_config_loads_and_matches_defaults() {
    let cfg = fixture_config();
    let default = ExperimentConfig::default();
    let a = serde_json::to_value(&cfg).unwrap();
    let b = serde_json::to_value(&default).unwrap();
    assert_eq!(a, b, "fixtures/lab.json drifted from the built-in defaults");
}

#[test]
fn dataset_digest_is_frozen() {
    let cfg = fixture_config();
    let items = make_dataset(
        cfg.train.num_scenes,
        cfg.train.views_per_scene,
        rng::derive_seed(cfg.seed, "dataset", 0),
        cfg.geometry(),
    );
    let t = thresholds().unwrap();
    assert_eq!(
        dataset_digest(&items),
        t.dataset_digest,
        "procedural training corpus changed; regenerate fixtures if intended"
    );
}

#[test]
fn committed_weights_match_their_digest() {
    let params = load_params(&fixtures_dir().join("weights.dlw1"))
        .expect("fixtures/weights.dlw1 missing: run the regenerate_fixtures test");
    let t = thresholds().unwrap();
    assert_eq!(
        params.digest(),
        t.weights_digest,
        "committed weights do not match the frozen digest"
    );
}

#[test]
fn committed_loss_curve_decreased_and_met_the_ceiling() {
    let csv = fs::read_to_string(fixtures_dir().join("train_loss.csv"))
        .expect("fixtures/train_loss.csv missing: run the regenerate_fixtures test");
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .expect("loss column parses")
        })
        .collect();
    let t = thresholds().unwrap();
    assert!(losses.len() >= 2, "curve needs at least two epochs");
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(
        last < first,
        "training loss must decrease: first {first}, last {last}"
    );
    assert!(
        last <= t.train_final_loss_max,
        "final loss {last} exceeds the frozen ceiling {}",
        t.train_final_loss_max
    );
}

#[test]
fn golden_scene_render_is_stable() {
    let cfg = fixture_config();
    let scene = Scene::generate(cfg.scene_seeds[0], cfg.geometry());
    let view = render_view(&scene, &Pose::reference());
    let fresh = to_rgb8(&view.image).unwrap();
    let committed = image::open(fixtures_dir().join("scene.png"))
        .expect("fixtures/scene.png missing: run the regenerate_fixtures test")
        .to_rgb8();
    assert_eq!(
        (fresh.width(), fresh.height()),
        (committed.width(), committed.height()),
        "golden render changed size"
    );
    assert_eq!(
        fresh.as_raw(),
        committed.as_raw(),
        "golden scene render drifted pixel-wise"
    );
}

/// Rebuild every committed fixture from the current code: default config,
/// trained weights, loss curve, golden render, and measured thresholds.
#[test]
#[ignore = "rewrites the committed fixtures; run explicitly"]
fn regenerate_fixtures() {
    let dir = fixtures_dir();
    let mut cfg = ExperimentConfig::default();
    fs::write(
        dir.join("lab.json"),
        serde_json::to_string_pretty(&cfg).unwrap() + "\n",
    )
    .unwrap();

    cfg.out_dir = dir.clone();
    let art = harness::cmd_train(&cfg).expect("fixture training run");
    println!("final epoch loss: {}", art.final_loss);

    let items = make_dataset(
        cfg.train.num_scenes,
        cfg.train.views_per_scene,
        rng::derive_seed(cfg.seed, "dataset", 0),
        cfg.geometry(),
    );
    let params = load_params(&art.weights).unwrap();

    let geom = cfg.geometry();
    let scene = Scene::generate(cfg.scene_seeds[0], geom);
    let reference = render_view(&scene, &Pose::reference());
    save_png(&reference.image, &dir.join("scene.png")).unwrap();

    // measure the self-enhancement floor
    let schedule = NoiseSchedule::new(cfg.rgnv.steps, cfg.schedule.kind).unwrap();
    let out = rgnv::enhance(
        &params,
        &schedule,
        scene.class_id(),
        &reference.image,
        &reference.depth,
        &reference.image,
        &reference.depth,
        &cfg.rgnv,
    )
    .unwrap();
    let self_mse = metrics::mse(&out.enhanced, &reference.image).unwrap();
    println!("self-enhance mse: {self_mse:.3e}");

    // measure the coarse-stage reference quality
    let ladder = NoiseSchedule::new(cfg.rgsd.steps, cfg.schedule.kind).unwrap();
    let coarse = distill::coarse_stage(
        &scene,
        &reference,
        scene.class_id(),
        &params,
        &ladder,
        &cfg.sds,
        &distill::StageOptions {
            field_lr: cfg.stages.field_lr,
            ..distill::StageOptions::new(
                cfg.stages.coarse_iters,
                rng::derive_seed(cfg.seed, "verify-distill", 0),
            )
        },
    )
    .unwrap();
    let coarse_psnr = coarse.log.last().unwrap().psnr_ref;
    println!("coarse reference psnr: {coarse_psnr:.2} dB");
    assert!(
        coarse_psnr >= 25.0,
        "fixture coarse stage must reach 25 dB at the reference pose, got {coarse_psnr:.2}"
    );

    let thresholds = serde_json::json!({
        "dataset_digest": dataset_digest(&items),
        "weights_digest": params.digest(),
        "train_final_loss_max": art.final_loss * 1.25,
        "enhance_self_mse_max": self_mse * 10.0,
        "coarse_ref_psnr_min": 25.0f64.max((coarse_psnr - 3.0).floor()),
    });
    fs::write(
        dir.join("thresholds.json"),
        serde_json::to_string_pretty(&thresholds).unwrap() + "\n",
    )
    .unwrap();
    println!("thresholds written to {}", dir.join("thresholds.json").display());
}
