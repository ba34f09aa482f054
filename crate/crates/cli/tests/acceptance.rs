//! Acceptance gate: one test per release criterion, each at its stated
//! tolerance and budget, printing one `ACCEPTANCE <n> ...: PASS` line on
//! success (visible with `--nocapture`; a failed criterion fails its test).
//!
//! Criteria 4, 5, 7, and 11 share one trained fixture: a 200-case small-image
//! dataset plus a localizer and tracker trained on it at the budgeted epoch
//! counts.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use tagstrain_core::baseline::{track_ssd, SSDConfig};
use tagstrain_core::geometry::{build_grid, AnnulusSpec, LandmarkGrid, Orientation, Point2};
use tagstrain_core::image::{Cine, Image};
use tagstrain_core::io::{
    ensure_dir, read_cine, read_landmarks, write_cine, write_landmarks, write_manifest,
    LandmarkDoc,
};
use tagstrain_core::models::{
    full_pipeline, load_localizer_dataset, load_tracker_dataset, localizer_schedule,
    tracker_schedule, train_localizer, train_tracker, Checkpoint, CropSource, Localizer,
    LocalizerConfig, Tracker, TrackerConfig, TrainOptions, LOCALIZER_BASE_LR, TRACKER_BASE_LR,
};
use tagstrain_core::nn::gradcheck::standard_op_sweep;
use tagstrain_core::nn::{Mode, Tape};
use tagstrain_core::phantom::{
    deform, generate_case, generate_dataset, ManifestEntry, PhantomGenConfig, PhantomSpec, Split,
};
use tagstrain_core::preprocess::PreprocConfig;
use tagstrain_core::rng::stream_rng;
use tagstrain_core::stats::{bland_altman, t_two_sided_p, welch_t_test};
use tagstrain_core::strain::{slice_strain, strain_curve};

// ---------------------------------------------------------------------------
// Shared trained fixture
// ---------------------------------------------------------------------------

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    preproc: PreprocConfig,
    gen_seconds: f64,
    loc_ckpt: Checkpoint,
    loc_ckpt_path: PathBuf,
    loc_seconds: f64,
    trk_ckpt: Checkpoint,
    trk_ckpt_path: PathBuf,
    trk_seconds: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

const DATASET_SEED: u64 = 2024;
const TRAIN_SEED: u64 = 11;
const LOCALIZER_EPOCHS: usize = 30;
const TRACKER_EPOCHS: usize = 50;

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let root = tmp.path().join("dataset");
        ensure_dir(&root).unwrap();
        ensure_dir(&root.join("cines")).unwrap();
        ensure_dir(&root.join("landmarks")).unwrap();

        let gen_cfg = PhantomGenConfig::toy();
        let t0 = Instant::now();
        let cases = generate_dataset(&gen_cfg, 200, DATASET_SEED).expect("generate 200 cases");
        let mut entries = Vec::with_capacity(cases.len());
        for (case, split) in cases {
            let id = case.cine.id.clone();
            let cine_rel = format!("cines/{id}.bin");
            let lm_rel = format!("landmarks/{id}.json");
            write_cine(&root.join(&cine_rel), &case.cine).unwrap();
            write_landmarks(
                &root.join(&lm_rel),
                &LandmarkDoc::new(case.truth, case.spec.pixel_spacing_mm),
            )
            .unwrap();
            entries.push(ManifestEntry {
                case_id: id,
                cine_path: cine_rel,
                landmarks_path: lm_rel,
                bbox: case.truth_bbox,
                split,
                spec: case.spec,
                region: None,
            });
        }
        write_manifest(&root.join("manifest.json"), &entries).unwrap();
        let gen_seconds = t0.elapsed().as_secs_f64();

        let loc_cfg = LocalizerConfig::toy();
        let data = load_localizer_dataset(&root, &entries, loc_cfg.input_size).unwrap();
        let t0 = Instant::now();
        let loc_run =
            train_localizer(&data, &loc_cfg, LOCALIZER_EPOCHS, TRAIN_SEED, &TrainOptions::default())
                .expect("localizer training");
        let loc_seconds = t0.elapsed().as_secs_f64();
        let loc_ckpt_path = tmp.path().join("localizer.ckpt");
        loc_run.checkpoint.save(&loc_ckpt_path).unwrap();

        let preproc = PreprocConfig::toy();
        let trk_cfg = TrackerConfig::toy();
        let tdata = load_tracker_dataset(&root, &entries, &preproc, CropSource::TruthBox).unwrap();
        let t0 = Instant::now();
        let trk_run =
            train_tracker(&tdata, &trk_cfg, TRACKER_EPOCHS, TRAIN_SEED, &TrainOptions::default())
                .expect("tracker training");
        let trk_seconds = t0.elapsed().as_secs_f64();
        let trk_ckpt_path = tmp.path().join("tracker.ckpt");
        trk_run.checkpoint.save(&trk_ckpt_path).unwrap();

        Fixture {
            _tmp: tmp,
            root,
            entries,
            preproc,
            gen_seconds,
            loc_ckpt: loc_run.checkpoint,
            loc_ckpt_path,
            loc_seconds,
            trk_ckpt: trk_run.checkpoint,
            trk_ckpt_path,
            trk_seconds,
        }
    })
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagstrain"))
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn run_bin(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Truth landmark sequence of a spec, straight from the forward map.
fn truth_sequence(spec: &PhantomSpec) -> tagstrain_core::geometry::LandmarkSequence {
    let grid = build_grid(&spec.annulus).unwrap();
    let frames: Vec<LandmarkGrid> = (0..spec.frame_count)
        .map(|t| grid.map(|p| deform(spec, p, t)).unwrap())
        .collect();
    tagstrain_core::geometry::LandmarkSequence::new(frames).unwrap()
}

/// Exact point samples of the resting tagged scene translated rigidly by
/// `shift` pixels: the annulus levels and the grid-tag modulation of `spec`
/// at frame 0, evaluated at continuous coordinates, with no interpolation
/// and no fading.
fn tagged_scene(spec: &PhantomSpec, shift: (f64, f64)) -> Image {
    let c = spec.annulus.center;
    let s = spec.tag_spacing_px();
    let (ca, sa) = (spec.tag_angle.cos(), spec.tag_angle.sin());
    let depth = spec.tag_depth;
    let mut im = Image::zeros(spec.image_h, spec.image_w);
    for row in 0..spec.image_h {
        for col in 0..spec.image_w {
            let x = Point2::new(col as f64 - shift.0, row as f64 - shift.1);
            let rho = ((x.x - c.x).powi(2) + (x.y - c.y).powi(2)).sqrt();
            let v = if rho < spec.annulus.r_endo {
                spec.blood_level
            } else {
                let level = if rho <= spec.annulus.r_epi {
                    spec.background_level
                } else {
                    spec.outside_level
                };
                let u = (ca * x.x + sa * x.y) / s;
                let w = (-sa * x.x + ca * x.y) / s;
                let cu = (std::f64::consts::PI * u).cos();
                let cw = (std::f64::consts::PI * w).cos();
                level * (1.0 - depth * cu * cu) * (1.0 - depth * cw * cw)
            };
            im.set(row, col, v as f32);
        }
    }
    im
}

const STRAIN_FIELDS: usize = 5;

fn strain_vec(s: &tagstrain_core::strain::SliceStrain) -> [f64; STRAIN_FIELDS] {
    [s.eps_r, s.eps_c, s.eps_c_subendo, s.eps_c_midwall, s.eps_c_subepi]
}

fn max_strain_diff(
    a: &tagstrain_core::strain::SliceStrain,
    b: &tagstrain_core::strain::SliceStrain,
) -> f64 {
    strain_vec(a)
        .iter()
        .zip(strain_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Strain closed-form oracle on randomized phantoms
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_strain_oracle_exactness() {
    let t0 = Instant::now();
    let mut rng = stream_rng(101, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let r_endo = rng.random_range(14.0..22.0);
        let wall = rng.random_range(8.0..14.0);
        let spec = PhantomSpec {
            annulus: AnnulusSpec::new(
                Point2::new(rng.random_range(118.0..138.0), rng.random_range(118.0..138.0)),
                r_endo,
                r_endo + wall,
                rng.random_range(0.0..std::f64::consts::TAU),
                Orientation::Ccw,
            )
            .unwrap(),
            contraction: rng.random_range(0.05..0.30),
            rotation_max: rng.random_range(0.0..0.15),
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let curve = strain_curve(&truth_sequence(&spec)).unwrap();
        assert_eq!(curve.es_frame, spec.es_frame, "peak contraction marks ES");

        let r_epi = spec.annulus.r_epi;
        for (t, got) in curve.per_frame.iter().enumerate() {
            // Ring radius r0 maps to sqrt(r_endo(t)^2 + r0^2 - r_endo^2), so
            // each ring's circumferential strain and the transmural chord
            // strain have closed forms.
            let ring_eps: Vec<f64> = (0..7)
                .map(|k| {
                    let r0 = r_endo + wall * k as f64 / 6.0;
                    let stretch = spec.deformed_radius(r0, t) / r0;
                    0.5 * (stretch * stretch - 1.0)
                })
                .collect();
            let chord =
                (spec.deformed_radius(r_epi, t) - spec.deformed_radius(r_endo, t)) / wall;
            let want_r = 0.5 * (chord * chord - 1.0);
            let diffs = [
                (got.eps_r - want_r).abs(),
                (got.eps_c - ring_eps.iter().sum::<f64>() / 7.0).abs(),
                (got.eps_c_subendo - ring_eps[1]).abs(),
                (got.eps_c_midwall - ring_eps[3]).abs(),
                (got.eps_c_subepi - ring_eps[5]).abs(),
            ];
            for d in diffs {
                worst = worst.max(d);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-9, "strain deviates from the closed form by {worst:.3e}");
    assert!(secs < 10.0, "oracle sweep took {secs:.1}s, budget 10s");
    println!("ACCEPTANCE 01 strain closed-form oracle: PASS (max |err| {worst:.2e}, {secs:.2}s)");
}

// ---------------------------------------------------------------------------
// 2. Rigid-motion and scaling invariance
// ---------------------------------------------------------------------------

fn rigid(grid: &LandmarkGrid, angle: f64, tx: f64, ty: f64) -> LandmarkGrid {
    let (s, c) = angle.sin_cos();
    grid.map(|p| Point2::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty)).unwrap()
}

fn scaled(grid: &LandmarkGrid, k: f64, cx: f64, cy: f64) -> LandmarkGrid {
    grid.map(|p| Point2::new(cx + k * (p.x - cx), cy + k * (p.y - cy))).unwrap()
}

#[test]
fn criterion_02_rigid_and_scale_invariance() {
    let mut rng = stream_rng(202, 0);
    let mut worst_rigid = 0.0f64;
    let mut worst_common = 0.0f64;
    let mut worst_pure = 0.0f64;
    for _ in 0..1000 {
        let cx = rng.random_range(40.0..90.0);
        let cy = rng.random_range(40.0..90.0);
        let r_endo = rng.random_range(10.0..20.0);
        let wall = rng.random_range(5.0..12.0);
        let annulus = AnnulusSpec::new(
            Point2::new(cx, cy),
            r_endo,
            r_endo + wall,
            rng.random_range(0.0..std::f64::consts::TAU),
            Orientation::Ccw,
        )
        .unwrap();
        let reference = build_grid(&annulus).unwrap();

        // A generic smooth current frame: incompressible radial remap of the
        // annulus plus a solid rotation.
        let re_t = r_endo * rng.random_range(0.75..1.0);
        let phi = rng.random_range(-0.2..0.2);
        let current = reference
            .map(|p| {
                let (dx, dy) = (p.x - cx, p.y - cy);
                let r0 = (dx * dx + dy * dy).sqrt();
                let r = (re_t * re_t + r0 * r0 - r_endo * r_endo).sqrt();
                let theta = dy.atan2(dx) + phi;
                Point2::new(cx + r * theta.cos(), cy + r * theta.sin())
            })
            .unwrap();
        let base = slice_strain(&reference, &current).unwrap();

        // Independent rigid motions of each frame leave every measure alone.
        let moved = slice_strain(
            &rigid(
                &reference,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            ),
            &rigid(
                &current,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
            ),
        )
        .unwrap();
        worst_rigid = worst_rigid.max(max_strain_diff(&base, &moved));

        // A common scaling of both frames cancels in the length ratios.
        let k = rng.random_range(0.7..1.3);
        let both = slice_strain(
            &scaled(&reference, k, rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
            &scaled(&current, k, rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
        )
        .unwrap();
        worst_common = worst_common.max(max_strain_diff(&base, &both));

        // Pure scaling of one frame: every segment stretches by k.
        let k2 = rng.random_range(0.7..1.3);
        let pure = slice_strain(
            &reference,
            &scaled(&reference, k2, rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
        )
        .unwrap();
        let want = 0.5 * (k2 * k2 - 1.0);
        for got in strain_vec(&pure) {
            worst_pure = worst_pure.max((got - want).abs());
        }
    }
    assert!(worst_rigid < 1e-9, "rigid motion shifted strain by {worst_rigid:.3e}");
    assert!(worst_common < 1e-9, "common scaling shifted strain by {worst_common:.3e}");
    assert!(worst_pure < 1e-9, "pure scaling off closed form by {worst_pure:.3e}");
    println!(
        "ACCEPTANCE 02 rigid/scale invariance: PASS (rigid {worst_rigid:.2e}, common {worst_common:.2e}, pure {worst_pure:.2e})"
    );
}

// ---------------------------------------------------------------------------
// 3. Gradient checks for every differentiable operation
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_gradient_checks() {
    let t0 = Instant::now();
    let entries = standard_op_sweep(20, 0xACCE97).expect("sweep runs");
    let secs = t0.elapsed().as_secs_f64();
    let ops: Vec<&str> = entries.iter().map(|e| e.op).collect();
    // The box-regression loss is the plain MSE head ("mse_loss"); the
    // composite tracking loss has its own entry.
    for required in [
        "conv2d",
        "batch_norm2d",
        "max_pool2d",
        "relu",
        "leaky_relu",
        "dropout",
        "linear",
        "lstm_sequence",
        "reshape_scale_slice",
        "mse_loss",
        "composite_tracking_loss",
    ] {
        assert!(ops.contains(&required), "sweep must cover {required}, got {ops:?}");
    }
    let mut worst = 0.0f64;
    for e in &entries {
        assert!(e.cases >= 20, "{} ran only {} shapes", e.op, e.cases);
        assert!(
            e.max_rel_err < 1e-4,
            "{}: max relative error {:.3e} exceeds 1e-4",
            e.op,
            e.max_rel_err
        );
        worst = worst.max(e.max_rel_err);
    }
    assert!(secs < 60.0, "gradient sweep took {secs:.1}s, budget 60s");
    println!("ACCEPTANCE 03 gradient checks: PASS (11 ops, max rel err {worst:.2e}, {secs:.1}s)");
}

// ---------------------------------------------------------------------------
// 4. Localizer desk-scale training
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_localizer_desk_scale_training() {
    let fx = fixture();
    let budget = fx.gen_seconds + fx.loc_seconds;
    assert!(
        budget <= 600.0,
        "dataset generation + localizer training took {budget:.0}s, budget 600s"
    );

    let mut loc = Localizer::from_checkpoint(&fx.loc_ckpt).unwrap();
    let input = loc.cfg.input_size;
    assert_eq!(fx.entries[0].spec.image_w, input, "small profile trains unpadded");
    let data = load_localizer_dataset(&fx.root, &fx.entries, input).unwrap();
    assert_eq!(data.val.len(), 36, "72/18/10 split of 200 cases");

    let mut ious = Vec::new();
    for s in &data.val {
        let pred = loc.predict_box(&s.pixels).unwrap();
        let iou = pred.iou(&s.truth_box);
        if iou < 0.5 {
            // A weak localization is still acceptable only when the expanded
            // crop would contain the whole annulus.
            let expanded =
                pred.expand(fx.preproc.expand_fraction, input as f64, input as f64).unwrap();
            let e = fx.entries.iter().find(|e| e.case_id == s.case_id).unwrap();
            let doc = read_landmarks(&fx.root.join(&e.landmarks_path)).unwrap();
            for p in doc.sequence.frame(0).points() {
                assert!(
                    p.x >= expanded.x_min
                        && p.x <= expanded.x_max
                        && p.y >= expanded.y_min
                        && p.y <= expanded.y_max,
                    "case {}: IoU {iou:.2} and annulus point ({:.1},{:.1}) escapes the expanded box",
                    s.case_id,
                    p.x,
                    p.y
                );
            }
        }
        ious.push(iou);
    }
    let mean_iou = mean(&ious);
    let min_iou = ious.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        mean_iou >= 0.85,
        "validation mean IoU {mean_iou:.3} below 0.85 (min {min_iou:.3})"
    );
    println!(
        "ACCEPTANCE 04 localizer training: PASS (val mean IoU {mean_iou:.3}, min {min_iou:.3}, gen {:.0}s + train {:.0}s)",
        fx.gen_seconds, fx.loc_seconds
    );
}

// ---------------------------------------------------------------------------
// 5. Tracker desk-scale training + overfit-one smoke
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_tracker_desk_scale_training() {
    let fx = fixture();
    assert!(
        fx.trk_seconds <= 1800.0,
        "tracker training took {:.0}s, budget 1800s",
        fx.trk_seconds
    );

    let mut loc = Localizer::from_checkpoint(&fx.loc_ckpt).unwrap();
    let mut trk = Tracker::from_checkpoint(&fx.trk_ckpt).unwrap();
    let test_entries: Vec<&ManifestEntry> =
        fx.entries.iter().filter(|e| e.split == Split::Test).collect();
    assert_eq!(test_entries.len(), 20, "held-out split of 200 cases");

    let mut d_mid = Vec::new();
    let mut d_r = Vec::new();
    for e in &test_entries {
        let cine = read_cine(&fx.root.join(&e.cine_path)).unwrap();
        let truth = read_landmarks(&fx.root.join(&e.landmarks_path)).unwrap();
        let tcurve = strain_curve(&truth.sequence).unwrap();
        let out = full_pipeline(&mut loc, &mut trk, &cine, &fx.preproc).unwrap();
        let es = tcurve.es_frame;
        d_mid.push(out.strain.per_frame[es].eps_c_midwall - tcurve.per_frame[es].eps_c_midwall);
        d_r.push(out.strain.per_frame[es].eps_r - tcurve.per_frame[es].eps_r);
    }
    let bias_mid = mean(&d_mid);
    let sd_mid = sample_sd(&d_mid);
    let bias_r = mean(&d_r);
    assert!(
        bias_mid.abs() <= 0.01,
        "held-out ES midwall circumferential bias {bias_mid:.4} exceeds 0.01"
    );
    assert!(sd_mid <= 0.05, "held-out ES midwall precision {sd_mid:.4} exceeds 0.05");
    assert!(bias_r.abs() <= 0.03, "held-out ES radial bias {bias_r:.4} exceeds 0.03");

    // Overfit-one smoke through the training command: a single case with a
    // constant learning rate must collapse the loss below 1% of its start
    // within 200 epochs.
    let one = vec![fx.entries[0].clone()];
    let one_manifest = fx.root.join("overfit_manifest.json");
    write_manifest(&one_manifest, &one).unwrap();
    let cfg_path = fx.root.join("overfit_config.json");
    std::fs::write(
        &cfg_path,
        r#"{"tracker": {"train": {"base_lr": 0.001, "schedule": {"start_epoch": 0, "period_epochs": 0, "decay_factor": 1.0}}}}"#,
    )
    .unwrap();
    let ckpt = fx.root.join("overfit.ckpt");
    run_bin(&[
        "train",
        "tracker",
        "--data",
        one_manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "200",
        "--seed",
        "3",
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    let metrics = std::fs::read_to_string(ckpt.with_extension("metrics.jsonl")).unwrap();
    let losses: Vec<f64> = metrics
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["split"] == "train")
        .map(|v| v["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    let ratio = losses.last().unwrap() / losses.first().unwrap();
    assert!(
        ratio < 0.01,
        "overfit-one: final loss is {:.3}% of initial, needs < 1%",
        ratio * 100.0
    );

    println!(
        "ACCEPTANCE 05 tracker training: PASS (midwall bias {bias_mid:.4}, sd {sd_mid:.4}, radial bias {bias_r:.4}, overfit ratio {:.4}, train {:.0}s)",
        ratio, fx.trk_seconds
    );
}

// ---------------------------------------------------------------------------
// 6. Composite-loss decomposition under a pure translation
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_composite_loss_translation_structure() {
    let seq = truth_sequence(&PhantomSpec::toy());
    let frames = seq.len();
    let mut truth = Vec::with_capacity(frames * 336);
    let mut pred = Vec::with_capacity(frames * 336);
    for t in 0..frames {
        for p in seq.frame(t).points() {
            truth.extend_from_slice(&[p.x, p.y]);
            pred.extend_from_slice(&[p.x + 3.0, p.y + 4.0]);
        }
    }
    let mut tape: Tape<f64> = Tape::new(Mode::Eval, 0);
    let pred_node = tape.input(&[frames, 336], pred).unwrap();
    let omega = 2.5;
    let mask = vec![true; frames];
    let (loss, parts) = tape.composite_tracking_loss(pred_node, &truth, omega, &mask).unwrap();
    let total = tape.scalar(loss);

    // A global (3,4) px shift moves every landmark by 5 px and no strain
    // term: total = mean squared displacement = 25 with both strain terms 0.
    assert!((total - 25.0).abs() < 1e-6, "total {total} != 25");
    assert!((parts.mse_position - 25.0).abs() < 1e-6, "mse {}", parts.mse_position);
    assert!(parts.radial_term.abs() < 1e-6, "radial term {}", parts.radial_term);
    assert!(parts.circ_term.abs() < 1e-6, "circumferential term {}", parts.circ_term);
    println!(
        "ACCEPTANCE 06 composite loss structure: PASS (total {total:.9}, strain terms {:.1e}/{:.1e})",
        parts.radial_term, parts.circ_term
    );
}

// ---------------------------------------------------------------------------
// 7. Baseline registration accuracy and learned-tracker ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_baseline_registration() {
    // A noise-free tagged scene on a 96 px canvas, translated rigidly.
    let scene_spec = PhantomSpec {
        image_w: 96,
        image_h: 96,
        annulus: AnnulusSpec::new(
            Point2::new(48.0, 48.0),
            10.0,
            18.0,
            std::f64::consts::PI,
            Orientation::Ccw,
        )
        .unwrap(),
        noise_sigma: 0.0,
        ..PhantomSpec::toy()
    };
    let grid = build_grid(&scene_spec.annulus).unwrap();

    // (a) Integer translation is recovered exactly at the integer stage.
    let (dx, dy) = (2.0, 1.0);
    let frames: Vec<Image> =
        (0..5).map(|t| tagged_scene(&scene_spec, (dx * t as f64, dy * t as f64))).collect();
    let cine = Cine::new("int_shift", 1.4, frames).unwrap();
    let mut worst_int = 0.0f64;
    for subpixel in [false, true] {
        let cfg = SSDConfig { subpixel, ..SSDConfig::default() };
        let outcome = track_ssd(&cine, &grid, &cfg).unwrap();
        assert!(outcome.status.iter().all(|&ok| ok), "clean track on clean shifts");
        for t in 0..5 {
            for (i, p) in outcome.sequence.frame(t).points().iter().enumerate() {
                let want = grid.points()[i];
                let err = (p.x - (want.x + dx * t as f64))
                    .abs()
                    .max((p.y - (want.y + dy * t as f64)).abs());
                worst_int = worst_int.max(err);
            }
        }
    }
    assert!(worst_int == 0.0, "integer translation must track exactly, worst {worst_int:.2e}");

    // (b) Half-pixel steps: the per-frame tracked displacement must land
    // within 0.1 px of (0.5, 0) after quadratic refinement. The probe grid
    // sits in the uniformly tagged region, where block matching is
    // well-posed: point-sampled intensity edges alias under sub-pixel
    // shifts (pixel locking), and on a periodic grating displacement is
    // identifiable only modulo the tag period (~4.3 px here), so the
    // search radius stays below half a period.
    let frames: Vec<Image> =
        (0..3).map(|t| tagged_scene(&scene_spec, (0.5 * t as f64, 0.0))).collect();
    let cine = Cine::new("half_shift", 1.4, frames).unwrap();
    let probe = build_grid(
        &AnnulusSpec::new(
            Point2::new(48.0, 48.0),
            30.0,
            38.0,
            std::f64::consts::PI,
            Orientation::Ccw,
        )
        .unwrap(),
    )
    .unwrap();
    let cfg = SSDConfig { search_radius: 2, ..SSDConfig::default() };
    let outcome = track_ssd(&cine, &probe, &cfg).unwrap();
    let mut worst_half = 0.0f64;
    for t in 1..3 {
        let prev = outcome.sequence.frame(t - 1);
        for (a, b) in outcome.sequence.frame(t).points().iter().zip(prev.points()) {
            worst_half = worst_half.max((a.x - b.x - 0.5).abs()).max((a.y - b.y).abs());
        }
    }
    assert!(worst_half <= 0.1, "half-pixel step error {worst_half:.3} px exceeds 0.1 px");

    // (c)+(d) Mild-contraction noise-free phantoms: the baseline stays within
    // 0.05 of the true ES midwall strain, and the learned tracker does at
    // least as well on the same set.
    let fx = fixture();
    let mut loc = Localizer::from_checkpoint(&fx.loc_ckpt).unwrap();
    let mut trk = Tracker::from_checkpoint(&fx.trk_ckpt).unwrap();
    let mut rng = stream_rng(707, 0);
    let mut base_errs = Vec::new();
    let mut trk_errs = Vec::new();
    for i in 0..10 {
        let r_endo = rng.random_range(9.0..11.0);
        let spec = PhantomSpec {
            annulus: AnnulusSpec::new(
                Point2::new(rng.random_range(30.0..34.0), rng.random_range(30.0..34.0)),
                r_endo,
                r_endo + rng.random_range(4.5..6.0),
                std::f64::consts::PI,
                Orientation::Ccw,
            )
            .unwrap(),
            contraction: rng.random_range(0.10..0.18),
            rotation_max: rng.random_range(0.0..0.05),
            noise_sigma: 0.0,
            rng_seed: 9000 + i,
            ..PhantomSpec::toy()
        };
        let case = generate_case(&spec, &format!("mild_{i}")).unwrap();
        let tcurve = strain_curve(&case.truth).unwrap();
        let es = tcurve.es_frame;
        let want = tcurve.per_frame[es].eps_c_midwall;

        let outcome = track_ssd(&case.cine, case.truth.frame(0), &SSDConfig::default()).unwrap();
        let bcurve = strain_curve(&outcome.sequence).unwrap();
        base_errs.push((bcurve.per_frame[es].eps_c_midwall - want).abs());

        let out = full_pipeline(&mut loc, &mut trk, &case.cine, &fx.preproc).unwrap();
        trk_errs.push((out.strain.per_frame[es].eps_c_midwall - want).abs());
    }
    let base_max = base_errs.iter().copied().fold(0.0, f64::max);
    let base_mean = mean(&base_errs);
    let trk_mean = mean(&trk_errs);
    assert!(
        base_max <= 0.05,
        "baseline ES midwall strain error {base_max:.4} exceeds 0.05 on a mild phantom"
    );
    assert!(
        trk_mean <= base_mean,
        "learned tracker (mean |err| {trk_mean:.4}) must not trail the baseline ({base_mean:.4})"
    );
    println!(
        "ACCEPTANCE 07 baseline registration: PASS (int {worst_int:.1e}, half-px {worst_half:.3}, baseline mean {base_mean:.4} max {base_max:.4}, tracker mean {trk_mean:.4})"
    );
}

// ---------------------------------------------------------------------------
// 8. Statistics against independent oracles
// ---------------------------------------------------------------------------

/// Two-sided Student-t p-value by quadrature, fully independent of the
/// library's gamma/continued-fraction path: substituting x = sqrt(df)*tan(u)
/// turns the density into cos^(df-1), so p = 1 - I(atan(|t|/sqrt(df)))/I(pi/2)
/// with I the Simpson integral of cos^(df-1).
fn t_p_quadrature(t: f64, df: u32) -> f64 {
    fn simpson_cos_pow(upper: f64, power: i32, n: usize) -> f64 {
        let h = upper / n as f64;
        let f = |u: f64| u.cos().powi(power);
        let mut acc = f(0.0) + f(upper);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }
    let theta = (t.abs() / (df as f64).sqrt()).atan();
    let partial = simpson_cos_pow(theta, df as i32 - 1, 8192);
    let full = simpson_cos_pow(std::f64::consts::FRAC_PI_2, df as i32 - 1, 8192);
    1.0 - partial / full
}

#[test]
fn criterion_08_statistics_oracles() {
    // Three-pair agreement example, verified by hand: d = {0.01,-0.02,0.00}.
    let ba = bland_altman(&[(-0.19, -0.20), (-0.20, -0.18), (-0.21, -0.21)]).unwrap();
    assert!((ba.agreement.bias - (-0.0033333333)).abs() < 1e-6, "bias {}", ba.agreement.bias);
    assert!(
        (ba.agreement.precision - 0.0152752523).abs() < 1e-6,
        "precision {}",
        ba.agreement.precision
    );
    assert!((ba.agreement.loa_low - (-0.0332728279)).abs() < 1e-6, "loa {}", ba.agreement.loa_low);
    assert!((ba.agreement.loa_high - 0.0266061612).abs() < 1e-6, "loa {}", ba.agreement.loa_high);

    // Welch example: t = -0.03/sqrt(2e-4/3), Welch-Satterthwaite df = 4.
    let w = welch_t_test(&[-0.19, -0.20, -0.21], &[-0.17, -0.18, -0.16], 0.0033).unwrap();
    assert!((w.t - (-3.6742)).abs() < 1e-4, "welch t {}", w.t);
    assert!((w.df - 4.0).abs() < 1e-9, "welch df {}", w.df);
    assert!((w.p - 0.0213).abs() < 1e-4, "welch p {}", w.p);

    // p-values against the quadrature oracle across the df range.
    let mut worst = 0.0f64;
    for df in 1..=200u32 {
        for t in [0.0, 0.1, 0.5, 1.0, 2.0, -2.0, 3.5, 7.0] {
            let got = t_two_sided_p(t, df as f64).unwrap();
            let want = t_p_quadrature(t, df);
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst < 1e-6, "p-value deviates from quadrature by {worst:.3e}");
    println!("ACCEPTANCE 08 statistics oracles: PASS (max p deviation {worst:.2e})");
}

// ---------------------------------------------------------------------------
// 9. End-to-end determinism of the command-line pipeline
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_end_to_end_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();

    // phantom gen twice.
    let mut dataset_bytes = Vec::new();
    for name in ["d1", "d2"] {
        let dir = tmp.path().join(name);
        run_bin(&[
            "phantom", "gen", "--out", dir.to_str().unwrap(), "--n", "4", "--seed", "13",
            "--config", cfg,
        ]);
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            paths.sort();
            for p in paths {
                if p.is_dir() {
                    walk(root, &p, out);
                } else {
                    out.push((
                        p.strip_prefix(root).unwrap().to_str().unwrap().to_string(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        walk(&dir, &dir, &mut files);
        dataset_bytes.push(files);
    }
    assert_eq!(dataset_bytes[0], dataset_bytes[1], "phantom gen must be reproducible");

    // train twice (both networks), infer twice.
    let manifest = tmp.path().join("d1/manifest.json");
    let mut ckpts = Vec::new();
    for (net, epochs) in [("localizer", "2"), ("tracker", "1")] {
        let mut pair = Vec::new();
        for name in ["a", "b"] {
            let out = tmp.path().join(format!("{net}_{name}.ckpt"));
            run_bin(&[
                "train", net, "--data", manifest.to_str().unwrap(), "--out",
                out.to_str().unwrap(), "--epochs", epochs, "--seed", "5", "--config", cfg,
            ]);
            pair.push((
                std::fs::read(&out).unwrap(),
                std::fs::read(out.with_extension("metrics.jsonl")).unwrap(),
            ));
        }
        assert_eq!(pair[0], pair[1], "{net} training must be reproducible");
        ckpts.push(tmp.path().join(format!("{net}_a.ckpt")));
    }

    let cine = tmp.path().join("d1/cines/case_0000.bin");
    let mut outs = Vec::new();
    for name in ["p1.json", "p2.json"] {
        let out = tmp.path().join(name);
        run_bin(&[
            "infer",
            "--localizer",
            ckpts[0].to_str().unwrap(),
            "--tracker",
            ckpts[1].to_str().unwrap(),
            "--cine",
            cine.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg,
        ]);
        outs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outs[0], outs[1], "inference must be reproducible");
    println!("ACCEPTANCE 09 end-to-end determinism: PASS (gen, train x2, infer byte-identical)");
}

// ---------------------------------------------------------------------------
// 10. Learning-rate schedules
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_learning_rate_schedules() {
    let loc = localizer_schedule();
    for epoch in 0..=14 {
        assert_eq!(loc.lr_at(LOCALIZER_BASE_LR, epoch), 1e-3, "flat through epoch {epoch}");
    }
    let at15 = loc.lr_at(LOCALIZER_BASE_LR, 15);
    assert!((at15 - 7.071e-4).abs() < 1e-7, "epoch 15 lr {at15}");
    assert!((at15 - 1e-3 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-18);
    let at20 = loc.lr_at(LOCALIZER_BASE_LR, 20);
    assert!((at20 - 5e-4).abs() < 1e-12, "epoch 20 lr {at20}");

    let trk = tracker_schedule();
    for epoch in 0..10 {
        assert_eq!(trk.lr_at(TRACKER_BASE_LR, epoch), 1e-4);
    }
    for (start, events) in [(10, 1), (20, 2), (30, 3)] {
        for epoch in start..start + 10 {
            let got = trk.lr_at(TRACKER_BASE_LR, epoch);
            let want = 1e-4 * std::f64::consts::FRAC_1_SQRT_2.powi(events);
            assert!(
                (got - want).abs() < 1e-18,
                "epoch {epoch}: lr {got} != {want} ({events} decays)"
            );
        }
    }
    // Each decay boundary shrinks the rate by exactly 1/sqrt(2).
    for boundary in [10usize, 20, 30, 40] {
        let ratio = trk.lr_at(TRACKER_BASE_LR, boundary) / trk.lr_at(TRACKER_BASE_LR, boundary - 1);
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }
    println!("ACCEPTANCE 10 learning-rate schedules: PASS (localizer hold-then-decay, tracker decade decay)");
}

// ---------------------------------------------------------------------------
// 11. Throughput reporting
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_throughput_reported() {
    let fx = fixture();
    let test_entry = fx.entries.iter().find(|e| e.split == Split::Test).unwrap();
    let cine = fx.root.join(&test_entry.cine_path);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pred.json");
    let stdout = run_bin(&[
        "infer",
        "--localizer",
        fx.loc_ckpt_path.to_str().unwrap(),
        "--tracker",
        fx.trk_ckpt_path.to_str().unwrap(),
        "--cine",
        cine.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        toy_config().to_str().unwrap(),
    ]);
    let line: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    let fps = line["frames_per_sec"].as_f64().expect("frames_per_sec reported");
    assert!(fps > 0.0 && fps.is_finite(), "throughput must be positive, got {fps}");
    println!("ACCEPTANCE 11 throughput reporting: PASS ({fps:.1} frames/sec)");
}
