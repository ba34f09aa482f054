//! End-to-end tests of the `tagstrain` binary: dataset generation, training,
//! inference, strain export, baseline tracking, and evaluation, with the
//! determinism and provenance guarantees checked on real subprocess runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use tagstrain_core::geometry::{build_grid, AnnulusSpec, Orientation, Point2};
use tagstrain_core::image::{Cine, Image};
use tagstrain_core::io::{read_landmarks, read_manifest, write_cine, write_landmarks, LandmarkDoc};
use tagstrain_core::phantom::{deform, PhantomSpec, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagstrain"))
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

/// Runs the binary, asserts success, returns stdout.
fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Runs the binary, asserts the exit code, returns stderr.
fn run_err(args: &[&str], code: i32) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?} exit code\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).expect("utf-8 stderr")
}

fn last_json_line(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().last().expect("stdout has output");
    serde_json::from_str(line).expect("last stdout line is JSON")
}

/// Relative path -> bytes for every file under `root`.
fn dir_snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn gen_dataset(dir: &Path, n: usize, seed: u64) {
    run_ok(&[
        "phantom",
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--config",
        toy_config().to_str().unwrap(),
    ]);
}

#[test]
fn phantom_gen_reruns_are_byte_identical_and_stamped() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_dataset(&d1, 1, 7);
    gen_dataset(&d2, 1, 7);
    let (s1, s2) = (dir_snapshot(&d1), dir_snapshot(&d2));
    assert!(!s1.is_empty());
    assert_eq!(s1, s2, "same seed must reproduce the dataset byte for byte");

    // Provenance parse-back: the embedded config equals the input config with
    // the --seed override applied, and the tool version is stamped.
    let prov: serde_json::Value =
        serde_json::from_slice(&s1["config.json"]).expect("config.json parses");
    assert!(!prov["tool_version"].as_str().unwrap().is_empty());
    assert_eq!(prov["config"]["command"], "phantom gen");
    let mut expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(toy_config()).unwrap()).unwrap();
    expected["seed"] = serde_json::json!(7);
    assert_eq!(prov["config"]["run_config"], expected);

    // The per-case landmark files carry the same stamp.
    let doc = read_landmarks(&d1.join("landmarks/case_0000.json")).unwrap();
    let case_prov = doc.provenance.expect("landmark provenance");
    assert_eq!(serde_json::to_value(&case_prov).unwrap(), prov);
}

#[test]
fn phantom_gen_default_split_counts_are_72_18_10() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let stdout = run_ok(&[
        "phantom",
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        "100",
        "--seed",
        "7",
        "--config",
        toy_config().to_str().unwrap(),
    ]);
    let line = last_json_line(&stdout);
    assert_eq!(line["train"], 72);
    assert_eq!(line["val"], 18);
    assert_eq!(line["test"], 10);

    let entries = read_manifest(&dir.join("manifest.json")).unwrap();
    assert_eq!(entries.len(), 100);
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    assert_eq!(
        (count(Split::Train), count(Split::Val), count(Split::Test)),
        (72, 18, 10)
    );
    for e in &entries {
        assert!(dir.join(&e.cine_path).is_file());
        assert!(dir.join(&e.landmarks_path).is_file());
    }
}

#[test]
fn phantom_gen_missing_out_is_a_usage_error() {
    run_err(&["phantom", "gen", "--n", "1"], 2);
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"phantom": {"base": {"noise_sigm": 0.1}}}"#).unwrap();
    let stderr = run_err(
        &[
            "phantom",
            "gen",
            "--out",
            tmp.path().join("d").to_str().unwrap(),
            "--n",
            "1",
            "--config",
            cfg.to_str().unwrap(),
        ],
        1,
    );
    assert!(
        stderr.contains("phantom.base.noise_sigm"),
        "error must name the offending key path, got: {stderr}"
    );
}

#[test]
fn train_refuses_existing_checkpoint_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    std::fs::write(&ckpt, b"occupied").unwrap();
    let stderr = run_err(
        &[
            "train",
            "localizer",
            "--data",
            tmp.path().join("none/manifest.json").to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "1",
        ],
        1,
    );
    assert!(stderr.contains("--force"), "refusal must mention --force, got: {stderr}");
    assert_eq!(std::fs::read(&ckpt).unwrap(), b"occupied", "existing file untouched");
}

/// Trains both networks briefly on a small dataset, then checks training
/// determinism, the printed validation line, inference determinism, the
/// throughput report, and the strain export — one shared dataset keeps this
/// fast.
#[test]
fn train_infer_strain_roundtrip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data, 8, 11);
    let manifest = data.join("manifest.json");
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();

    // Localizer twice with the same seed: byte-identical checkpoint+metrics.
    let loc_a = tmp.path().join("loc_a.ckpt");
    let loc_b = tmp.path().join("loc_b.ckpt");
    let mut val_lines = Vec::new();
    for out in [&loc_a, &loc_b] {
        let stdout = run_ok(&[
            "train",
            "localizer",
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
            "--config",
            cfg,
        ]);
        val_lines.push(last_json_line(&stdout));
    }
    assert_eq!(std::fs::read(&loc_a).unwrap(), std::fs::read(&loc_b).unwrap());
    assert_eq!(
        std::fs::read(loc_a.with_extension("metrics.jsonl")).unwrap(),
        std::fs::read(loc_b.with_extension("metrics.jsonl")).unwrap()
    );
    assert_eq!(val_lines[0], val_lines[1]);
    assert_eq!(val_lines[0]["split"], "val");
    assert!(val_lines[0]["mean_iou"].as_f64().is_some(), "localizer prints val mean IoU");

    // Metrics log starts with the provenance stamp.
    let metrics = std::fs::read_to_string(loc_a.with_extension("metrics.jsonl")).unwrap();
    let head: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(head["provenance"]["config"]["command"], "train localizer");

    // Rewriting the same path requires --force and then succeeds.
    run_err(
        &[
            "train", "localizer", "--data", manifest.to_str().unwrap(), "--out",
            loc_b.to_str().unwrap(), "--epochs", "1", "--seed", "5", "--config", cfg,
        ],
        1,
    );
    run_ok(&[
        "train", "localizer", "--data", manifest.to_str().unwrap(), "--out",
        loc_b.to_str().unwrap(), "--epochs", "1", "--seed", "5", "--config", cfg, "--force",
    ]);

    // Tracker: one epoch, prints the validation strain metrics.
    let trk = tmp.path().join("trk.ckpt");
    let stdout = run_ok(&[
        "train",
        "tracker",
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        trk.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "5",
        "--config",
        cfg,
    ]);
    let val = last_json_line(&stdout);
    assert_eq!(val["split"], "val");
    assert!(val["es_circ_bias"].as_f64().is_some());

    // Inference twice: byte-identical landmark files, positive throughput.
    let entries = read_manifest(&manifest).unwrap();
    let cine = data.join(&entries[0].cine_path);
    let out1 = tmp.path().join("pred1.json");
    let out2 = tmp.path().join("pred2.json");
    let mut fps = Vec::new();
    for out in [&out1, &out2] {
        let stdout = run_ok(&[
            "infer",
            "--localizer",
            loc_a.to_str().unwrap(),
            "--tracker",
            trk.to_str().unwrap(),
            "--cine",
            cine.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg,
        ]);
        fps.push(last_json_line(&stdout)["frames_per_sec"].as_f64().unwrap());
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    assert!(fps[0] > 0.0, "throughput must be reported positive, got {}", fps[0]);

    let doc = read_landmarks(&out1).unwrap();
    assert_eq!(doc.sequence.len(), 20, "landmarks cover every input frame");
    assert!(doc.transform.is_some(), "crop transform recorded for original-space mapping");
    assert_eq!(
        serde_json::to_value(doc.provenance.unwrap()).unwrap()["config"]["command"],
        "infer"
    );

    // Strain export on the prediction: well-formed CSV with the ES comment.
    let csv_path = tmp.path().join("strain.csv");
    run_ok(&[
        "strain",
        "--landmarks",
        out1.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
        "--config",
        cfg,
    ]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "frame_index,eps_R,eps_C,eps_C_subendo,eps_C_midwall,eps_C_subepi"
    );
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 21, "header + 20 frames");
    assert!(csv.lines().any(|l| l.starts_with("# es_frame=")));
    assert!(csv.lines().any(|l| l.starts_with("# tool_version=")));
    assert!(csv.lines().any(|l| l.starts_with("# config=")));
}

/// The deformation model is an incompressible annulus, so ring radii obey
/// r(t) = sqrt(r_endo(t)^2 + r0^2 - r_endo(0)^2) and the strain table of the
/// exported CSV has a closed form. For a wall spanning radii 20..30 with 10%
/// peak contraction the midwall ring (radius 25) reaches sqrt(549) at ES:
/// eps_C = ((549/625) - 1)/2 = -0.0608 exactly, and the wall chord grows from
/// 10 to sqrt(824) - 18.
#[test]
fn strain_of_reference_phantom_truth_matches_closed_form() {
    let spec = PhantomSpec {
        annulus: AnnulusSpec::new(
            Point2::new(128.0, 128.0),
            20.0,
            30.0,
            std::f64::consts::PI,
            Orientation::Ccw,
        )
        .unwrap(),
        contraction: 0.10,
        ..PhantomSpec::default()
    };
    let grid = build_grid(&spec.annulus).unwrap();
    let frames: Vec<_> = (0..spec.frame_count)
        .map(|t| grid.map(|p| deform(&spec, p, t)).unwrap())
        .collect();
    let seq = tagstrain_core::geometry::LandmarkSequence::new(frames).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let lm = tmp.path().join("truth.json");
    write_landmarks(&lm, &LandmarkDoc::new(seq, spec.pixel_spacing_mm)).unwrap();
    let csv_path = tmp.path().join("strain.csv");
    run_ok(&[
        "strain",
        "--landmarks",
        lm.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let es: usize = csv
        .lines()
        .find_map(|l| l.strip_prefix("# es_frame="))
        .expect("ES comment present")
        .parse()
        .unwrap();
    assert_eq!(es, 9, "peak contraction sits at the configured ES frame");
    let row: Vec<f64> = csv
        .lines()
        .nth(1 + es)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let (eps_r, eps_c_midwall) = (row[1], row[4]);
    assert!(
        (eps_c_midwall - (-0.0608)).abs() < 1e-9,
        "midwall circumferential strain at ES: got {eps_c_midwall}, want -0.0608"
    );
    let wall_oracle = (((824f64.sqrt() - 18.0) / 10.0).powi(2) - 1.0) / 2.0;
    assert!(
        (eps_r - wall_oracle).abs() < 1e-9,
        "radial strain at ES: got {eps_r}, want {wall_oracle}"
    );
}

#[test]
fn baseline_on_static_cine_returns_the_initial_grid() {
    let pattern = |x: f64, y: f64| -> f32 {
        (0.6 + 0.25 * (0.55 * x + 0.1).sin()
            + 0.2 * (0.38 * y - 0.3).sin()
            + 0.15 * (0.21 * (x + 0.6 * y)).cos()) as f32
    };
    let mut data = Vec::with_capacity(64 * 64);
    for r in 0..64 {
        for c in 0..64 {
            data.push(pattern(c as f64, r as f64));
        }
    }
    let frame = Image::from_vec(64, 64, data).unwrap();
    let cine = Cine::new("static", 1.4, vec![frame.clone(), frame.clone(), frame]).unwrap();

    let grid = build_grid(
        &AnnulusSpec::new(Point2::new(32.0, 32.0), 8.0, 14.0, std::f64::consts::PI, Orientation::Ccw)
            .unwrap(),
    )
    .unwrap();
    let init_seq =
        tagstrain_core::geometry::LandmarkSequence::new(vec![grid.clone(), grid.clone()]).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let cine_path = tmp.path().join("static.bin");
    let init_path = tmp.path().join("init.json");
    let out_path = tmp.path().join("tracked.json");
    write_cine(&cine_path, &cine).unwrap();
    write_landmarks(&init_path, &LandmarkDoc::new(init_seq, 1.4)).unwrap();

    run_ok(&[
        "baseline",
        "--cine",
        cine_path.to_str().unwrap(),
        "--init",
        init_path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);

    let doc = read_landmarks(&out_path).unwrap();
    assert_eq!(doc.sequence.len(), 3, "one output frame per cine frame");
    for t in 0..3 {
        for (a, b) in doc.sequence.frame(t).points().iter().zip(grid.points()) {
            assert_eq!((a.x, a.y), (b.x, b.y), "frame {t} must equal the initial grid");
        }
    }
    let mask = doc.status_mask.expect("baseline reports per-landmark status");
    assert!(mask.iter().all(|&ok| ok), "nothing moved, so every landmark is clean");
}

#[test]
fn eval_of_identical_sides_reports_zero_error_and_full_iou() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data, 3, 21);
    let entries = read_manifest(&data.join("manifest.json")).unwrap();

    let pred = tmp.path().join("pred");
    let truth = tmp.path().join("truth");
    let boxes = tmp.path().join("boxes");
    for d in [&pred, &truth, &boxes] {
        std::fs::create_dir_all(d).unwrap();
    }
    for e in &entries {
        let src = data.join(&e.landmarks_path);
        std::fs::copy(&src, pred.join(format!("{}.json", e.case_id))).unwrap();
        std::fs::copy(&src, truth.join(format!("{}.json", e.case_id))).unwrap();
        let bx = serde_json::to_value(e.bbox).unwrap();
        std::fs::write(
            boxes.join(format!("{}.json", e.case_id)),
            serde_json::to_string(&serde_json::json!({"pred": bx, "truth": bx})).unwrap(),
        )
        .unwrap();
    }

    let report_path = tmp.path().join("report.json");
    run_ok(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--boxes",
        boxes.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);

    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(doc["provenance"]["config"]["command"], "eval");
    let report = &doc["report"];
    assert_eq!(report["n_cases"], 3);
    for measure in ["eps_c_whole", "eps_c_subendo", "eps_c_midwall", "eps_c_subepi", "eps_r"] {
        let row = &report["strain"]["all"][measure];
        assert_eq!(row["bias"].as_f64().unwrap(), 0.0, "{measure} bias");
        assert_eq!(row["sd"].as_f64().unwrap(), 0.0, "{measure} sd");
        assert_eq!(row["significant"], false, "{measure} must not flag a zero difference");
    }
    assert_eq!(report["position_rms_mm"]["ed"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(report["position_rms_mm"]["es"]["mean"].as_f64().unwrap(), 0.0);
    let iou = &report["iou"];
    assert_eq!(iou["mean"].as_f64().unwrap(), 1.0);
    let hist = iou["counts"].as_array().unwrap();
    assert_eq!(hist.len(), 20);
    assert_eq!(hist[19], 3, "all three IoU values land in the top bin");

    // Bland-Altman panels are exported as CSV next to the report.
    let ba = tmp.path().join("report_ba_eps_r.csv");
    let csv = std::fs::read_to_string(&ba).expect("Bland-Altman CSV exists");
    assert!(csv.lines().any(|l| l.starts_with("# tool_version=")));

    // Determinism of the report itself.
    let report2 = tmp.path().join("report2.json");
    run_ok(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--boxes",
        boxes.to_str().unwrap(),
        "--out",
        report2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&report_path).unwrap(), std::fs::read(&report2).unwrap());
}
