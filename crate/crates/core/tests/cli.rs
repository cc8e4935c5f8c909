use std::fs;
use std::path::Path;

use conecal::cli::{run, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK};
use conecal::io::{
    read_csv, read_json, read_observations, write_observations, DistortionRow, FitFile, FitStatus, GroundTruthFile,
    RefinedPosesFile, RunConfig, ScatterRow,
};
use conecal::synth::generate_dataset;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn conecal(args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["conecal"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> Output {
    let o = conecal(args);
    assert_eq!(o.code, EXIT_OK, "{args:?} failed: {}", o.stderr);
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["generate", "--out", s(dir), "--images", "4"];
    args.extend_from_slice(extra);
    ok(&args)
}

fn pinhole_cm(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("pinhole RMSE:")).unwrap();
    line.split_whitespace().nth(2).unwrap().parse().unwrap()
}

#[test]
fn outputs_parse_back() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    generate(d, &["--seed", "4"]);

    let truth: GroundTruthFile = read_json(&d.join("ground_truth.json")).unwrap();
    let mut cfg = RunConfig { seed: 4, ..Default::default() };
    cfg.generate.n_images = 4;
    let ds = generate_dataset(&cfg.synth_config().unwrap()).unwrap();
    assert_eq!(truth.to_scene().unwrap(), ds.truth);
    assert_eq!(read_observations(&d.join("observations.json")).unwrap(), ds.observations);

    let obs = d.join("observations.json");
    let cal = ok(&["calibrate", "--out", s(d), "--observations", s(&obs), "--steps", "40", "--grid", "4x4"]);
    let fit: FitFile = read_json(&d.join("fit.json")).unwrap();
    assert_eq!(fit.status, FitStatus::Converged);
    assert_eq!(fit.steps_taken, 40);
    assert_eq!(fit.loss_history_m2.len(), 41);
    assert!(fit.report.final_cm < fit.report.initial_cm);
    let report = fs::read_to_string(d.join("report.txt")).unwrap();
    assert_eq!(report.trim_end(), cal.stdout.trim_end());
    assert!(report.starts_with("Set | RMSE initial (cm) | RMSE final (cm) | Rel. imp."));

    let fit_path = d.join("fit.json");
    ok(&["analyze", "--out", s(d), "--surface", s(&fit_path), "--observations", s(&obs), "--stride", "128"]);
    let field: Vec<DistortionRow> = read_csv(&d.join("distortion_field.csv")).unwrap();
    assert_eq!(field.len(), 3280usize.div_ceil(128) * 2464usize.div_ceil(128));
    let curves: Vec<DistortionRow> = read_csv(&d.join("depth_curves.csv")).unwrap();
    assert_eq!(curves.len(), 2 * 20);
    let scatter: Vec<ScatterRow> = read_csv(&d.join("corner_scatter.csv")).unwrap();
    assert_eq!(scatter.len(), ds.observations.corner_count());
}

#[test]
fn stronger_cover_means_larger_pinhole_error() {
    let tmp = tempfile::tempdir().unwrap();
    let weak = pinhole_cm(&generate(&tmp.path().join("weak"), &["--mu", "1e-6"]).stdout);
    let mid = pinhole_cm(&generate(&tmp.path().join("mid"), &["--mu", "1e-5"]).stdout);
    let strong = pinhole_cm(&generate(&tmp.path().join("strong"), &["--mu", "1e-4"]).stdout);
    assert!(weak < mid && mid < strong, "{weak} {mid} {strong}");
}

#[test]
fn pose_refinement_reduces_loss_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    generate(d, &[]);
    let mut obs = read_observations(&d.join("observations.json")).unwrap();
    for img in &mut obs.images {
        img.initial_pose = img.initial_pose.apply_increment(&[0.01, -0.008, 0.005, 0.004, -0.003, 0.02]);
    }
    let perturbed = d.join("perturbed.json");
    write_observations(&perturbed, &obs).unwrap();

    let first = d.join("first");
    ok(&["refine-poses", "--out", s(&first), "--observations", s(&perturbed)]);
    let refined: RefinedPosesFile = read_json(&first.join("refined_poses.json")).unwrap();
    assert_eq!(refined.images.len(), obs.images.len());
    for r in &refined.images {
        assert!(r.error.is_none());
        assert!(r.loss_after_m2 < r.loss_before_m2, "image {}: {} -> {}", r.index, r.loss_before_m2, r.loss_after_m2);
    }

    let second = d.join("second");
    let again = first.join("observations_refined.json");
    ok(&["refine-poses", "--out", s(&second), "--observations", s(&again)]);
    let a = read_observations(&again).unwrap();
    let b = read_observations(&second.join("observations_refined.json")).unwrap();
    for (x, y) in a.images.iter().zip(&b.images) {
        let (p, q) = (x.initial_pose, y.initial_pose);
        let dt = (p.translation - q.translation).norm();
        let dr = p
            .rotation
            .to_row_major()
            .iter()
            .zip(q.rotation.to_row_major())
            .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(dt < 1e-8 && dr < 1e-8, "image {}: translation {dt:e}, rotation {dr:e}", x.index);
    }
}

#[test]
fn missing_initial_pose_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    generate(d, &[]);
    let path = d.join("observations.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["images"][1].as_object_mut().unwrap().remove("initial_pose").unwrap();
    let broken = d.join("broken.json");
    fs::write(&broken, serde_json::to_string(&v).unwrap()).unwrap();
    let o = conecal(&["calibrate", "--out", s(d), "--observations", s(&broken), "--steps", "5"]);
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.stderr.contains("initial_pose"), "{}", o.stderr);
}

#[test]
fn runaway_rate_reports_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    generate(d, &[]);
    let obs = d.join("observations.json");
    let o = conecal(&["calibrate", "--out", s(d), "--observations", s(&obs), "--rate", "1", "--steps", "50"]);
    assert_eq!(o.code, EXIT_DIVERGED, "{}", o.stderr);
    let fit: FitFile = read_json(&d.join("fit.json")).unwrap();
    assert_eq!(fit.status, FitStatus::Diverged);
    assert!(fit.surface.amplitudes_m.iter().all(|a| a.is_finite()));
    assert!(!d.join("report.txt").exists());
}

#[test]
fn usage_errors_exit_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = conecal(&["analyze", "--out", s(tmp.path())]);
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.stderr.contains("--surface"));
    assert_eq!(conecal(&["generate", "--grid", "4by4"]).code, EXIT_CONFIG);
    assert_eq!(conecal(&["frobnicate"]).code, EXIT_CONFIG);
}
