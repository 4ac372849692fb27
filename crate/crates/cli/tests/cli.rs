use std::path::Path;
use std::process::{Command, Output};

fn devit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_devit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = devit(args, cwd);
    assert!(
        out.status.success(),
        "devit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = r#"{"generator": {"height": 32, "width": 32, "encoder_channels": [8, 8, 8, 8],
  "decoder_channels": [8, 8, 8], "blocks": 1, "spectral_norm": false,
  "heads": {"patch_grids": [2, 4]}}}"#;

#[test]
fn synth_mask_train_inpaint_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("toy.json"), TOY).unwrap();
    ok(&["synth", "--motion", "C", "--frames", "4", "--size", "32x32", "--seed", "2", "--out", "clip"], d);
    ok(&["mask", "--kind", "stationary", "--coverage", "0.15", "--seed", "2", "--frames", "4", "--size", "32x32", "--out", "masks"], d);
    assert_eq!(std::fs::read_dir(d.join("clip")).unwrap().count(), 4);
    assert_eq!(std::fs::read_dir(d.join("masks")).unwrap().count(), 4);

    ok(&["train-toy", "--frames", "clip", "--masks", "masks", "--iters", "2", "--seed", "0", "--config", "toy.json", "--out", "run"], d);
    let csv = std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,L_hole,L_valid,L_adv,L_D,total");
    assert_eq!(lines.len(), 4);

    ok(&[
        "inpaint", "--frames", "clip", "--masks", "masks", "--ckpt", "run/generator.dvt", "--config", "toy.json",
        "--window", "1", "--stride", "3", "--out", "pred", "--dump-attn", "attn",
    ], d);
    assert_eq!(std::fs::read_dir(d.join("pred")).unwrap().count(), 4);
    let gates: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("attn/gates.json")).unwrap()).unwrap();
    assert_eq!(gates.as_array().unwrap().len(), 4);
    assert!(d.join("attn/t00001_block0_head1_temporal.json").exists());

    ok(&["metrics", "--pred", "pred", "--gt", "clip", "--out", "m.json"], d);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    let psnr = m["psnr"].as_f64().unwrap();
    assert!(psnr.is_finite() && psnr > 0.0);
    assert_eq!(m["frames"].as_array().unwrap().len(), 4);

    // Identical inputs hit the sentinel.
    ok(&["metrics", "--pred", "clip", "--gt", "clip", "--out", "same.json"], d);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("same.json")).unwrap()).unwrap();
    assert_eq!(m["psnr"].as_f64(), Some(99.0));
    assert!((m["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("toy.json"), TOY).unwrap();
    std::fs::write(d.join("other.json"), TOY.replace("\"blocks\": 1", "\"blocks\": 0")).unwrap();
    ok(&["synth", "--motion", "A", "--frames", "3", "--size", "32x32", "--out", "clip"], d);
    ok(&["mask", "--kind", "moving", "--coverage", "0.1", "--frames", "3", "--size", "32x32", "--out", "masks"], d);
    ok(&["train-toy", "--frames", "clip", "--masks", "masks", "--iters", "0", "--config", "toy.json", "--out", "run"], d);
    let out = devit(
        &["inpaint", "--frames", "clip", "--masks", "masks", "--ckpt", "run/generator.dvt", "--config", "other.json", "--out", "pred"],
        d,
    );
    assert!(!out.status.success());
}

#[test]
fn flops_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("toy.json"), TOY).unwrap();
    let text = ok(&["flops", "--config", "toy.json", "--frames", "3"], d);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["frames"], 3);
    assert!(v["params"].as_u64().unwrap() > 0);
    assert!(v["total_flops"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["gradcheck", "--op", "softmax", "--seed", "4"], dir.path());
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["name"], "softmax");
    assert_eq!(v["passed"], true);
    assert!(!devit(&["gradcheck", "--op", "no_such_op"], dir.path()).status.success());
}

#[test]
fn malformed_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["synth", "--motion", "D", "--frames", "2", "--size", "32x32", "--out", "x"][..],
        &["synth", "--motion", "A", "--frames", "3", "--size", "32", "--out", "x"][..],
        &["mask", "--kind", "moving", "--coverage", "1.5", "--frames", "2", "--size", "32x32", "--out", "x"][..],
        &["metrics", "--pred", "missing", "--gt", "missing", "--out", "m.json"][..],
    ] {
        assert!(!devit(args, d).status.success(), "{args:?} should fail");
    }
}
