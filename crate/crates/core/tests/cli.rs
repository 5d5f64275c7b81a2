//! Runs the `surfel-pbr` binary end to end on a tiny toy dataset.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_surfel-pbr");
const SMALL: [&str; 6] = ["light.size=8", "light.lut_size=16", "light.lut_samples=128", "light.irradiance_size=8", "relight.n_d=4", "relight.n_s=4"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn render(dir: &Path) {
    let out = dir.to_str().unwrap();
    run_ok(&with_small(&["render", "--views", "2", "--resolution", "16", "--priors", "--out", out]));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn render_fit_relight_eval_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    render(&data);
    assert!(data.join("transforms.json").exists());
    let d = data.to_str().unwrap();

    let s1 = tmp.path().join("s1");
    run_ok(&with_small(&["fit-geometry", "--data", d, "--iterations", "3", "--seed", "9", "init.surfels=200", "--out", s1.to_str().unwrap()]));
    let ckpt1 = s1.join("stage1.ckpt");
    assert!(ckpt1.exists());
    let loss = std::fs::read_to_string(s1.join("stage1_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4, "{loss}");

    let rec = json(&s1.join("run.json"));
    assert_eq!(rec["command"], "fit-geometry");
    assert_eq!(rec["seed"], 9);
    assert_eq!(rec["config"]["stage1"]["iterations"], 3);
    assert_eq!(rec["config"]["init"]["surfels"], 200);
    assert!(rec["version"].as_str().unwrap().starts_with('v'));
    assert!(rec["argv"].as_array().unwrap().len() > 3);

    let s2 = tmp.path().join("s2");
    let c1 = ckpt1.to_str().unwrap();
    run_ok(&with_small(&["fit-material", "--data", d, "--checkpoint", c1, "--iterations", "2", "stage2.n_rays=256", "--out", s2.to_str().unwrap()]));
    let ckpt2 = s2.join("stage2.ckpt");
    let c2 = ckpt2.to_str().unwrap();

    let s3 = tmp.path().join("s3");
    run_ok(&with_small(&["fit-speccomp", "--data", d, "--checkpoint", c2, "--iterations", "2", "pixels=32", "n_r=4", "--out", s3.to_str().unwrap()]));
    let rec = json(&s3.join("run.json"));
    assert_eq!(rec["config"]["speccomp"]["pixels"], 32);
    assert!(s3.join("speccomp.ckpt").exists());

    let relit = tmp.path().join("relit");
    run_ok(&with_small(&["relight", "--checkpoint", c2, "--env", "studio", "--data", d, "--out", relit.to_str().unwrap()]));
    assert!(relit.join("relight_000.pfm").exists() && relit.join("relight_001.png").exists());

    let ev = tmp.path().join("eval");
    run_ok(&with_small(&["eval", "--checkpoint", c2, "--data", d, "--out", ev.to_str().unwrap()]));
    let metrics = json(&ev.join("metrics.json"));
    assert!(metrics["psnr"].as_f64().unwrap().is_finite());
    assert_eq!(metrics["per_view_psnr"].as_array().unwrap().len(), 2);

    let tr = tmp.path().join("trace");
    run_ok(&with_small(&["trace", "--checkpoint", c2, "--data", d, "--x", "8", "--y", "8", "--out", tr.to_str().unwrap()]));
    let csv = std::fs::read_to_string(tr.join("trace.csv")).unwrap();
    assert!(csv.lines().count() > 1, "{csv}");
}

#[test]
fn bake_writes_a_light_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok(&with_small(&["bake", "--env", "sky", "--out", tmp.path().to_str().unwrap()]));
    let bytes = std::fs::read(tmp.path().join("light.bin")).unwrap();
    assert_eq!(&bytes[..4], b"SPLB");
}

#[test]
fn last_override_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    render(&data);
    let out = tmp.path().join("fit");
    let args = with_small(&[
        "fit-geometry",
        "--data",
        data.to_str().unwrap(),
        "stage1.iterations=7",
        "--iterations",
        "1",
        "init.surfels=100",
        "--out",
        out.to_str().unwrap(),
    ]);
    run_ok(&args);
    assert_eq!(json(&out.join("run.json"))["config"]["stage1"]["iterations"], 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["render", "--out", out, "no.such.key=1"]).status.code(), Some(2));
    assert_eq!(run(&["render", "--out", out, "light.size=banana"]).status.code(), Some(2));
    let missing = tmp.path().join("missing");
    assert_eq!(run(&["fit-geometry", "--data", missing.to_str().unwrap(), "--out", out]).status.code(), Some(3));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn gradcheck_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_ok(&["eval", "--gradcheck", "--points", "5", "--out", tmp.path().to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(json(&tmp.path().join("gradcheck.json")).as_array().unwrap().len() >= 10);
}
