use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidargen::dataset::Dataset;
use lidargen::denoiser::{Denoiser, DenoiserConfig};
use lidargen::render::read_ply;
use lidargen::tensor::Checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lidargen"));
    c.env_remove("LIDARGEN_THREADS").env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lidargen")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, lr: f64, steps: u64) -> PathBuf {
    let p = dir.join(format!("tiny-{lr}-{steps}.json"));
    let cfg = serde_json::json!({
        "version": 1,
        "synth": { "counts": { "vehicle": 12, "post": 10 }, "seed": 3, "max_points": 48 },
        "denoiser": { "variant": "logen", "depth": 1, "heads": 2, "width": 8, "max_points": 48 },
        "train": { "steps": steps, "batch_size": 3, "adam": { "lr": lr }, "seed": 5,
                   "schedule": { "steps": 50, "beta_min": 1e-4, "beta_max": 0.05 } },
        "checkpoint_every": 2,
        "extractor": { "steps": 20, "batch_size": 8, "lr": 0.003, "seed": 1 },
        "sampler": { "inference_steps": 10, "guidance": 1.0, "seed": 2 },
        "eval": { "channels": 3, "emd_points": 16 }
    });
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = tiny_config(&root, 1e-3, 4);
    let data = root.join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data)]);
    Fixture { _dir: dir, root, config, data }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let o = f.root.join(out);
    let mut args = vec!["train", "--config", s(&f.config), "--dataset", s(&f.data), "--out", s(&o), "--class", "vehicle"];
    args.extend_from_slice(extra);
    ok(&args);
    o
}

#[test]
fn help_version_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["sample", "--out", "x"])), 1);
}

#[test]
fn synth_writes_dataset_and_manifest_and_refuses_overwrite() {
    let f = fixture();
    let ds = Dataset::read(&f.data).unwrap();
    assert_eq!(ds.objects.len(), 22);
    assert_eq!(ds.manifest.classes, vec!["post", "vehicle"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.data.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "synth");
    assert_eq!(manifest["config"]["synth"]["seed"], 3);
    let again = run(&["synth", "--config", s(&f.config), "--out", s(&f.data)]);
    assert_eq!(code(&again), 1);
    let counts = f.root.join("counts");
    ok(&["synth", "--config", s(&f.config), "--out", s(&counts), "--count", "bike=4"]);
    assert_eq!(Dataset::read(&counts).unwrap().manifest.classes, vec!["bike"]);
}

#[test]
fn config_errors_are_contract_errors() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "synth": {"counts": {"post": 2}}, "colour": 3}"#).unwrap();
    assert_eq!(code(&run(&["synth", "--config", s(&bad), "--out", s(&d.path().join("o"))])), 1);
    fs::write(&bad, r#"{"version": 7}"#).unwrap();
    assert_eq!(code(&run(&["synth", "--config", s(&bad), "--out", s(&d.path().join("o"))])), 1);
    assert!(!d.path().join("o").exists());
    let missing = run(&["train", "--dataset", s(&d.path().join("none")), "--out", s(&d.path().join("t"))]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn train_requires_one_class_and_writes_outputs() {
    let f = fixture();
    let multi = run(&["train", "--config", s(&f.config), "--dataset", s(&f.data), "--out", s(&f.root.join("m"))]);
    assert_eq!(code(&multi), 1);
    assert!(String::from_utf8_lossy(&multi.stderr).contains("--class"));
    let out = train(&f, "run", &[]);
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,loss\n1,"));
    assert!(out.join("checkpoints/step_000002.ckpt").exists());
    let ck = Checkpoint::read(&out.join("model.ckpt")).unwrap();
    assert_eq!(ck.meta["class"], "vehicle");
    assert_eq!(ck.meta["step"], 4);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["inputs"][0]["role"], "dataset");
    assert_eq!(run["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let f = fixture();
    let cfg = tiny_config(&f.root, 0.0, 3);
    let out = f.root.join("frozen");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&f.data), "--out", s(&out), "--class", "vehicle"]);
    let ck = Checkpoint::read(&out.join("model.ckpt")).unwrap();
    let trained = Denoiser::from_checkpoint(&ck).unwrap();
    let mc: DenoiserConfig = serde_json::from_value(ck.config.clone()).unwrap();
    let init = Denoiser::new(mc, 5).unwrap();
    for ((na, a), (nb, b)) in trained.params().iter().zip(init.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b, "{na} moved");
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let f = fixture();
    let straight = train(&f, "straight", &["--threads", "1"]);
    let half = train(&f, "half", &["--steps", "2"]);
    let resumed = train(&f, "resumed", &["--resume", s(&half.join("model.ckpt"))]);
    assert_eq!(fs::read(straight.join("model.ckpt")).unwrap(), fs::read(resumed.join("model.ckpt")).unwrap());
    let tail: Vec<String> = fs::read_to_string(straight.join("loss.csv")).unwrap().lines().skip(3).map(String::from).collect();
    let rest: Vec<String> = fs::read_to_string(resumed.join("loss.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(tail, rest);
}

#[test]
fn divergence_aborts_with_batch_dump() {
    let f = fixture();
    let cfg = tiny_config(&f.root, 1e30, 6);
    let out = f.root.join("nan");
    let o = run(&["train", "--config", s(&cfg), "--dataset", s(&f.data), "--out", s(&out), "--class", "vehicle"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.root.join("nan.nan-dump.json")).unwrap()).unwrap();
    assert_eq!(dump["indices"].as_array().unwrap().len(), 3);
}

fn conditions(path: &Path, class: &str, n: usize) {
    let lines: Vec<String> = (0..n)
        .map(|k| {
            serde_json::json!({ "class": class, "phi": 0.3 * k as f64 - 1.0, "d": 8.0 + k as f64, "z": -1.0,
                                "l": 4.2, "w": 1.8, "h": 1.5, "n_points": 20 + k })
            .to_string()
        })
        .collect();
    fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn sample_from_conditions_files() {
    let f = fixture();
    let model = train(&f, "run", &[]).join("model.ckpt");
    let empty = f.root.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = f.root.join("g0");
    ok(&["sample", "--config", s(&f.config), "--checkpoint", s(&model), "--conditions", s(&empty), "--out", s(&out)]);
    assert!(Dataset::read(&out).unwrap().objects.is_empty());

    let ten = f.root.join("ten.jsonl");
    conditions(&ten, "vehicle", 10);
    for rot in 0..5 {
        let out = f.root.join(format!("rot{rot}"));
        let r = rot.to_string();
        ok(&["sample", "--config", s(&f.config), "--checkpoint", s(&model), "--conditions", s(&ten), "--out", s(&out), "--rotation", &r]);
        let ds = Dataset::read(&out).unwrap();
        assert_eq!(ds.objects.len(), 10);
        for (k, (_, rec)) in ds.split("generated").unwrap().into_iter().enumerate() {
            assert_eq!(rec.points.len(), 20 + k);
            assert!(rec.points.points.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(&p.i)));
            let want = lidargen::objects::wrap_angle(0.3 * k as f64 - 1.0 + rot as f64 / 5.0 * std::f64::consts::TAU);
            assert!((rec.condition.phi - want).abs() < 1e-5);
        }
    }
    let bad = f.root.join("post.jsonl");
    conditions(&bad, "post", 2);
    let o = run(&["sample", "--config", s(&f.config), "--checkpoint", s(&model), "--conditions", s(&bad), "--out", s(&f.root.join("gx"))]);
    assert_eq!(code(&o), 1);
    assert!(!f.root.join("gx").exists());
}

#[test]
fn sample_eval_and_render_pipeline() {
    let f = fixture();
    let model = train(&f, "run", &[]).join("model.ckpt");
    let gen = f.root.join("gen");
    let refused = run(&["sample", "--config", s(&f.config), "--checkpoint", s(&model), "--dataset", s(&f.data), "--split", "train", "--out", s(&gen)]);
    assert_eq!(code(&refused), 1);
    ok(&["sample", "--config", s(&f.config), "--checkpoint", s(&model), "--dataset", s(&f.data), "--split", "train", "--filter-class", "--out", s(&gen)]);

    let ex = f.root.join("ex");
    ok(&["train", "--config", s(&f.config), "--dataset", s(&f.data), "--out", s(&ex), "--target", "extractor"]);
    let report = f.root.join("report.json");
    let table = f.root.join("table.txt");
    let o = ok(&[
        "eval", "--config", s(&f.config), "--real", s(&f.data), "--generated", s(&gen), "--extractor",
        s(&ex.join("extractor.ckpt")), "--out", s(&report), "--table", s(&table),
    ]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let v = &rep["per_class"]["vehicle"];
    for key in ["cd", "emd", "cov_cd", "cov_emd", "nna_cd", "nna_int", "fpd_3ch", "kpd_4ch", "apc", "jsd"] {
        assert!(v[key].is_number(), "{key} missing: {v}");
    }
    assert_eq!(rep["meta"]["extractor_id"].as_str().unwrap().len(), 64);
    assert!(String::from_utf8_lossy(&o.stdout).contains("vehicle"));
    assert_eq!(fs::read_to_string(&table).unwrap(), String::from_utf8_lossy(&o.stdout));

    let pics = f.root.join("pics");
    ok(&["render", "--dataset", s(&gen), "--out", s(&pics), "--limit", "3"]);
    let ds = Dataset::read(&gen).unwrap();
    for (name, rec) in ds.split("generated").unwrap().into_iter().take(3) {
        let stem = name.trim_end_matches(".bin");
        let ply = read_ply(&fs::read_to_string(pics.join(format!("{stem}.ply"))).unwrap()).unwrap();
        assert_eq!(ply.len(), rec.points.len());
        assert!(fs::read_to_string(pics.join(format!("{stem}.svg"))).unwrap().starts_with("<svg"));
    }
}

#[test]
fn eval_rejects_unmatched_objects() {
    let f = fixture();
    let other = f.root.join("other");
    ok(&["synth", "--config", s(&f.config), "--out", s(&other), "--count", "bike=3"]);
    let d = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--real", s(&f.data), "--generated", s(&other), "--generated-split", "train", "--out", s(&d.path().join("r.json"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}
