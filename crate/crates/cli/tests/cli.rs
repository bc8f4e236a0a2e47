use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abound::bundle::load_bundle;
use abound::model::Model;
use abound::trainer::TrainConfig;
use serde_json::Value;

fn abound(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_abound"));
    cmd.args(args).env_remove("ABOUND_SEED");
    if let Some(s) = env_seed {
        cmd.env("ABOUND_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok_dir(out: Output) -> PathBuf {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small(out: &str) -> Vec<String> {
    ["--out", out, "--set", "synth.n_test_normal=3", "--set", "synth.n_test_anomaly=3"]
        .map(String::from)
        .to_vec()
}

fn args<'a>(base: &'a [&'a str], extra: &'a [String]) -> Vec<&'a str> {
    base.iter().copied().chain(extra.iter().map(String::as_str)).collect()
}

#[test]
fn synth_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let da = ok_dir(abound(&["synth", "--seed", "7", "--out", a.to_str().unwrap()], None));
    let db = ok_dir(abound(&["synth", "--seed", "7", "--out", b.to_str().unwrap()], None));
    assert_eq!(tree(&da.join("bundle")), tree(&db.join("bundle")));
    let dc = ok_dir(abound(&["synth", "--seed", "8", "--out", b.to_str().unwrap()], None));
    assert_ne!(tree(&da.join("bundle")), tree(&dc.join("bundle")));
}

#[test]
fn run_directory_holds_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let dir = ok_dir(abound(&["synth", "--out", out, "--shots", "1"], Some("5")));
    let cfg: Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["synth"]["seed"], 5);
    assert_eq!(cfg["train"]["seed"], 5);
    assert_eq!(cfg["synth"]["shots"], 1);
    assert_eq!(cfg["train"]["epochs"], 20);
    assert_eq!(cfg["train"]["attack"]["steps"], 10);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("synth-"));
}

#[test]
fn seed_variable_changes_the_bundle_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let env = ok_dir(abound(&["synth", "--out", out], Some("9")));
    let flag = ok_dir(abound(&["synth", "--out", out, "--seed", "9"], None));
    let both = ok_dir(abound(&["synth", "--out", out, "--seed", "9"], Some("1")));
    assert_eq!(tree(&env.join("bundle")), tree(&flag.join("bundle")));
    assert_eq!(flag, both);
    assert_eq!(abound(&["synth", "--out", out], Some("nine")).status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let r = abound(&["synth", "--out", out, "--set", "train.attack.gama=2"], None);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("train.attack") && err.contains("gama"), "{err}");

    let r = abound(&["synth", "--out", out, "--set", "train.attack.epsilon=-1"], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.attack.epsilon"));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"synth": {"n_classes": 2}, "score": {"tau": "hot"}}"#).unwrap();
    let r = abound(&["synth", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("score.tau"));

    let r = abound(&["train", "--out", out], None);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("paths.bundle"));

    assert_eq!(abound(&["score", "--jobs", "0", "--out", out], None).status.code(), Some(2));
    assert_eq!(abound(&["frobnicate"], None).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let gone = tmp.path().join("nowhere");
    let gone = gone.to_str().unwrap();
    assert_eq!(abound(&["train", "--out", out, "--bundle", gone], None).status.code(), Some(3));
    assert_eq!(abound(&["synth", "--config", gone], None).status.code(), Some(3));
    let synth = ok_dir(abound(&["synth", "--out", out], None));
    let bundle = synth.join("bundle");
    let r = abound(
        &["score", "--out", out, "--bundle", bundle.to_str().unwrap(), "--checkpoint", gone],
        None,
    );
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn untrained_model_gives_valid_metrics_and_inputs_stay_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let extra = small(out);
    let synth = ok_dir(abound(&args(&["synth", "--pgm"], &extra), None));
    let bundle = synth.join("bundle");
    let b = load_bundle(&bundle).unwrap();
    let cfg = TrainConfig::default();
    let ckpt = tmp.path().join("untrained.ckpt");
    Model::new(cfg.dcf, cfg.adapter, b.class_names(), 0).unwrap().save(&ckpt).unwrap();

    let before = tree(&bundle);
    let ckpt_before = fs::read(&ckpt).unwrap();
    let bundle_arg = bundle.to_str().unwrap().to_string();
    let ckpt_arg = ckpt.to_str().unwrap().to_string();
    let score = ok_dir(abound(
        &args(&["score", "--pgm", "--jobs", "2", "--bundle", &bundle_arg, "--checkpoint", &ckpt_arg], &extra),
        None,
    ));
    let scores_arg = score.to_str().unwrap().to_string();
    let eval = ok_dir(abound(&args(&["eval", "--bundle", &bundle_arg, "--scores", &scores_arg], &extra), None));
    assert_eq!(tree(&bundle), before);
    assert_eq!(fs::read(&ckpt).unwrap(), ckpt_before);

    let lines: Vec<Value> = fs::read_to_string(score.join("scores.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3 * 6);
    let map = fs::read(score.join(lines[0]["map"].as_str().unwrap())).unwrap();
    assert_eq!(map.len(), 4 * 64);
    let pgm = fs::read_to_string(score.join("maps/00000.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n8 8\n255\n"));
    assert_eq!(pgm.lines().count(), 3 + 8);

    let m: Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    for v in [&m["image"]["auroc"], &m["image"]["aupr"], &m["pixel"]["auroc"], &m["pixel"]["pro"]] {
        let x = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{x}");
    }
    assert_eq!(m["samples"], 18);
    assert_eq!(m["per_class"].as_object().unwrap().len(), 3);
    assert!(m["class_accuracy"].as_f64().is_some());
}

#[test]
fn forge_respects_the_ball() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let extra = small(out);
    let synth = ok_dir(abound(&args(&["synth"], &extra), None));
    let bundle = synth.join("bundle").to_str().unwrap().to_string();
    let b = load_bundle(Path::new(&bundle)).unwrap();
    let cfg = TrainConfig::default();
    let ckpt = tmp.path().join("m.ckpt");
    Model::new(cfg.dcf, cfg.adapter, b.class_names(), 0).unwrap().save(&ckpt).unwrap();
    let ckpt = ckpt.to_str().unwrap().to_string();
    let dir = ok_dir(abound(&args(&["forge", "--bundle", &bundle, "--checkpoint", &ckpt], &extra), None));
    let fences: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.join("fences.json")).unwrap()).unwrap();
    assert_eq!(fences.len(), 3);
    for f in &fences {
        let orig = f["fence"]["originals"].as_array().unwrap();
        let forged = f["fence"]["forged"].as_array().unwrap();
        assert_eq!(orig.len(), forged.len());
        for (o, g) in orig.iter().zip(forged) {
            for (a, b) in o.as_array().unwrap().iter().zip(g.as_array().unwrap()) {
                assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() <= 10.0 + 1e-12);
            }
        }
    }
}
