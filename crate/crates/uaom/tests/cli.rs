use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &[
    "--max-side",
    "64",
    "--pm-iterations",
    "3",
    "--deconv-iterations",
    "20",
    "--timing",
    "off",
];

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn uaom<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uaom"))
        .args(args)
        .env("UAOM_WEIGHTS_DIR", fixtures())
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Writes two small synthetic pairs and returns the directory.
fn synthetic(dir: &Path) -> PathBuf {
    let out = dir.join("syn");
    let o = uaom(&["make-synthetic", "--out-dir", s(&out), "--count", "2", "--size", "64", "--runs", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn command(cmd: &[&str], syn: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = cmd.iter().map(|x| x.to_string()).collect();
    for (flag, p) in [
        ("--image-a", syn.join("pair_00_a.png")),
        ("--image-b", syn.join("pair_00_b.png")),
        ("--out-dir", out.to_path_buf()),
    ] {
        v.push(flag.into());
        v.push(p.to_string_lossy().into_owned());
    }
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

#[test]
fn missing_weights_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let missing = dir.path().join("nowhere.uaom");
    let args = command(&["transfer"], &syn, &dir.path().join("t"), &["--weights-path", s(&missing)]);
    let o = uaom(&args);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.uaom"), "{}", stderr(&o));
}

#[test]
fn missing_weights_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let args = command(&["transfer"], &syn, &dir.path().join("t"), &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_uaom"))
        .args(&args)
        .env_remove("UAOM_WEIGHTS_DIR")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn invalid_settings_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    for bad in [
        &["--ratio", "1.5"][..],
        &["--ratio", "0"],
        &["--ransac-thresh-px", "-1"],
        &["--alpha", "0.8,0.7,0.6"],
        &["--patch-radius", "1,1,x,1,1"],
        &["--max-side", "8"],
        &["--geometric-model", "projective"],
    ] {
        let args = command(&["match"], &syn, &dir.path().join("m"), bad);
        let o = uaom(&args);
        assert_eq!(code(&o), 2, "{bad:?}: {}", stderr(&o));
    }
    assert_eq!(code(&uaom(&["no-such-command"])), 2);
    assert_eq!(code(&uaom(&["--help"])), 0);
}

#[test]
fn undecodable_input_image_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not a png").unwrap();
    let o = uaom(&[
        "transfer",
        "--image-a",
        s(&junk),
        "--image-b",
        s(&junk),
        "--out-dir",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("junk.png"));
}

#[test]
fn transfer_writes_latents_fields_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let out = dir.path().join("t");
    let args = command(&["transfer"], &syn, &out, FAST);
    let o = uaom(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["latent_a.png", "latent_b.png", "phi_ab.nnf", "phi_ba.nnf", "transfer.json", "config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let latent = uaom::imageio::load_png_gray(out.join("latent_a.png")).unwrap();
    assert_eq!(latent.dims(), (64, 64));
    let field = uaom::nnfio::decode_nnf(&std::fs::read(out.join("phi_ab.nnf")).unwrap()).unwrap();
    assert!(field.in_bounds());
    let cfg = read_json(&out.join("config.json"));
    assert_eq!(cfg["command"], "transfer");
    assert_eq!(cfg["settings"]["max_side"], 64);
    assert_eq!(cfg["settings"]["deconv_iterations"], 20);
}

#[test]
fn tiny_ratio_gives_a_degenerate_record_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let out = dir.path().join("m");
    let mut args = command(&["match"], &syn, &out, FAST);
    args.extend(["--ratio".to_string(), "0.01".to_string()]);
    let o = uaom(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec = read_json(&out.join("record.json"));
    let r = &rec["records"][0];
    assert_eq!(r["gm"], 0.0);
    assert_eq!(r["ma"], 0.0);
    assert_eq!(r["degenerate"], true);
    assert_eq!(std::fs::read_to_string(out.join("matches.jsonl")).unwrap(), "");
}

#[test]
fn match_is_byte_reproducible_with_timing_off() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let mut outputs = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let args = command(&["match", "--baseline"], &syn, &out, FAST);
        let o = uaom(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(out);
    }
    for f in ["matches.jsonl", "matches_raw.jsonl", "matches.png", "record.json"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let rec = read_json(&outputs[0].join("record.json"));
    let methods: Vec<&str> = rec["records"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["uaom", "raw"]);
    assert_eq!(rec["records"][0]["rt_s"], 0.0);
}

#[test]
fn eval_keeps_order_and_isolates_bad_entries() {
    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let manifest: Vec<Value> = read_json(&syn.join("manifest.json")).as_array().unwrap().clone();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest[0]["runs"], 3);

    let out = dir.path().join("e");
    let o = uaom(&["eval", "--manifest", s(&syn.join("manifest.json")), "--out-dir", s(&out), "--pm-iterations", "2", "--deconv-iterations", "10", "--max-side", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("eval.json"));
    let entries = report["entries"].as_array().unwrap();
    let ids: Vec<&str> = entries.iter().map(|e| e["pair_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["synthetic_00", "synthetic_01"]);
    for e in entries {
        assert_eq!(e["ok"], true);
        assert_eq!(e["records"].as_array().unwrap().len(), 1);
        if let Some(t) = e.get("truth_agreement").and_then(Value::as_f64) {
            assert!((0.0..=1.0).contains(&t));
        }
    }
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "pair_id,method,gm,inl,ma,rt_s,transfer_s");
    assert_eq!(lines.count(), 2);

    let mut broken = manifest.clone();
    broken[1]["path_a"] = Value::from("missing.png");
    let bad_manifest = syn.join("broken.json");
    std::fs::write(&bad_manifest, serde_json::to_vec(&broken).unwrap()).unwrap();
    let out2 = dir.path().join("e2");
    let o = uaom(&["eval", "--manifest", s(&bad_manifest), "--out-dir", s(&out2), "--pm-iterations", "2", "--deconv-iterations", "10", "--max-side", "64", "--timing", "off"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out2.join("eval.json"));
    assert_eq!(report["entries"][0]["ok"], true);
    assert_eq!(report["entries"][1]["ok"], false);
    assert!(report["entries"][1]["error"].as_str().unwrap().contains("missing.png"));
    assert!(stderr(&o).contains("synthetic_01"));
}

#[test]
fn eval_with_no_successful_entry_fails() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, r#"[{"pair_id": "x", "path_a": "a.png", "path_b": "b.png"}]"#).unwrap();
    let o = uaom(&["eval", "--manifest", s(&manifest), "--out-dir", s(&dir.path().join("e"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn inspect_commands_run_on_fixtures() {
    let o = uaom(&["inspect-weights", s(&fixtures().join("backbone.uaom"))]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("relu5_1"));
    assert!(text.contains("reference activation"));

    let dir = tempfile::tempdir().unwrap();
    let syn = synthetic(dir.path());
    let png = dir.path().join("kp.png");
    let o = uaom(&["inspect-keypoints", "--image", s(&syn.join("pair_00_b.png")), "--out", s(&png)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (w, h, _) = uaom::imageio::decode_png_rgb(&std::fs::read(&png).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
}

#[test]
fn make_synthetic_echoes_its_parameters_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = synthetic(dir.path());
    let cfg = read_json(&a.join("config.json"));
    assert_eq!(cfg["command"], "make-synthetic");
    assert_eq!(cfg["synthetic"]["size"], 64);
    assert_eq!(cfg["synthetic"]["count"], 2);
    let b = dir.path().join("again");
    let o = uaom(&["make-synthetic", "--out-dir", s(&b), "--count", "2", "--size", "64", "--runs", "3"]);
    assert_eq!(code(&o), 0);
    for f in ["pair_00_a.png", "pair_01_b.png", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}
