use std::path::Path;
use std::process::{Command, Output};

use mgmrn::datamodel::{load_bundle, save_bundle, synth_generate, SynthSpec};
use mgmrn::export::{read_array, MapsSidecar};
use mgmrn::trainer::load_checkpoint;

fn mgmrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgmrn")).args(args).env_remove("MGMRN_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mgmrn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_data(dir: &Path, num_seen: usize, d_s: usize) {
    let spec = SynthSpec { num_classes: 5, num_seen, d_s, images_per_class: 10, image_size: 8, seed: 3, word_dim: 4 };
    save_bundle(&synth_generate(&spec).unwrap(), dir).unwrap();
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_reports_splits_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let args = |out: &Path| {
        let s = ["synth", "--classes", "10", "--seen", "8", "--attrs", "12", "--per-class", "50", "--seed", "7", "--out"];
        let mut v: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        v.push(p(out).to_string());
        v
    };
    let run = |out: &Path| ok(&args(out).iter().map(String::as_str).collect::<Vec<_>>());
    let (sa, sb) = (run(&a), run(&b));
    assert!(sa.contains("classes 10 / 8 / 2"), "{sa}");
    let hash = |s: &str| s.lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string();
    assert_eq!(hash(&sa), hash(&sb));
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    let m = json(a.join("manifest.json"));
    assert_eq!(m["seen_classes"].as_array().unwrap().len(), 8);
    assert_eq!(m["unseen_classes"].as_array().unwrap().len(), 2);
    assert_eq!(json(a.join("run.json"))["status"], "succeeded");
}

#[test]
fn usage_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let out = mgmrn(&["synth", "--seen", "10", "--classes", "10", "--out", p(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("need at least one unseen class"));
    assert_eq!(json(t.path().join("run.json"))["status"], "failed");

    assert_eq!(mgmrn(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(mgmrn(&["train", "--data", "x", "--out", "y", "--variant", "huge"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_abort() {
    let t = tempfile::tempdir().unwrap();
    let out = mgmrn(&["train", "--data", p(&t.path().join("nope")), "--out", p(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing file"));
}

#[test]
fn zero_epochs_saves_initial_weights_and_empty_history() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("o"));
    tiny_data(&data, 4, 4);
    let stdout = ok(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "0"]);
    assert!(stdout.contains("final: no epochs run"));
    assert_eq!(json(out.join("history.json")), serde_json::json!([]));
    let state = load_checkpoint(out.join("best.ckpt")).unwrap();
    assert_eq!(state.epoch, 0);
    assert!(state.history.is_empty());
    let cfg = json(out.join("config.json"));
    assert_eq!(cfg["learning_rate"], 0.0005);
    assert_eq!(cfg["word_dim"], 4);
}

#[test]
fn stage_flags_are_echoed() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("o"));
    tiny_data(&data, 4, 4);
    let stdout = ok(&["train", "--data", p(&data), "--out", p(&out), "--L", "3", "--np", "7", "--epochs", "0"]);
    assert!(stdout.contains("L=3 N_p=[7, 7, 7]"), "{stdout}");
    let cfg = json(out.join("config.json"));
    assert_eq!(cfg["num_stages"], 3);
}

#[test]
fn same_seed_gives_identical_history() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    tiny_data(&data, 4, 4);
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&["train", "--data", p(&data), "--out", p(&out), "--seed", "7", "--epochs", "2", "--eval-every", "1"]);
        std::fs::read(out.join("history.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn seed_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("o"));
    tiny_data(&data, 4, 4);
    let status = Command::new(env!("CARGO_BIN_EXE_mgmrn"))
        .args(["train", "--data", p(&data), "--out", p(&out), "--epochs", "0"])
        .env("MGMRN_SEED", "1234")
        .output()
        .unwrap();
    assert!(status.status.success());
    assert_eq!(json(out.join("config.json"))["seed"], 1234);
    assert_eq!(json(out.join("run.json"))["seed"], 1234);
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("o"));
    tiny_data(&data, 4, 4);
    let file = t.path().join("c.json");
    std::fs::write(&file, r#"{"learning_rate": 0.01, "momentum": 0.5}"#).unwrap();
    ok(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "0", "--config", p(&file), "--lr", "0.03"]);
    let cfg = json(out.join("config.json"));
    assert_eq!(cfg["learning_rate"], 0.03);
    assert_eq!(cfg["momentum"], 0.5);
    assert_eq!(cfg["batch_size"], 32);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    tiny_data(&data, 4, 4);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["train", "--data", p(&data), "--out", p(&a), "--epochs", "3"]);
    ok(&["train", "--data", p(&data), "--out", p(&b), "--epochs", "1"]);
    let resumed = t.path().join("r");
    ok(&["train", "--data", p(&data), "--out", p(&resumed), "--epochs", "3", "--resume", p(&b.join("last.ckpt"))]);
    let (x, y) = (load_checkpoint(a.join("last.ckpt")).unwrap(), load_checkpoint(resumed.join("last.ckpt")).unwrap());
    assert_eq!(x.epoch, 3);
    assert_eq!(y.epoch, 3);
    assert_eq!(x.params.values(), y.params.values());
    assert_eq!(x.velocity, y.velocity);
    let losses = |s: &mgmrn::trainer::TrainState| s.history.iter().map(|r| r.loss.clone()).collect::<Vec<_>>();
    assert_eq!(losses(&x), losses(&y));
}

#[test]
fn divergence_aborts_with_runtime_code() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("o"));
    tiny_data(&data, 4, 4);
    let o = mgmrn(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "5", "--lr", "1e200"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_modes_write_reports() {
    let t = tempfile::tempdir().unwrap();
    let (data, run) = (t.path().join("d"), t.path().join("run"));
    tiny_data(&data, 4, 4);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2"]);
    let ckpt = run.join("best.ckpt");
    for mode in ["czsl", "gzsl", "ausuc", "errors"] {
        let out = t.path().join(mode);
        ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--mode", mode]);
        let r = json(out.join(format!("eval_{mode}.json")));
        assert_eq!(r["mode"], mode);
        let rep = &r["report"];
        // a single unseen class leaves one candidate
        assert_eq!(rep["t1"], 1.0);
        let (s, u, h) = (rep["s"].as_f64().unwrap(), rep["u"].as_f64().unwrap(), rep["h"].as_f64().unwrap());
        let expect = if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) };
        assert!((h - expect).abs() < 1e-9);
        match mode {
            "ausuc" => {
                let curve = rep["curve"].as_array().unwrap();
                assert!(curve.iter().any(|c| c["s"] == 0.0));
                assert!(curve.iter().any(|c| c["u"] == 0.0));
                let csv = std::fs::read_to_string(out.join("ausuc_curve.csv")).unwrap();
                assert_eq!(csv.lines().count(), curve.len() + 1);
            }
            "errors" => assert!(rep["errors"]["unseen"]["mean"].as_f64().unwrap() >= 0.0),
            _ => assert!(rep["ausuc"].is_null()),
        }
    }
}

#[test]
fn eval_rejects_mismatched_attributes() {
    let t = tempfile::tempdir().unwrap();
    let (data, other, run) = (t.path().join("d"), t.path().join("d6"), t.path().join("run"));
    tiny_data(&data, 4, 4);
    tiny_data(&other, 4, 6);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "0"]);
    let o = mgmrn(&["eval", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&other), "--out", p(&t.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("4 attributes but the dataset has 6"));
}

#[test]
fn visualize_writes_one_map_per_item_and_attribute() {
    let t = tempfile::tempdir().unwrap();
    let (data, run, vis) = (t.path().join("d"), t.path().join("run"), t.path().join("vis"));
    tiny_data(&data, 3, 4);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1"]);
    let names = load_bundle(&data).unwrap().attribute_space.names;
    let attrs = format!("{},{}", names[0], names[3]);
    ok(&["visualize", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&vis), "--items", "0,7,33", "--attrs", &attrs]);

    let side = MapsSidecar::parse(&std::fs::read(vis.join("attention_maps.json")).unwrap()).unwrap();
    assert_eq!(side.maps.len(), 6);
    assert_eq!(side.shape, [8, 8]);
    let bins = std::fs::read_dir(&vis).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin")).count();
    assert_eq!(bins, 6);
    for m in &side.maps {
        let bytes = std::fs::read(vis.join(&m.file)).unwrap();
        let values = mgmrn::binio::decode_f32(&bytes).unwrap();
        assert_eq!(values.len(), 64);
        assert!(values.iter().all(|&v| v >= 0.0));
    }
    let stages = vis.join("stages");
    for l in 0..2 {
        let (s, values) = read_array(&stages, &format!("attention_stage{l}")).unwrap();
        assert_eq!(s.shape[..2], [3, 2]);
        let plane = s.shape[2] * s.shape[3];
        for map in values.chunks(plane) {
            let total: f64 = map.iter().map(|&v| f64::from(v)).sum();
            assert!((total - 1.0).abs() < 1e-5, "stage {l} map sums to {total}");
        }
        let (m, masks) = read_array(&stages, &format!("masks_stage{l}")).unwrap();
        assert_eq!(m.shape[0], 3);
        let parts = m.shape[1];
        let plane = m.shape[2] * m.shape[3];
        for item in masks.chunks(parts * plane) {
            for site in 0..plane {
                let total: f64 = (0..parts).map(|k| f64::from(item[k * plane + site])).sum();
                assert!((total - 1.0).abs() < 1e-5);
            }
        }
    }

    let o = mgmrn(&["visualize", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&vis), "--items", "0", "--attrs", "wings"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown attribute \"wings\""));
}

#[test]
fn export_rows_match_labels() {
    let t = tempfile::tempdir().unwrap();
    let (data, run, ex) = (t.path().join("d"), t.path().join("run"), t.path().join("ex"));
    tiny_data(&data, 4, 4);
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "0"]);
    for kind in ["semantic", "visual"] {
        ok(&["export", "--checkpoint", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&ex), "--kind", kind]);
        let (side, values) = read_array(&ex, &format!("features_{kind}")).unwrap();
        assert_eq!(side.labels.len(), side.shape[0]);
        assert_eq!(side.splits.len(), side.shape[0]);
        assert_eq!(values.len(), side.shape[0] * side.shape[1]);
    }
}

#[test]
fn sweep_runs_every_cell_and_reports() {
    let t = tempfile::tempdir().unwrap();
    let (data, out) = (t.path().join("d"), t.path().join("sw"));
    tiny_data(&data, 4, 4);
    let stdout = ok(&["sweep", "--data", p(&data), "--out", p(&out), "--stages", "1,2", "--parts", "1,3", "--epochs", "1"]);
    assert!(stdout.contains("sequences rise then fall"));
    let report = json(out.join("sweep.json"));
    assert_eq!(report["cells"].as_array().unwrap().len(), 4);
    assert_eq!(report["trends"].as_array().unwrap().len(), 4);
    for cell in ["L1_np1", "L1_np3", "L2_np1", "L2_np3"] {
        assert!(out.join(cell).join("best.ckpt").exists());
    }
    let o = mgmrn(&["sweep", "--data", p(&data), "--out", p(&out), "--L", "2"]);
    assert_eq!(o.status.code(), Some(2));
}
