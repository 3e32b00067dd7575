use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_causalvqa"))
}

fn run(cmd: &str, config: &Path, out_dir: Option<&Path>) -> Output {
    let mut c = bin();
    c.arg(cmd).arg("--config").arg(config);
    match out_dir {
        Some(d) => c.env("CAUSALVQA_OUTPUT_DIR", d),
        None => c.env_remove("CAUSALVQA_OUTPUT_DIR"),
    };
    c.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn small_dataset(seed: u64, n: usize) -> Value {
    json!({"synthetic": {"seed": seed, "n_instances": n, "n_clips": 8, "video_dim": 12, "text_dim": 12}})
}

fn small_model() -> Value {
    json!({"video_dim": 12, "text_dim": 12, "attention": {"model_dim": 16, "n_heads": 2, "n_layers": 1}})
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_slice(&read(&dir.join("metrics.json"))).unwrap()
}

/// Every subcommand twice into separate directories; metrics and curves
/// must match byte for byte.
#[test]
fn every_command_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let gen = write_config(root, "gen.json", &json!({"dataset": small_dataset(1, 40), "optimizer": {"seed": 0}, "output_dir": "gen"}));
    ok(&run("gen-data", &gen, None));
    let manifest = root.join("gen/dataset/manifest.json");
    assert!(manifest.exists());
    let m = metrics(&root.join("gen"));
    assert_eq!((m["schema_version"].as_u64(), m["command"].as_str()), (Some(1), Some("gen-data")));
    assert_eq!(m["dataset"]["count"], 40);
    let file_ds = json!({"file": {"manifest": "gen/dataset/manifest.json"}});

    let train_cfg = |beta: f64, source: &str, out: &str| {
        json!({
            "dataset": file_ds, "eval_dataset": small_dataset(2, 30), "model": small_model(),
            "intervention": {"beta_cl": beta, "memory_source": source},
            "mnse": {"regime": "F3", "k": 2, "window_W": 2},
            "optimizer": {"seed": 5, "steps": 12, "batch_size": 4}, "output_dir": out
        })
    };
    let cfg_a = write_config(root, "train_a.json", &train_cfg(0.2, "mnse", "a"));
    let cfg_b = write_config(root, "train_b.json", &train_cfg(0.0, "random_bank", "b"));
    ok(&run("train", &cfg_a, None));
    ok(&run("train", &cfg_b, None));
    let ma = metrics(&root.join("a"));
    assert!(ma["eval"]["overall"].is_number());
    assert_eq!(ma["train"]["final_losses"]["step"], 11);
    let curve = String::from_utf8(read(&root.join("a/curves.csv"))).unwrap();
    assert_eq!(curve.lines().next(), Some("step,erm_loss,cl_loss,total_loss"));
    assert_eq!(curve.lines().count(), 13);

    let shared = |extra: Value| {
        let mut v = json!({"dataset": file_ds, "eval_dataset": small_dataset(2, 30), "model": small_model(), "optimizer": {"seed": 5, "lr": 1e-3}});
        v.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
        v
    };
    let configs = [
        ("train", cfg_a.clone()),
        ("eval", write_config(root, "eval.json", &shared(json!({"checkpoint": "a/model.json"})))),
        ("intervene-eval", write_config(root, "ie.json", &shared(json!({"model_a": "a/model.json", "model_b": "b/model.json"})))),
        ("probe", write_config(root, "probe.json", &shared(json!({})))),
        (
            "sample",
            write_config(
                root,
                "sample.json",
                &shared(json!({
                    "dataset": {"synthetic": {"seed": 3, "n_instances": 6, "n_clips": 8, "video_dim": 12, "text_dim": 12, "frames_per_clip": 12}},
                    "checkpoint": "a/model.json",
                    "sampler": {
                        "mar": {"variant": "MAR-16", "seed": 1},
                        "pcma80": {"pool": 80, "subsample": 16},
                        "s3": {"mode": "student", "steps": 5, "student": {"frame_dim": 12, "text_dim": 12, "attention": {"model_dim": 8, "n_heads": 2, "n_layers": 1}, "S": 3}}
                    }
                })),
            ),
        ),
    ];
    for (cmd, cfg) in &configs {
        let (d1, d2) = (root.join(format!("{cmd}-1")), root.join(format!("{cmd}-2")));
        ok(&run(cmd, cfg, Some(&d1)));
        ok(&run(cmd, cfg, Some(&d2)));
        for f in ["metrics.json", "curves.csv"] {
            assert_eq!(read(&d1.join(f)), read(&d2.join(f)), "{cmd}: {f} differs between runs");
        }
        assert_eq!(metrics(&d1)["command"], *cmd);
    }
    let ie = metrics(&root.join("intervene-eval-1"));
    assert_eq!(ie["protocol"]["model_a"]["seen_mode"], "mnse");
    assert_eq!(ie["protocol"]["model_b"]["seen_mode"], "random");
    let s = metrics(&root.join("sample-1"));
    assert_eq!(s["mar"]["indices"][0].as_array().unwrap().len(), 16);
    assert_eq!(s["pcma80"]["indices"][0].as_array().unwrap().len(), 16);
    assert_eq!(s["s3"]["indices"][0].as_array().unwrap().len(), 3);
    // non-training commands still emit the curve header
    assert_eq!(read(&root.join("probe-1/curves.csv")), b"step,erm_loss,cl_loss,total_loss\n");
}

#[test]
fn invalid_fields_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        &json!({
            "dataset": {"synthetic": {"causal_fraction": 0.0, "noise_std": -1.0}},
            "intervention": {"alpha": -2.0},
            "mnse": {"k": 0},
            "optimizer": {"seed": 1, "batch_size": 0}
        }),
    );
    let out = run("train", &cfg, Some(&tmp.path().join("o")));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["causal_fraction", "noise_std", "intervention.alpha", "mnse.k", "optimizer.batch_size"] {
        assert!(err.contains(field), "missing {field} in:\n{err}");
    }
    assert!(!tmp.path().join("o/metrics.json").exists());
}

#[test]
fn unknown_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({"dataset": small_dataset(0, 5), "optimizer": {"seed": 0}, "learning_rate": 3}));
    let out = run("probe", &cfg, Some(tmp.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn missing_inputs_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &json!({"dataset": small_dataset(0, 5), "optimizer": {"seed": 0}}));
    let out = run("eval", &cfg, Some(tmp.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let out = run("sample", &cfg, Some(tmp.path()));
    assert_eq!(out.status.code(), Some(1));

    let usage = bin().arg("train").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let nofile = run("train", &tmp.path().join("absent.json"), None);
    assert_eq!(nofile.status.code(), Some(1));
}
