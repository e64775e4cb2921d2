use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn scaforge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaforge"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SCAFORGE_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn experiment() -> Value {
    json!({
        "seed": 5,
        "data": {
            "synth": {"n_traces": 400, "n_samples": 16, "sigma": 0.5, "leak_pos_masked": 4, "leak_pos_mask": 10,
                      "key_mode": "random", "unprotected": true, "seed": 0},
            "attack_traces": 300,
            "window": {"start": 2, "len": 6}
        },
        "model": {"preset": "mlp_shallow"},
        "train": {"epochs": 2, "batch_size": 50, "optimizer": {"kind": "adam", "base_lr": 0.003}},
        "attack": {"R": 4, "max_traces": 100, "step": 25},
        "lr_find": {"lr_min": 1e-5, "lr_max": 1.0, "n_steps": 20}
    })
}

fn write_config(dir: &Path, v: &Value) {
    fs::write(
        dir.join("exp.json"),
        serde_json::to_string_pretty(v).unwrap(),
    )
    .unwrap();
}

#[test]
fn gen_is_deterministic_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let synth = experiment()["data"]["synth"].clone();
    fs::write(dir.path().join("synth.json"), synth.to_string()).unwrap();
    for out in ["a.scat", "b.scat"] {
        let o = scaforge(&["gen", "--config", "synth.json", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a.scat")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.scat")).unwrap());
    assert_eq!(a.len(), 32 + 400 * 16 * 4 + 400 * 16 * 2 + 400 + 400);

    let o = scaforge(&["inspect", "a.scat"], dir.path());
    assert_eq!(code(&o), 0);
    let h: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(h["n_traces"], 400);
    assert_eq!(h["n_samples"], 16);
    assert_eq!(h["dtype"], "f32");
    assert_eq!(h["has_masks"], true);
    assert_eq!(h["mask_len"], 1);
}

#[test]
fn train_attack_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &experiment());
    for run in ["r1", "r2"] {
        let o = scaforge(
            &[
                "train",
                "--config",
                "exp.json",
                "--out",
                run,
                "--workers",
                "2",
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ckpt = format!("{run}/ckpt_final");
        let ge = format!("{run}/ge.csv");
        let summary = format!("{run}/ge.json");
        let o = scaforge(
            &[
                "attack",
                "--config",
                "exp.json",
                "--ckpt",
                &ckpt,
                "--out",
                &ge,
                "--summary",
                &summary,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let sal = format!("{run}/saliency.csv");
        assert_eq!(
            code(&scaforge(
                &["saliency", "--config", "exp.json", "--ckpt", &ckpt, "--out", &sal],
                dir.path()
            )),
            0
        );
    }
    let d = dir.path();
    for f in [
        "history.jsonl",
        "metrics.csv",
        "ge.csv",
        "ge.json",
        "saliency.csv",
        "ckpt_final/manifest.json",
        "ckpt_final/tensors.bin",
    ] {
        assert_eq!(
            fs::read(d.join("r1").join(f)).unwrap(),
            fs::read(d.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
    let history = fs::read_to_string(d.join("r1/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let ge = fs::read_to_string(d.join("r1/ge.csv")).unwrap();
    assert!(ge.starts_with("n_traces,mean_rank\n1,"));
    assert_eq!(ge.lines().count(), 1 + 5);
    assert!(fs::read_to_string(d.join("r1/timing.csv"))
        .unwrap()
        .starts_with("epoch,wall_time_s\n"));
}

#[test]
fn snr_and_lr_find_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &experiment());
    let o = scaforge(
        &[
            "snr",
            "--config",
            "exp.json",
            "--set",
            "data.window=null",
            "--out",
            "snr.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snr = fs::read_to_string(dir.path().join("snr.csv")).unwrap();
    assert!(snr.starts_with("index,snr\n"));
    assert_eq!(snr.lines().count(), 17);
    let peak: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(peak["peak"][0], 4);

    let o = scaforge(
        &["lr-find", "--config", "exp.json", "--out", "lr.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lr = fs::read_to_string(dir.path().join("lr.csv")).unwrap();
    assert!(lr.starts_with("lr,raw_loss,smoothed_loss\n"));
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &experiment());
    let cases: &[&[&str]] = &[
        &["bogus"],
        &["train", "--out", "x"],
        &["train", "--config", "missing.json", "--out", "x"],
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--set",
            "train.epochs=3",
            "--set",
            "train.epochs=4",
        ],
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--set",
            "model.preset=nope",
        ],
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--set",
            "data.path=\"t.scat\"",
        ],
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--workers",
            "3",
        ],
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--workers",
            "2",
            "--set",
            "train.workers=2",
        ],
    ];
    for args in cases {
        let o = scaforge(args, dir.path());
        assert_eq!(
            code(&o),
            1,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
    assert_eq!(code(&scaforge(&["--help"], dir.path())), 0);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &experiment());
    let o = scaforge(
        &[
            "train",
            "--config",
            "exp.json",
            "--out",
            "x",
            "--set",
            "train.optimizer.base_lr=1e30",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // completed epochs stay on disk even though the run failed
    let history = fs::read_to_string(dir.path().join("x/history.jsonl")).unwrap();
    assert!(history.lines().count() < 2);

    fs::write(dir.path().join("bad.scat"), b"XXXXnot a trace set").unwrap();
    assert_eq!(code(&scaforge(&["inspect", "bad.scat"], dir.path())), 2);
    assert_eq!(
        code(&scaforge(
            &["attack", "--config", "exp.json", "--ckpt", "nowhere", "--out", "g.csv"],
            dir.path()
        )),
        2
    );
}

#[test]
fn thread_cap_limits_workers() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &experiment());
    let run = |threads: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_scaforge"));
        cmd.args([
            "train",
            "--config",
            "exp.json",
            "--out",
            out,
            "--workers",
            "5",
        ])
        .current_dir(dir.path());
        match threads {
            Some(t) => cmd.env("SCAFORGE_THREADS", t),
            None => cmd.env_remove("SCAFORGE_THREADS"),
        };
        cmd.output().unwrap()
    };
    assert_eq!(code(&run(Some("2"), "capped")), 0);
    assert_eq!(code(&run(None, "uncapped")), 0);
    assert_eq!(code(&run(Some("zero"), "bad")), 1);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["unprotected.json", "masked.json", "ascad_mlp.json"] {
        scaforge_core::ExperimentConfig::load(root.join(name), &[])
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let synth = root.join("synth.json");
    let o = scaforge(
        &[
            "gen",
            "--config",
            synth.to_str().unwrap(),
            "--set",
            "n_traces=10",
            "--out",
            "s.scat",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
