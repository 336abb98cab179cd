use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpanet::pipeline::{embeddings_for, model_config, Checkpoint, Model, RunConfig};

const SMALL: &[&str] = &[
    "--image-size",
    "32",
    "--size-min",
    "6",
    "--size-max",
    "10",
    "--objects-min",
    "2",
    "--objects-max",
    "3",
    "--shift-x",
    "2",
    "--jitter",
    "1",
    "--visual-dim",
    "8",
    "--shared-dim",
    "16",
    "--text-dim",
    "16",
    "--epochs",
    "1",
    "--count",
    "4",
];

fn lpanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpanet"))
        .args(args)
        .env_remove("LPANET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lpanet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(SMALL).chain(extra).copied().collect()
}

#[test]
fn gen_writes_samples_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&with(
            &["gen", "--out", s(d)],
            &["--count", "8", "--seed", "42"],
        ));
    }
    let samples = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(samples, 8);
    let m = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(m, fs::read_to_string(b.join("manifest.txt")).unwrap());
    assert!(a.join("config.txt").exists());
}

#[test]
fn unknown_config_key_exits_two_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let out = lpanet(&[
        "gen",
        "--out",
        s(&tmp.path().join("d")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn usage_and_path_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&with(&["gen", "--out", s(&data)], &[]));
    let ck = tmp.path().join("ck");
    let out = lpanet(&with(
        &["train", "--stage", "2", "--data", s(&data), "--out", s(&ck)],
        &[],
    ));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    let missing = tmp.path().join("nope");
    let out = lpanet(&["eval", "--ckpt", s(&missing), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_lpanet"))
        .args(with(&["train", "--data", s(&data), "--out", s(&ck)], &[]))
        .env("LPANET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(lpanet(&["train", "--stage", "3"]).status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_one_and_reports_the_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&with(&["gen", "--out", s(&data)], &[]));
    let out = lpanet(&with(
        &[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&tmp.path().join("ck")),
        ],
        &["--lr-stage1", "1e30", "--epochs", "3"],
    ));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn default_hyperparameters_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", s(tmp.path()), "--count", "1"]);
    let echoed = RunConfig::load(&tmp.path().join("config.txt")).unwrap();
    assert_eq!(
        (
            echoed.lr_stage1,
            echoed.lr_stage2,
            echoed.momentum,
            echoed.weight_decay,
            echoed.batch_size,
            echoed.epochs
        ),
        (0.035, 0.02, 0.843, 0.00036, 4, 50)
    );
}

#[test]
fn zero_epoch_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ck = tmp.path().join("ck");
    ok(&with(&["gen", "--out", s(&data)], &[]));
    ok(&with(
        &["train", "--stage", "1", "--data", s(&data), "--out", s(&ck)],
        &["--epochs", "0"],
    ));
    let run = RunConfig::load(&ck.join("config.txt")).unwrap();
    let fresh = Model::new(model_config(&run), embeddings_for(&run).unwrap(), run.seed).unwrap();
    assert_eq!(Checkpoint::load(&ck).unwrap().model, fresh);
}

#[test]
fn two_stages_then_eval_is_byte_identical_and_reproducible_from_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&with(&["gen", "--out", s(&data)], &[]));
    let run_both = |root: &Path, config: Option<&Path>| -> String {
        let (c1, c2) = (root.join("s1"), root.join("s2"));
        let mut a = vec!["train", "--stage", "1", "--data", s(&data), "--out", s(&c1)];
        match config {
            Some(c) => a.extend(["--config", s(c)]),
            None => a.extend(SMALL),
        }
        ok(&a);
        let cfg = c1.join("config.txt");
        ok(&[
            "train",
            "--stage",
            "2",
            "--data",
            s(&data),
            "--init",
            s(&c1),
            "--out",
            s(&c2),
            "--config",
            s(&cfg),
        ]);
        let log = fs::read_to_string(c2.join("loss.jsonl")).unwrap();
        assert!(log.lines().count() > 0);
        let out = ok(&["eval", "--ckpt", s(&c2), "--data", s(&data)]);
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run_both(&tmp.path().join("r1"), None);
    let again = ok(&[
        "eval",
        "--ckpt",
        s(&tmp.path().join("r1/s2")),
        "--data",
        s(&data),
    ]);
    assert_eq!(first, String::from_utf8(again.stdout).unwrap());
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["stage"], 2);

    let echoed = tmp.path().join("r1/s1/config.txt");
    let second = run_both(&tmp.path().join("r2"), Some(&echoed));
    assert_eq!(first, second);
}

#[test]
fn ablate_writes_four_metrics_and_an_ordered_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("abl");
    ok(&with(&["gen", "--out", s(&data)], &[]));
    ok(&with(
        &["ablate", "--data", s(&data), "--out", s(&out)],
        &[],
    ));
    for v in ["baseline", "sam", "sam_ism", "full"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("{v}.json"))).unwrap())
                .unwrap();
        assert_eq!(m["variant"], v);
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let rows: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(rows, ["baseline", "+SAM", "+ISM", "+ESM"]);
}

fn mean_abs_offset(stdout: &[u8]) -> f64 {
    String::from_utf8_lossy(stdout)
        .lines()
        .filter_map(|l| {
            l.strip_prefix("mean_abs_offset_")
                .and_then(|r| r.split('=').nth(1))
        })
        .map(|v| v.trim().parse::<f64>().unwrap())
        .sum()
}

#[test]
fn inspect_dumps_maps_offsets_and_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (c1, c2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    ok(&["gen", "--out", s(&data), "--fast", "--shift-x", "3"]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&c1),
        "--fast",
        "--shift-x",
        "3",
    ]);
    ok(&[
        "train",
        "--stage",
        "2",
        "--data",
        s(&data),
        "--init",
        s(&c1),
        "--out",
        s(&c2),
        "--config",
        s(&c1.join("config.txt")),
    ]);

    let (aligned, shifted) = (tmp.path().join("aligned"), tmp.path().join("shifted"));
    ok(&["gen", "--out", s(&aligned), "--count", "1", "--seed", "7"]);
    ok(&[
        "gen",
        "--out",
        s(&shifted),
        "--count",
        "1",
        "--seed",
        "7",
        "--shift-x",
        "3",
    ]);
    let (ia, is) = (tmp.path().join("ia"), tmp.path().join("is"));
    let a = ok(&[
        "inspect",
        "--ckpt",
        s(&c2),
        "--data",
        s(&aligned),
        "--sample",
        "0",
        "--out",
        s(&ia),
    ]);
    let b = ok(&[
        "inspect",
        "--ckpt",
        s(&c2),
        "--data",
        s(&shifted),
        "--sample",
        "0",
        "--out",
        s(&is),
    ]);

    for c in 0..5 {
        for m in ["ir_response", "rgb_response"] {
            let pgm = fs::read(ia.join(format!("{m}_{c}.pgm"))).unwrap();
            assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
            assert_eq!(pgm.len(), 13 + 64 * 64);
        }
    }
    for f in [
        "offset_dy.ten",
        "offset_dx.ten",
        "best_index.ten",
        "v_ir_to_rgb.ten",
        "v_rgb_to_ir.ten",
    ] {
        assert!(ia.join(f).exists(), "{f} missing");
    }
    let (ma, ms) = (mean_abs_offset(&a.stdout), mean_abs_offset(&b.stdout));
    assert!(ma < ms, "aligned {ma} vs shifted {ms}");

    let out = lpanet(&[
        "inspect",
        "--ckpt",
        s(&c2),
        "--data",
        s(&aligned),
        "--sample",
        "5",
        "--out",
        s(&ia),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
