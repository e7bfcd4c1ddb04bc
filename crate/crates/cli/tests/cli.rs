use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = dmil(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    dmil(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    fs::write(path, text).unwrap();
    path.to_path_buf()
}

const SMALL: &str = r#"{"tile_size": 64, "cell": 16, "train_tiles": 5, "test_tiles": 1}"#;
const TINY_TRAIN: [&str; 3] = ["--set", "epochs=1", "--set"];

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    ok(&["gen-data", "--out", p(&out), "--seed", "3"]);
    let m = manifest(&out);
    assert_eq!(m["splits"]["train"]["scenes"].as_array().unwrap().len(), 64);
    assert_eq!(m["splits"]["test"]["scenes"].as_array().unwrap().len(), 16);
    let bags = m["splits"]["train"]["bags"].as_u64().unwrap()
        + m["splits"]["test"]["bags"].as_u64().unwrap();
    assert_eq!(bags, 16 * 80);
    assert_eq!(m["priors"].as_array().unwrap().len(), 6);
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        &tmp.path().join("c.json"),
        r#"{"classes": 2, "tile_size": 64, "cell": 16, "train_tiles": 2, "test_tiles": 1}"#,
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&a),
        "--seed",
        "5",
    ]);
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&b),
        "--seed",
        "5",
    ]);
    assert_eq!(manifest(&a), manifest(&b));
    assert_eq!(manifest(&a)["priors"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read(a.join("train_0001.bin")).unwrap(),
        fs::read(b.join("train_0001.bin")).unwrap()
    );

    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            p(&cfg),
            "--out",
            p(&a),
            "--seed",
            "5"
        ]),
        2
    );
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&a),
        "--seed",
        "5",
        "--force",
    ]);

    let bad = write(
        &tmp.path().join("bad.json"),
        r#"{"classes": 2, "colour": "red"}"#,
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            p(&bad),
            "--out",
            p(&tmp.path().join("c"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--out",
            p(&tmp.path().join("d")),
            "--set",
            "classes=1"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            p(&tmp.path().join("none.json")),
            "--out",
            p(&tmp.path().join("e"))
        ]),
        3
    );
}

/// tune -> train -> eval -> report on a tiny dataset, twice, with
/// identical outputs.
#[test]
fn full_lifecycle_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let cfg = write(&root.join("scene.json"), SMALL);
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--out",
        p(&data),
        "--seed",
        "1",
    ]);

    let run = |tag: &str| -> PathBuf {
        let base = root.join(tag);
        let tune = base.join("tune");
        let small = [TINY_TRAIN[0], TINY_TRAIN[1], TINY_TRAIN[2], "batch_size=8"];
        let mut args = vec![
            "tune",
            "--data",
            p(&data),
            "--kind",
            "std,gattn",
            "--trials",
            "1",
            "--seed",
            "4",
            "--out",
            p(&tune),
        ];
        args.extend(small);
        ok(&args);
        for kind in ["std", "gattn"] {
            let dir = tune.join(kind);
            let rows = fs::read_to_string(dir.join("trials.csv")).unwrap();
            assert_eq!(rows.lines().count(), 2, "{rows}");
            let chosen: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap())
                    .unwrap();
            assert_eq!(chosen["epochs"], 10);
            assert_eq!(chosen.get("beta").is_some(), kind != "std");
            assert!(chosen.get("r").is_none());
            let trained = base.join("train").join(kind);
            ok(&[
                "train",
                "--data",
                p(&data),
                "--config",
                p(&dir.join("config.json")),
                "--replicates",
                "3",
                "--out",
                p(&trained),
                "--set",
                "epochs=1",
                "--set",
                "steps_per_epoch=2",
            ]);
            let saved: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(trained.join("config.json")).unwrap())
                    .unwrap();
            assert_eq!(saved.get("beta").is_some(), kind != "std");
            let reps = fs::read_to_string(trained.join("replicates.csv")).unwrap();
            assert_eq!(reps.lines().count(), 4);
            ok(&[
                "eval",
                "--data",
                p(&data),
                "--checkpoint",
                p(&trained.join("checkpoint.json")),
                "--patches",
                "3",
                "--out",
                p(&base.join("eval").join(kind)),
            ]);
        }
        ok(&[
            "report",
            "--in",
            p(&base.join("eval")),
            "--out",
            p(&base.join("report")),
        ]);
        base
    };
    let a = run("a");
    let b = run("b");

    let summary = fs::read_to_string(a.join("report/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 2 + 6 + 2);
    assert!(lines[1].starts_with("Std,") && lines[2].starts_with("GAttn,"));
    assert!(fs::read_to_string(a.join("report/aa.svg"))
        .unwrap()
        .contains("<svg"));
    let ppm = fs::read(a.join("eval/std/rasters/patch_0002_pred.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));

    for rel in [
        "tune/gattn/trials.csv",
        "tune/gattn/config.json",
        "train/gattn/checkpoint.json.bin",
        "train/std/replicates.csv",
        "eval/gattn/metrics.csv",
        "eval/std/confusion.csv",
        "eval/gattn/rasters/patch_0000_pred.ppm",
        "report/summary.csv",
        "report/miou.svg",
    ] {
        assert_eq!(
            fs::read(a.join(rel)).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn commands_name_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = dmil(&[
        "eval",
        "--data",
        p(root),
        "--checkpoint",
        p(&root.join("model.json")),
        "--out",
        p(&root.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.json"));
    let out = dmil(&[
        "tune",
        "--data",
        p(root),
        "--kind",
        "std",
        "--out",
        p(&root.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
    assert_eq!(
        code(&["report", "--in", p(root), "--out", p(&root.join("r"))]),
        3
    );
    assert_eq!(
        code(&[
            "tune",
            "--data",
            p(root),
            "--kind",
            "bogus",
            "--out",
            p(&root.join("t"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "tune",
            "--data",
            p(root),
            "--tune-split",
            "test",
            "--out",
            p(&root.join("t"))
        ]),
        2
    );
}

#[test]
fn version_mismatch_and_external_split_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write(&tmp.path().join("scene.json"), SMALL);
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let args = [
        "tune",
        "--data",
        p(&data),
        "--kind",
        "mean",
        "--trials",
        "1",
        "--tune-split",
        "external",
        "--out",
    ];
    let mut a = args.to_vec();
    let t = tmp.path().join("t");
    a.push(p(&t));
    assert_eq!(code(&a), 3);

    let path = data.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(
        &path,
        text.replacen("\"format_version\": 1", "\"format_version\": 99", 1),
    )
    .unwrap();
    let mut a = args.to_vec();
    a[8] = "holdout20";
    a.push(p(&t));
    assert_eq!(code(&a), 3);
}

#[test]
fn diverging_training_exits_with_its_own_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write(&tmp.path().join("scene.json"), SMALL);
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let train = write(
        &tmp.path().join("train.json"),
        r#"{"kind": "mean", "lr": 1e300, "weight_decay": 0.0, "beta": 0.5, "epochs": 3, "batch_size": 8, "steps_per_epoch": 3}"#,
    );
    let out = dmil(&[
        "train",
        "--data",
        p(&data),
        "--config",
        p(&train),
        "--replicates",
        "1",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
