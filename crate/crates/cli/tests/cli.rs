use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use drp_core::checkpoint::Checkpoint;
use drp_core::dataio::{load_recist, split, DrugCatalog, DEFAULT_RATIOS};
use drp_core::metrics::{auprc, auroc};
use drp_core::synth::files;
use drp_core::trainer::{predict_recist_records, read_log};
use serde_json::Value;

fn drp(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drp"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = drp(cwd, args);
    assert!(
        out.status.success(),
        "drp {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_MODEL: [&str; 12] = [
    "--dim",
    "8",
    "--heads",
    "2",
    "--layers",
    "1",
    "--ffn-dim",
    "16",
    "--epochs",
    "2",
    "--batch-size",
    "32",
];

fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--seed",
            "3",
            "--panel-size",
            "10",
            "--pairs-per-gene",
            "2",
            "--drugs",
            "14",
            "--recist",
            "160",
            "--cellline",
            "60",
            "--survival",
            "80",
            "--cohort-size",
            "30",
        ],
    );
}

fn train_args<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--data", "data", "--out", out];
    v.extend(SMALL_MODEL);
    v.extend(extra);
    v
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for f in [files::PANEL, files::CATALOG, files::RECIST, files::COHORT, "run.json"] {
        assert!(dir.join("data").join(f).exists(), "{f} missing");
    }

    ok(dir, &train_args("pretrain", "pre", &[]));
    let stdout = ok(dir, &train_args("train", "joint", &["--pretrained", "pre"]));
    assert!(stdout.contains("joint"), "{stdout}");
    let log = read_log(&dir.join("joint/log.jsonl")).unwrap();
    assert_eq!(log.len(), 3);
    let run: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("joint/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "train");

    let out = ok(dir, &["eval", "--checkpoint", "joint", "--data", "data", "--json"]);
    let reported: Value = serde_json::from_str(out.trim()).unwrap();
    let ck = Checkpoint::load(&dir.join("joint")).unwrap();
    let catalog = DrugCatalog::load(&dir.join("data").join(files::CATALOG)).unwrap();
    let records = load_recist(&dir.join("data").join(files::RECIST), &catalog).unwrap();
    let test = split(&records, DEFAULT_RATIOS, 0).unwrap().test;
    let p = predict_recist_records(&ck.model, &catalog, &test).unwrap();
    let y: Vec<bool> = test.iter().map(|r| r.label).collect();
    assert_eq!(reported["n"], test.len());
    assert_eq!(reported["auroc"].as_f64().unwrap(), auroc(&y, &p).unwrap());
    assert_eq!(reported["auprc"].as_f64().unwrap(), auprc(&y, &p).unwrap());
    assert_eq!(reported["checkpoint_hash"], ck.hash());
    assert!(dir.join("drp-eval.manifest.json").exists());

    let out = ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "pre",
            "--data",
            "data",
            "--dataset",
            "survival-crc",
            "--json",
        ],
    );
    let ci: Value = serde_json::from_str(out.trim()).unwrap();
    assert!((0.0..=1.0).contains(&ci["ci"].as_f64().unwrap()));

    std::fs::write(
        dir.join("profile.json"),
        r#"{"cancer_type":"CRC","mutations":[{"gene":"KRAS","mutation":"M0"},{"gene":"TP53","mutation":"M1"}]}"#,
    )
    .unwrap();
    let out = ok(
        dir,
        &[
            "recommend",
            "--checkpoint",
            "joint",
            "--catalog",
            "data/catalog.tsv",
            "--profile",
            "profile.json",
            "--cohort",
            "data/cohort.tsv",
            "--json",
            "--plot-data",
            "plot.json",
        ],
    );
    let resp: Value = serde_json::from_str(&out).unwrap();
    let recs = resp["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 10);
    assert_eq!(resp["model"]["hash"], ck.hash());
    assert_eq!(resp["cohort_id"], "cohort");
    assert!(recs.iter().all(|r| r["z"].is_number()));
    let plot: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("plot.json")).unwrap()).unwrap();
    assert_eq!(plot, resp);

    let table = ok(
        dir,
        &[
            "recommend",
            "--checkpoint",
            "joint",
            "--catalog",
            "data/catalog.tsv",
            "--profile",
            "profile.json",
            "--top-k",
            "3",
        ],
    );
    let ranks: Vec<&str> = table
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .filter(|t| t.parse::<usize>().is_ok())
        .collect();
    assert_eq!(ranks, ["1", "2", "3"], "{table}");

    let out = ok(dir, &["inspect", "joint", "--json"]);
    let info: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(info["hash"], ck.hash());
    assert_eq!(info["config"]["encoder"]["d"], 8);
    let text = ok(dir, &["inspect", "joint"]);
    assert!(text.contains("checksums verified"));
}

#[test]
fn ablation_flags_drop_loss_components() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(
        dir,
        &train_args(
            "train",
            "recist-only",
            &["--no-pretrain", "--no-survival", "--no-cellline"],
        ),
    );
    let log = read_log(&dir.join("recist-only/log.jsonl")).unwrap();
    let want: BTreeSet<&str> = ["recist", "total"].into();
    for entry in &log {
        assert_eq!(entry.loss.keys().map(String::as_str).collect::<BTreeSet<_>>(), want);
    }
    let out = drp(dir, &train_args("train", "x", &[]));
    assert_eq!(out.status.code(), Some(3), "stage 2 without a pretrained checkpoint");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(dir, &train_args("pretrain", "pre", &[]));
    std::fs::write(dir.join("p.tsv"), "gene\tmutation\nKRAS\tM0\n").unwrap();
    std::fs::write(dir.join("bad.json"), "{\"mutations\": [").unwrap();
    std::fs::write(dir.join("empty.json"), r#"{"mutations": []}"#).unwrap();
    let rec = |profile: &'static str, extra: &[&'static str]| {
        let mut a = vec![
            "recommend",
            "--checkpoint",
            "pre",
            "--catalog",
            "data/catalog.tsv",
            "--profile",
            profile,
        ];
        a.extend(extra);
        drp(dir, &a).status.code()
    };
    assert_eq!(rec("p.tsv", &[]), Some(0));
    assert_eq!(rec("p.tsv", &["--top-k", "11"]), Some(3));
    assert_eq!(rec("p.tsv", &["--top-k", "0"]), Some(3));
    assert_eq!(rec("bad.json", &[]), Some(3));
    assert_eq!(rec("empty.json", &[]), Some(3));
    assert_eq!(drp(dir, &["recommend", "--bogus"]).status.code(), Some(2));
    assert_eq!(drp(dir, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(drp(dir, &["inspect", "no-such-checkpoint"]).status.code(), Some(4));

    std::fs::write(dir.join("pre/weights.bin"), b"corrupt").unwrap();
    assert_eq!(drp(dir, &["inspect", "pre"]).status.code(), Some(3));
    std::fs::write(dir.join("train.toml"), "lr = \"fast\"\n").unwrap();
    assert_eq!(
        drp(dir, &train_args("pretrain", "x", &["--config", "train.toml"]))
            .status
            .code(),
        Some(3)
    );
}
