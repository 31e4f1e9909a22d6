//! Criterion: repeated CLI runs with identical argv produce bit-identical
//! artifacts (checkpoints, reports, inference tiles).

use std::path::Path;
use std::process::Command;

fn oceanfm(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_oceanfm"))
        .current_dir(dir)
        .args(args)
        .status()
        .expect("spawn oceanfm");
    assert!(status.success(), "oceanfm {args:?} failed");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
}

#[test]
fn a10_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs: Vec<Vec<Vec<u8>>> = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        std::fs::create_dir(&dir).unwrap();
        let d = dir.as_path();
        oceanfm(d, &["synth", "--out", "tiles", "--seed", "11", "--count", "10", "--bands", "2"]);
        oceanfm(d, &[
            "pretrain", "--data", "tiles", "--profile", "small", "--epochs", "2",
            "--seed", "3", "--out", "pre.ckp", "--log", "pre.csv",
        ]);
        oceanfm(d, &[
            "synth", "--out", "patches", "--seed", "12", "--count", "12", "--bands", "2",
            "--labeled", "--task", "chl",
        ]);
        oceanfm(d, &[
            "finetune", "--data", "patches", "--init", "pre.ckp", "--task", "chl",
            "--profile", "small", "--epochs", "1", "--seed", "5", "--out", "ft.ckp",
            "--log", "ft.csv",
        ]);
        oceanfm(d, &[
            "baseline", "--data", "patches", "--task", "chl", "--trees", "20",
            "--seed", "9", "--out", "base.etr",
        ]);
        oceanfm(d, &[
            "eval", "--data", "patches", "--task", "chl", "--model-kind", "trees",
            "--trees", "20", "--folds", "4", "--seed", "4", "--report", "cv.txt",
        ]);
        oceanfm(d, &[
            "synth", "--out", "scene", "--seed", "21", "--count", "1", "--bands", "2",
            "--size", "84",
        ]);
        oceanfm(d, &[
            "infer", "--scene", "scene/tile_00000.oct", "--model", "ft.ckp",
            "--out", "pred.oct", "--histogram", "hist.csv",
        ]);
        runs.push(
            ["pre.ckp", "pre.csv", "ft.ckp", "ft.csv", "base.etr", "cv.txt", "pred.oct", "hist.csv"]
                .iter()
                .map(|n| read(d, n))
                .collect(),
        );
    }
    let names =
        ["pre.ckp", "pre.csv", "ft.ckp", "ft.csv", "base.etr", "cv.txt", "pred.oct", "hist.csv"];
    for (i, name) in names.iter().enumerate() {
        assert_eq!(runs[0][i], runs[1][i], "{name} differs between identical runs");
    }
    println!("criterion 10 (cli determinism): pass, 8 artifacts bit-identical across runs");
}
