use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use serde_json::Value;

fn dcer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcer"))
        .args(args)
        .output()
        .expect("spawn dcer")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Relative paths of every file below `root`, sorted.
fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tests run one at a time so the timed smoke run does not share the CPU.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// One generated dataset and a two-epoch model shared by the tests that
/// need a checkpoint.
struct Trained {
    _root: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    elapsed: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let run = root.path().join("run");
        let started = Instant::now();
        assert_ok(&dcer(&["generate-data", "--n", "2000", "--seed", "7", "--out", path_str(&data)]));
        assert_ok(&dcer(&["train", "--data", path_str(&data), "--epochs", "2", "--out", path_str(&run)]));
        Trained {
            elapsed: started.elapsed(),
            _root: root,
            data,
            run,
        }
    })
}

#[test]
fn generate_then_train_two_epochs_logs_csv() {
    let _guard = serial();
    let t = trained();
    assert!(t.elapsed < Duration::from_secs(120), "smoke run took {:?}", t.elapsed);
    let log = fs::read_to_string(t.run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,split,mae,corr,acc7,acc2,f1,loss_pred,loss_recon,loss_energy,loss_joint"
    );
    assert_eq!(lines.len(), 5, "two epochs of train and val rows");
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[0], (i / 2 + 1).to_string());
        assert_eq!(fields[1], if i % 2 == 0 { "train" } else { "val" });
    }
    for f in ["best.dctc", "last.dctc", "report.json", "effective_config.json"] {
        assert!(t.run.join(f).exists(), "{f} missing");
    }
    let report = read_json(&t.run.join("report.json"));
    assert_eq!(report["epochs_run"], 2);
    assert!(report["test"]["mae"].as_f64().unwrap().is_finite());

    let data_report = read_json(&t.data.join("report.json"));
    assert_eq!(data_report["train"].as_u64().unwrap() + data_report["val"].as_u64().unwrap() + data_report["test"].as_u64().unwrap(), 2000);
}

#[test]
fn sweep_writes_one_row_per_cell_and_seed() {
    let _guard = serial();
    let t = trained();
    let out_dir = tempfile::tempdir().unwrap();
    let ckpt = t.run.join("best.dctc");
    let out = dcer(&[
        "sweep",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&t.data),
        "--split",
        "val",
        "--mrs",
        "0,0.5",
        "--Ts",
        "0,3",
        "--protocols",
        "zero,noise",
        "--out",
        path_str(out_dir.path()),
    ]);
    assert_ok(&out);
    let csv = fs::read_to_string(out_dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mr,T,protocol,modalities,seed,n,mae,corr,acc7,acc5,acc3,acc2,f1"
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 8 * 5);
    let mut cells: Vec<(String, String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[2].clone())).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 8);
    let means = fs::read_to_string(out_dir.path().join("sweep_mean.csv")).unwrap();
    assert_eq!(means.lines().count(), 1 + 8);
}

#[test]
fn eval_reconstruct_and_uncertainty_write_reports() {
    let _guard = serial();
    let t = trained();
    let ckpt = t.run.join("best.dctc");
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = (path_str(&ckpt), path_str(&t.data));

    let eval_dir = dir.path().join("eval");
    assert_ok(&dcer(&[
        "eval", "--checkpoint", ckpt, "--data", data, "--split", "val", "--mr", "0.5", "--T", "3", "--out", path_str(&eval_dir),
    ]));
    let report = read_json(&eval_dir.join("report.json"));
    assert_eq!(report["n"], 200);
    let echo = read_json(&eval_dir.join("effective_config.json"));
    assert_eq!(echo["config"]["recon"]["steps"], 3);

    let rec_dir = dir.path().join("rec");
    assert_ok(&dcer(&[
        "reconstruct", "--checkpoint", ckpt, "--data", data, "--split", "val", "--mr", "0.5", "--with-encodings", "--out",
        path_str(&rec_dir),
    ]));
    let text = fs::read_to_string(rec_dir.join("reconstructions.jsonl")).unwrap();
    let records: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 200);
    let container = dcer_core::container::read_container(&rec_dir.join("reconstructions.dctc")).unwrap();
    let mut expected = 0;
    for r in &records {
        for key in ["id", "missing_modalities", "final_energy", "prediction"] {
            assert!(r.get(key).is_some(), "record lacks {key}");
        }
        let missing = r["missing_modalities"].as_array().unwrap();
        if missing.is_empty() {
            assert_eq!(r["final_energy"].as_f64(), Some(0.0));
        }
        for m in missing {
            let name = format!("{}/{}", r["id"].as_str().unwrap(), m.as_str().unwrap());
            assert!(container.get(&name).is_some(), "{name} not in container");
            expected += 1;
        }
    }
    assert_eq!(container.len(), expected);

    let unc_dir = dir.path().join("unc");
    assert_ok(&dcer(&[
        "uncertainty", "--checkpoint", ckpt, "--data", data, "--split", "val", "--seeds", "0,1", "--out", path_str(&unc_dir),
    ]));
    let doc = read_json(&unc_dir.join("report.json"));
    assert_eq!(doc["per_seed"].as_array().unwrap().len(), 2);
}

#[test]
fn numeric_divergence_exits_two() {
    let _guard = serial();
    let t = trained();
    let ckpt = t.run.join("best.dctc");
    let dir = tempfile::tempdir().unwrap();
    let out = dcer(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&t.data),
        "--split",
        "val",
        "--mr",
        "0.9",
        "--T",
        "200",
        "--set",
        "recon.eta=1e30",
        "--out",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn checkpoint_commands_reject_config_files() {
    let _guard = serial();
    let t = trained();
    let ckpt = t.run.join("best.dctc");
    let cfg = t.run.join("effective_config.json");
    let out = dcer(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&t.data),
        "--config",
        path_str(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_exit_code_tracks_the_suite() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = dcer(&["grad-check", "--out", path_str(dir.path())]);
    assert_ok(&out);
    let csv = fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.lines().count() > 10);

    let strict = dcer(&["grad-check", "--seeds", "0", "--tol", "1e-12", "--out", path_str(dir.path())]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let _guard = serial();
    let out = dcer(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");

    assert_eq!(dcer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dcer(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_values_exit_one() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = path_str(dir.path());
    assert_eq!(dcer(&["generate-data", "--set", "data.nope=1", "--out", d]).status.code(), Some(1));
    assert_eq!(dcer(&["generate-data", "--set", "data.audio_len=63", "--out", d]).status.code(), Some(1));
    assert_eq!(dcer(&["train", "--set", "train.lr=-1", "--out", d]).status.code(), Some(1));
}

#[test]
fn runs_repeat_from_their_effective_config_echo() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    assert_ok(&dcer(&[
        "generate-data", "--n", "60", "--seed", "3", "--set", "data.audio_noise=0.25", "--out", path_str(&first),
    ]));
    let echo_path = first.join("effective_config.json");
    let echo = read_json(&echo_path);
    assert_eq!(echo["config"]["data"]["n"], 60);
    assert_eq!(echo["config"]["data"]["audio_noise"], 0.25);
    assert_eq!(echo["command"]["generate-data"]["n"], 60);
    // the echoed config alone reproduces the dataset
    assert_ok(&dcer(&["generate-data", "--config", path_str(&echo_path), "--out", path_str(&second)]));
    let files = files_under(&first);
    assert!(files.len() > 60, "expected per-sample files");
    for rel in files {
        let name = rel.to_string_lossy();
        if name == "effective_config.json" || name == "report.json" {
            continue;
        }
        assert_eq!(fs::read(first.join(&rel)).unwrap(), fs::read(second.join(&rel)).unwrap(), "{name} differs");
    }

    let mv = dir.path().join("mv");
    assert_ok(&dcer(&["mask-variance", "--trials", "200", "--out", path_str(&mv)]));
    let res = read_json(&mv.join("report.json"));
    assert!(res["var_freq"].as_f64().unwrap() < res["var_time"].as_f64().unwrap());
}
