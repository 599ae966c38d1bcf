use std::fs;
use std::path::Path;
use std::process::Command;

use mli::sweep::{load_records, run_sweep, ExperimentConfig, SweepRecord, RECORD_COLUMNS};

fn config(dir: &Path, grid: &str) -> String {
    format!(
        "name = \"tiny\"\noutput_dir = \"{}\"\nloss_threshold = 0.5\n\n\
         [dataset]\nkind = \"blobs\"\nclasses = 3\nn = 120\nd = 4\nseparation = 4.0\nseed = 0\ntest_n = 60\n\n\
         {grid}\n[training]\nepochs = 4\nbatch_size = 16\n",
        dir.display()
    )
}

const ONE_CELL: &str = "[grid]\nhidden = [[8]]\noptimizers = [{ kind = { type = \"sgd\" }, learning_rate = 0.1 }]\nseeds = [0]\n";
const FOUR_CELLS: &str =
    "[grid]\nhidden = [[8]]\nbatch_norm = [false, true]\noptimizers = [{ kind = { type = \"adam\" }, learning_rate = 0.01 }]\nseeds = [0, 1]\n";

/// Records with timing removed, for comparing reruns.
fn timeless(mut records: Vec<SweepRecord>) -> Vec<SweepRecord> {
    records.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
    for r in &mut records {
        r.wall_clock_secs = 0.0;
    }
    records
}

#[test]
fn rerunning_a_finished_sweep_does_no_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&config(tmp.path(), ONE_CELL)).unwrap();
    let first = run_sweep(&cfg).unwrap();
    assert_eq!((first.records.len(), first.executed), (1, 1));
    let second = run_sweep(&cfg).unwrap();
    assert_eq!(second.executed, 0);
    assert_eq!(first.records, second.records);
    let r = &first.records[0];
    assert!(r.error.is_none() && !r.diverged);
    assert!(r.min_delta.is_some() && r.final_test_accuracy.is_some());
}

#[test]
fn grid_cells_are_distinct_and_resume_after_interruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(&config(tmp.path(), FOUR_CELLS)).unwrap();
    let full = run_sweep(&cfg).unwrap();
    assert_eq!(full.records.len(), 4);
    let mut hashes: Vec<&str> = full.records.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
    assert_eq!(full.records.iter().filter(|r| r.bn_used).count(), 2);

    // Simulate a crash that lost two finished cells.
    for r in &full.records[..2] {
        fs::remove_file(tmp.path().join("cells").join(&r.config_hash).join("record.json")).unwrap();
    }
    let resumed = run_sweep(&cfg).unwrap();
    assert_eq!(resumed.executed, 2);
    assert_eq!(timeless(resumed.records), timeless(full.records.clone()));
    assert_eq!(timeless(load_records(tmp.path()).unwrap()), timeless(full.records));
}

#[test]
fn sweeps_are_reproducible_across_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_sweep(&ExperimentConfig::from_toml(&config(a.path(), FOUR_CELLS)).unwrap()).unwrap();
    let rb = run_sweep(&ExperimentConfig::from_toml(&config(b.path(), FOUR_CELLS)).unwrap()).unwrap();
    assert_eq!(timeless(ra.records), timeless(rb.records));
}

#[test]
fn records_csv_has_the_documented_columns() {
    let tmp = tempfile::tempdir().unwrap();
    run_sweep(&ExperimentConfig::from_toml(&config(tmp.path(), ONE_CELL)).unwrap()).unwrap();
    let text = fs::read_to_string(tmp.path().join("records.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config_hash,optimizer,learning_rate,seed,hidden,activation,batch_norm,dataset,final_train_loss,\
         final_train_acc,final_test_loss,final_test_acc,diverged,min_delta,distance_abs,distance_norm,\
         avg_gauss_length,bn_used,loss_threshold,included,error,wall_clock_secs"
    );
    assert_eq!(lines.next().unwrap().split(',').count(), RECORD_COLUMNS.len());
    assert!(lines.next().is_none());
    let cell = tmp.path().join("cells");
    let dir = fs::read_dir(&cell).unwrap().next().unwrap().unwrap().path();
    for f in ["record.json", "init.json", "final.json", "interpolation.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert!(tmp.path().join("manifest.json").exists());
}

#[test]
fn a_diverging_cell_is_recorded_without_stopping_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = "[grid]\nhidden = [[8]]\noptimizers = [{ kind = { type = \"sgd\" }, learning_rate = 0.1 }, \
                { kind = { type = \"sgd\" }, learning_rate = 1e6 }]\nseeds = [0]\n";
    let out = run_sweep(&ExperimentConfig::from_toml(&config(tmp.path(), grid)).unwrap()).unwrap();
    assert_eq!(out.records.len(), 2);
    let bad = out.records.iter().find(|r| r.optimizer.learning_rate == 1e6).unwrap();
    assert!(bad.diverged || bad.error.is_some());
    assert!(!bad.included(0.5));
    let good = out.records.iter().find(|r| r.optimizer.learning_rate == 0.1).unwrap();
    assert!(good.error.is_none() && !good.diverged);
}

fn mli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mli"))
}

#[test]
fn cli_runs_a_sweep_and_tabulates_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, config(&tmp.path().join("sweep"), FOUR_CELLS)).unwrap();
    let status = mli().args(["sweep", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(status.success());
    let out = mli()
        .args(["table", "--group-by", "optimizer,batch_norm", "--records"])
        .arg(tmp.path().join("sweep"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("no_bn") && text.contains("bn"), "{text}");
}

#[test]
fn cli_trains_and_interpolates_a_checkpoint_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, config(&tmp.path().join("sweep"), ONE_CELL)).unwrap();
    let run = tmp.path().join("run");
    assert!(mli().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(&run).status().unwrap().success());
    let status = mli()
        .args(["interpolate", "--config"])
        .arg(&cfg_path)
        .arg("--init")
        .arg(run.join("init.json"))
        .arg("--final")
        .arg(run.join("final.json"))
        .arg("--out")
        .arg(tmp.path().join("interp"))
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(tmp.path().join("interp").join("interpolation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn cli_verification_commands_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = |name: &str| tmp.path().join(name);
    assert!(mli().args(["verify-theorem", "--curves", "50", "--d", "2,4", "--out"]).arg(out("thm")).status().unwrap().success());
    assert!(mli().args(["nqm", "--d", "20", "--trials", "200", "--lr", "0.01", "--out"]).arg(out("nqm")).status().unwrap().success());
    assert!(mli().args(["linear2", "--instances", "4", "--steps", "2000", "--out"]).arg(out("lin")).status().unwrap().success());
}

#[test]
fn cli_reports_bad_input_with_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n").unwrap();
    let status = mli().args(["sweep", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = mli().args(["table", "--records"]).arg(tmp.path().join("missing")).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
