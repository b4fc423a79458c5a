use std::path::Path;
use std::process::{Command, Output};

fn iotflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iotflow")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn default_config_is_valid_toml() {
    let out = iotflow(&["default-config"]);
    assert!(out.status.success());
    let body = text(&out.stdout);
    assert!(body.contains("window_len = 20"));
    assert!(body.contains("[vqstae]"));
}

#[test]
fn toy_corpus_spec_can_be_printed_and_written() {
    let out = iotflow(&["make-toy-corpus", "--out", "unused", "--print-spec"]);
    assert!(out.status.success());
    assert!(text(&out.stdout).contains("toy-camera"));

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("toy");
    let out = iotflow(&["make-toy-corpus", "--out", root.to_str().unwrap(), "--seed", "4"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(root.join("ground_truth.json").is_file());
    assert!(root.join("toy-plug").join("capture_19.pcap").is_file());
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = iotflow(&["ingest", "--dataset-root", missing.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("dataset root"));

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "sed = 3\n").unwrap();
    let out = iotflow(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = iotflow(&["report", "--output", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("junk")).unwrap();
    std::fs::write(data.join("junk").join("a.pcap"), [3u8; 100]).unwrap();
    let out = iotflow(&[
        "ingest",
        "--dataset-root",
        data.to_str().unwrap(),
        "--output",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("junk/ingest"));
}

fn tiny_config(path: &Path) {
    std::fs::write(
        path,
        "windows = 16\nsynthetic_windows = 8\n\
         [vqstae]\nk = 4\nd = 8\nheads = 1\nlayers = 1\nepochs = 1\n\
         [gan]\npretrain_epochs = 1\ndisc_pretrain_steps = 1\nrounds = 1\nrollouts = 2\n\
         [reconstruct]\nepochs = 1\n\
         [adversary]\nepochs = 1\nfolds = 2\n",
    )
    .unwrap();
}

#[test]
fn run_all_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    tiny_config(&cfg);
    assert!(iotflow(&["make-toy-corpus", "--out", data.to_str().unwrap()]).status.success());

    let args = ["--config", cfg.to_str().unwrap(), "--dataset-root", data.to_str().unwrap(), "--output", run.to_str().unwrap(), "--device", "toy-plug"];
    let out = iotflow(&[&["run-all"], &args[..]].concat());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("ran      toy-plug/synthesize"));
    assert!(stdout.contains("iotflowgen"));
    assert!(run.join("toy-plug").join("synthetic.pcap").is_file());

    let again = text(&iotflow(&[&["run-all"], &args[..]].concat()).stdout);
    assert!(again.contains("skipped  toy-plug/ingest") && !again.contains("ran "));

    let report = iotflow(&["report", "--output", run.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(text(&report.stdout).contains("toy-plug"));
}
