use std::path::Path;

use iotflow_core::jsonl;
use iotflow_core::pipeline::{
    config_hash, load_synthetic, load_windows, make_toy_corpus, manifest_path, run_until, GroundTruth, PipelineConfig,
    Stage, StageManifest, ToySpec,
};
use iotflow_core::Error;
use sha2::{Digest, Sha256};

fn small_spec() -> ToySpec {
    ToySpec { captures_per_device: 4, ..ToySpec::default() }
}

/// Enough of everything to exercise each stage, nothing more.
fn tiny(data: &Path, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        dataset_root: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        seed: 3,
        windows: 24,
        synthetic_windows: 12,
        ..PipelineConfig::default()
    };
    cfg.vqstae.k = 8;
    cfg.vqstae.d = 16;
    cfg.vqstae.heads = 2;
    cfg.vqstae.layers = 1;
    cfg.vqstae.epochs = 2;
    cfg.gan.pretrain_epochs = 2;
    cfg.gan.disc_pretrain_steps = 1;
    cfg.gan.rounds = 1;
    cfg.gan.rollouts = 2;
    cfg.reconstruct.epochs = 1;
    cfg.adversary.epochs = 1;
    cfg.adversary.folds = 2;
    cfg
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn toy_corpus_layout_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let truth = make_toy_corpus(&ToySpec::default(), 5, a.path()).unwrap();
    make_toy_corpus(&ToySpec::default(), 5, b.path()).unwrap();
    for device in ["toy-camera", "toy-plug"] {
        let n = std::fs::read_dir(a.path().join(device)).unwrap().count();
        assert_eq!(n, 20);
        for c in 0..20 {
            let name = format!("capture_{c:02}.pcap");
            assert_eq!(sha(&a.path().join(device).join(&name)), sha(&b.path().join(device).join(&name)));
        }
    }
    let stored: GroundTruth = jsonl::read_json(&a.path().join("ground_truth.json")).unwrap();
    assert_eq!(stored.seed, 5);
    assert_eq!(stored.signatures, truth.signatures);
    assert!(truth.signatures.iter().any(|s| s.ranges.len() == 2 && s.ranges[0].min_len == 117));

    let c = tempfile::tempdir().unwrap();
    make_toy_corpus(&ToySpec::default(), 6, c.path()).unwrap();
    let first = Path::new("toy-camera").join("capture_00.pcap");
    assert_ne!(sha(&a.path().join(&first)), sha(&c.path().join(&first)));
}

#[test]
fn full_run_then_resume_only_reruns_what_is_missing() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    make_toy_corpus(&small_spec(), 1, data.path()).unwrap();
    let cfg = tiny(data.path(), out.path());

    let first = run_until(&cfg, Stage::Evaluate).unwrap();
    assert_eq!(first.executed.len(), 2 * Stage::PER_DEVICE.len() + 1);
    assert!(first.skipped.is_empty());
    for f in ["config.toml", "report.csv", "report.txt", "report.json"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    // header + 3 methods per device
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    for device in ["toy-camera", "toy-plug"] {
        let dir = out.path().join(device);
        for f in ["windows.jsonl", "mined.json", "signatures.json", "codes.jsonl", "synthetic.jsonl", "synthetic.pcap"] {
            assert!(dir.join(f).exists(), "{device}/{f}");
        }
        assert_eq!(load_windows(&dir).unwrap().len(), 24);
        let synthetic = load_synthetic(&dir).unwrap();
        assert_eq!(synthetic.len(), 12);
        assert!(synthetic.iter().all(|w| w.packets.len() == cfg.window_len));

        let m: StageManifest = jsonl::read_json(&manifest_path(&cfg, Some(device), Stage::Vqstae)).unwrap();
        assert_eq!(m.stage, Stage::Vqstae);
        assert_eq!(m.device_id.as_deref(), Some(device));
        assert_eq!(m.config_hash, config_hash(&cfg, Stage::Vqstae).unwrap());
        assert!(!m.upstream.is_empty());
        assert!(!m.outputs.is_empty());
        let ingest: StageManifest = jsonl::read_json(&manifest_path(&cfg, Some(device), Stage::Ingest)).unwrap();
        assert!(ingest.upstream.is_empty());
        assert_ne!(ingest.seed, m.seed);
    }

    std::fs::remove_file(out.path().join("report.csv")).unwrap();
    let second = run_until(&cfg, Stage::Evaluate).unwrap();
    assert_eq!(second.executed, vec![(None, Stage::Evaluate)]);
    assert_eq!(second.skipped.len(), 2 * Stage::PER_DEVICE.len());
    assert_eq!(std::fs::read_to_string(out.path().join("report.csv")).unwrap(), csv);

    // Touching a generator setting invalidates the generator and everything after it.
    let mut changed = cfg.clone();
    changed.gan.rollouts = 3;
    let third = run_until(&changed, Stage::Seqgan).unwrap();
    let ran: Vec<Stage> = third.executed.iter().map(|(_, s)| *s).collect();
    assert_eq!(ran, vec![Stage::Seqgan, Stage::Seqgan]);
}

#[test]
fn missing_dataset_is_a_config_error_and_writes_nothing() {
    let out = tempfile::tempdir().unwrap();
    let target = out.path().join("run");
    let cfg = PipelineConfig {
        dataset_root: out.path().join("absent"),
        output_dir: target.clone(),
        ..PipelineConfig::default()
    };
    assert!(matches!(run_until(&cfg, Stage::Evaluate), Err(Error::Config(_))));
    assert!(!target.exists());
}

#[test]
fn unreadable_capture_fails_inside_the_ingest_stage() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    std::fs::create_dir(data.path().join("broken")).unwrap();
    std::fs::write(data.path().join("broken").join("x.pcap"), [7u8; 64]).unwrap();
    let cfg = tiny(data.path(), out.path());
    match run_until(&cfg, Stage::Ingest) {
        Err(Error::Stage { stage, .. }) => assert!(stage.contains("ingest"), "{stage}"),
        other => panic!("expected a stage error, got {other:?}"),
    }
}
