//! Configuration-driven orchestration with per-stage manifests.
//!
//! Every device runs ingest, signatures, durations, vqstae, seqgan,
//! reconstruct and synthesize in order under `<output>/<device>/`; a global
//! evaluate stage then writes the report. A stage is skipped when its
//! manifest still matches: same config hash, same seed, same upstream
//! manifest hash and unchanged output files.

mod config;
mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

pub use config::{PipelineConfig, SCHEMA_VERSION};
pub use toy::{
    make_toy_corpus, GroundTruth, Magnitude, PlantedRange, PlantedSignature, ToyDevice, ToyEvent, ToyPacket,
    ToySpec, Transport,
};

use crate::adversary::{cross_validate, null_experiment, uniform_baseline, write_reports, EvaluationReport};
use crate::durations::fit_duration_partitions;
use crate::error::{Error, Result};
use crate::ingest::{ingest_device, make_windows, PacketRecord, TrafficWindow, WindowRef};
use crate::jsonl;
use crate::reconstruct::{train_frame_length_model, FrameLengthModel, Reconstructor, SyntheticWindow};
use crate::seed;
use crate::seqgan::{train_and_sample, write_curves};
use crate::signatures::{
    build_frame_vocab, count_support, extract_signatures, match_window, rank_signatures, tokenize_window,
    FrameVocab, Signature, SignatureArtifact, SignatureAssignment, SignatureConfig, TokenizedWindow,
    ARTIFACT_VERSION,
};
use crate::synthesize::{build_device_capture, write_capture};
use crate::vqstae::{train_vqstae, VqstaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Signatures,
    Durations,
    Vqstae,
    Seqgan,
    Reconstruct,
    Synthesize,
    Evaluate,
}

impl Stage {
    /// Stages run separately for every device, in order.
    pub const PER_DEVICE: [Stage; 7] = [
        Stage::Ingest,
        Stage::Signatures,
        Stage::Durations,
        Stage::Vqstae,
        Stage::Seqgan,
        Stage::Reconstruct,
        Stage::Synthesize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Signatures => "signatures",
            Stage::Durations => "durations",
            Stage::Vqstae => "vqstae",
            Stage::Seqgan => "seqgan",
            Stage::Reconstruct => "reconstruct",
            Stage::Synthesize => "synthesize",
            Stage::Evaluate => "evaluate",
        }
    }

    fn previous(self) -> Option<Stage> {
        let i = Self::PER_DEVICE.iter().position(|&s| s == self)?;
        i.checked_sub(1).map(|j| Self::PER_DEVICE[j])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Provenance record written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub device_id: Option<String>,
    /// SHA-256 of the config fields the stage reads.
    pub config_hash: String,
    pub seed: u64,
    /// Manifest name to SHA-256 of the manifest file it was built on.
    pub upstream: BTreeMap<String, String>,
    /// Output path, relative to the output directory, to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

/// Stages executed and skipped by one invocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<(Option<String>, Stage)>,
    pub skipped: Vec<(Option<String>, Stage)>,
}

/// Ranked signatures and the token table built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSignatures {
    pub config: SignatureConfig,
    pub signatures: Vec<Signature>,
    pub vocab: FrameVocab,
}

/// Sidecar describing where a synthetic window file came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub device_id: String,
    pub generator: String,
    pub windows: usize,
    pub seed: u64,
    pub seqgan_manifest: String,
    /// Application protocols written as opaque payloads of the right length,
    /// with the number of packets carrying each.
    pub payload_standins: BTreeMap<String, usize>,
}

/// Application-layer flags present in `windows`; their inner structure is
/// never materialized.
fn payload_standins(windows: &[TrafficWindow]) -> BTreeMap<String, usize> {
    use crate::ingest::Protocol;
    let app = [
        Protocol::Http,
        Protocol::Https,
        Protocol::Dhcp,
        Protocol::Bootp,
        Protocol::Ssdp,
        Protocol::Dns,
        Protocol::Mdns,
        Protocol::Ntp,
    ];
    let mut counts = BTreeMap::new();
    for p in windows.iter().flat_map(|w| &w.packets) {
        for proto in app.iter().filter(|&&a| p.protocol_flags.contains(a)) {
            *counts.entry(proto.name().to_string()).or_default() += 1;
        }
    }
    counts
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_hex(&bytes))
}

pub fn device_dir(cfg: &PipelineConfig, device: &str) -> PathBuf {
    cfg.output_dir.join(device)
}

pub fn manifest_path(cfg: &PipelineConfig, device: Option<&str>, stage: Stage) -> PathBuf {
    let base = device.map_or_else(|| cfg.output_dir.clone(), |d| device_dir(cfg, d));
    base.join("manifests").join(format!("{}.json", stage.name()))
}

/// Hash of the config fields `stage` depends on, plus the master seed.
pub fn config_hash(cfg: &PipelineConfig, stage: Stage) -> Result<String> {
    let part = match stage {
        Stage::Ingest => serde_json::json!([cfg.dataset_root, cfg.window_len, cfg.windows]),
        Stage::Signatures => serde_json::to_value(&cfg.signatures)?,
        Stage::Durations => serde_json::json!(cfg.duration_k),
        Stage::Vqstae => serde_json::to_value(&cfg.vqstae)?,
        Stage::Seqgan => serde_json::json!([cfg.gan, cfg.synthetic_windows]),
        Stage::Reconstruct => serde_json::to_value(&cfg.reconstruct)?,
        Stage::Synthesize => serde_json::to_value(&cfg.addressing)?,
        Stage::Evaluate => serde_json::to_value(&cfg.adversary)?,
    };
    let doc = serde_json::json!({ "schema": SCHEMA_VERSION, "seed": cfg.seed, "stage": stage.name(), "config": part });
    Ok(sha256_hex(&serde_json::to_vec(&doc)?))
}

pub fn stage_seed(cfg: &PipelineConfig, device: Option<&str>, stage: Stage) -> u64 {
    seed::derive(cfg.seed, &format!("{}/{}", device.unwrap_or("global"), stage.name()))
}

/// What a valid manifest for the next execution of a stage must contain.
struct Expected {
    config_hash: String,
    seed: u64,
    upstream: BTreeMap<String, String>,
}

fn upstream_hashes(cfg: &PipelineConfig, device: Option<&str>, stage: Stage, devices: &[String]) -> Result<BTreeMap<String, String>> {
    let mut up = BTreeMap::new();
    let mut add = |name: String, path: PathBuf| -> Result<()> {
        if path.is_file() {
            up.insert(name, hash_file(&path)?);
        }
        Ok(())
    };
    match (stage, device) {
        (Stage::Evaluate, _) => {
            for d in devices {
                add(format!("{d}/synthesize"), manifest_path(cfg, Some(d), Stage::Synthesize))?;
            }
        }
        (s, Some(d)) => {
            if let Some(p) = s.previous() {
                add(format!("{d}/{p}"), manifest_path(cfg, Some(d), p))?;
            }
        }
        (_, None) => {}
    }
    Ok(up)
}

fn expected(cfg: &PipelineConfig, device: Option<&str>, stage: Stage, devices: &[String]) -> Result<Expected> {
    Ok(Expected {
        config_hash: config_hash(cfg, stage)?,
        seed: stage_seed(cfg, device, stage),
        upstream: upstream_hashes(cfg, device, stage, devices)?,
    })
}

/// A stage is complete when its manifest matches `exp` and every output
/// still hashes to the recorded value.
fn is_complete(cfg: &PipelineConfig, device: Option<&str>, stage: Stage, exp: &Expected) -> bool {
    let path = manifest_path(cfg, device, stage);
    let Ok(m) = jsonl::read_json::<StageManifest>(&path) else {
        return false;
    };
    m.schema_version == SCHEMA_VERSION
        && m.config_hash == exp.config_hash
        && m.seed == exp.seed
        && m.upstream == exp.upstream
        && m.outputs
            .iter()
            .all(|(rel, h)| hash_file(&cfg.output_dir.join(rel)).is_ok_and(|x| &x == h))
}

fn write_manifest(
    cfg: &PipelineConfig,
    device: Option<&str>,
    stage: Stage,
    exp: Expected,
    outputs: &[PathBuf],
    summary: serde_json::Value,
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for path in outputs {
        let files = if path.is_dir() { files_under(path)? } else { vec![path.clone()] };
        for f in files {
            let rel = f
                .strip_prefix(&cfg.output_dir)
                .map_err(|_| Error::Data(format!("{} is outside the output directory", f.display())))?;
            hashes.insert(rel.to_string_lossy().replace('\\', "/"), hash_file(&f)?);
        }
    }
    let manifest = StageManifest {
        schema_version: SCHEMA_VERSION,
        stage,
        device_id: device.map(str::to_string),
        config_hash: exp.config_hash,
        seed: exp.seed,
        upstream: exp.upstream,
        outputs: hashes,
        summary,
    };
    jsonl::write_json(&manifest_path(cfg, device, stage), &manifest)
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(files_under(&p)?);
        } else {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Records grouped back into captures; `records.jsonl` keeps capture order.
pub fn load_captures(dir: &Path) -> Result<Vec<Vec<PacketRecord>>> {
    let records: Vec<PacketRecord> = jsonl::read(&dir.join("records.jsonl"))?;
    let mut captures: Vec<Vec<PacketRecord>> = Vec::new();
    for r in records {
        match captures.last_mut() {
            Some(c) if c[0].capture_id == r.capture_id => c.push(r),
            _ => captures.push(vec![r]),
        }
    }
    Ok(captures)
}

pub fn load_windows(dir: &Path) -> Result<Vec<TrafficWindow>> {
    jsonl::read(&dir.join("windows.jsonl"))
}

pub fn load_synthetic(dir: &Path) -> Result<Vec<TrafficWindow>> {
    jsonl::read(&dir.join("synthetic.jsonl"))
}

fn assignments(windows: &[TrafficWindow], ranked: &[Signature]) -> Vec<SignatureAssignment> {
    windows.iter().map(|w| match_window(w, ranked)).collect()
}

/// Run one device stage; returns output paths and a summary.
fn run_device_stage(cfg: &PipelineConfig, device: &str, stage: Stage, seed: u64) -> Result<(Vec<PathBuf>, serde_json::Value)> {
    let dir = device_dir(cfg, device);
    match stage {
        Stage::Ingest => {
            let captures = ingest_device(&cfg.dataset_root.join(device), device)?;
            if captures.is_empty() {
                return Err(Error::Data(format!("device {device} has no usable captures")));
            }
            let windows = make_windows(&captures, cfg.window_len, cfg.windows, seed)?;
            if windows.is_empty() {
                return Err(Error::Data(format!("no capture of {device} holds {} packets", cfg.window_len)));
            }
            let records: Vec<&PacketRecord> = captures.iter().flatten().collect();
            let refs: Vec<WindowRef> = windows.iter().map(WindowRef::from).collect();
            jsonl::write(&dir.join("records.jsonl"), &records)?;
            jsonl::write(&dir.join("windows.jsonl"), &windows)?;
            jsonl::write(&dir.join("window_manifest.jsonl"), &refs)?;
            Ok((
                vec![dir.join("records.jsonl"), dir.join("windows.jsonl"), dir.join("window_manifest.jsonl")],
                serde_json::json!({ "captures": captures.len(), "packets": records.len(), "windows": windows.len() }),
            ))
        }
        Stage::Signatures => {
            let flows: Vec<_> = load_captures(&dir)?
                .iter()
                .map(|c| c.iter().map(|p| (p.frame_length, p.direction)).collect())
                .collect();
            let windows = load_windows(&dir)?;
            let mut sigs = extract_signatures(&flows, &cfg.signatures)?;
            count_support(&mut sigs, &windows);
            let ranked = rank_signatures(sigs);
            let vocab = build_frame_vocab(&ranked, &assignments(&windows, &ranked), &windows);
            let mined = MinedSignatures {
                config: cfg.signatures.clone(),
                signatures: ranked,
                vocab,
            };
            jsonl::write_json(&dir.join("mined.json"), &mined)?;
            Ok((
                vec![dir.join("mined.json")],
                serde_json::json!({ "signatures": mined.signatures.len(), "vocab": mined.vocab.len() }),
            ))
        }
        Stage::Durations => {
            let mined: MinedSignatures = jsonl::read_json(&dir.join("mined.json"))?;
            let windows = load_windows(&dir)?;
            let durations: Vec<f64> = windows.iter().flat_map(|w| w.packets.iter().map(|p| p.duration)).collect();
            let model = fit_duration_partitions(&durations, cfg.duration_k)?;
            let assigned = assignments(&windows, &mined.signatures);
            let tokens: Vec<TokenizedWindow> = windows
                .iter()
                .zip(&assigned)
                .map(|(w, a)| tokenize_window(w, a, &mined.vocab, &model))
                .collect();
            let artifact = SignatureArtifact {
                version: ARTIFACT_VERSION,
                device_id: device.to_string(),
                config: mined.config,
                signatures: mined.signatures,
                vocab: mined.vocab,
                durations: model,
            };
            artifact.save(&dir.join("signatures.json"))?;
            jsonl::write(&dir.join("tokens.jsonl"), &tokens)?;
            Ok((
                vec![dir.join("signatures.json"), dir.join("tokens.jsonl")],
                serde_json::json!({ "partitions": artifact.durations.k }),
            ))
        }
        Stage::Vqstae => {
            let artifact = SignatureArtifact::load(&dir.join("signatures.json"))?;
            let tokens: Vec<TokenizedWindow> = jsonl::read(&dir.join("tokens.jsonl"))?;
            let model = train_vqstae(&tokens, artifact.vocab.len(), artifact.durations.k, &cfg.vqstae, seed)?;
            model.save(&dir.join("vqstae"))?;
            let codes = model.encode_many(&tokens)?;
            jsonl::write(&dir.join("codes.jsonl"), &codes)?;
            let accuracy = model.field_accuracy(&tokens)?;
            Ok((
                vec![dir.join("vqstae"), dir.join("codes.jsonl")],
                serde_json::json!({ "accuracy": accuracy, "parameters": model.params().parameter_count() }),
            ))
        }
        Stage::Seqgan => {
            let codes: Vec<Vec<usize>> = jsonl::read(&dir.join("codes.jsonl"))?;
            let run = train_and_sample(&codes, cfg.vqstae.k, &cfg.gan, cfg.synthetic_windows, seed)?;
            let out = dir.join("seqgan");
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            run.generator.save(&out)?;
            run.discriminator.save(&out)?;
            write_curves(&out.join("curves.csv"), &run.pretrain_nll, &run.rounds)?;
            jsonl::write_json(&out.join("sampling.json"), &run.attempts)?;
            jsonl::write(&dir.join("generated_codes.jsonl"), &run.samples)?;
            let accepted = run.attempts.last().cloned();
            Ok((vec![out, dir.join("generated_codes.jsonl")], serde_json::json!({ "accepted": accepted })))
        }
        Stage::Reconstruct => {
            let artifact = SignatureArtifact::load(&dir.join("signatures.json"))?;
            let windows = load_windows(&dir)?;
            let tokens: Vec<TokenizedWindow> = jsonl::read(&dir.join("tokens.jsonl"))?;
            let codes: Vec<Vec<usize>> = jsonl::read(&dir.join("codes.jsonl"))?;
            let generated: Vec<Vec<usize>> = jsonl::read(&dir.join("generated_codes.jsonl"))?;
            let model = VqstaeModel::load(&dir.join("vqstae"))?;
            let lengths = train_frame_length_model(
                &windows,
                &tokens,
                &codes,
                &artifact.vocab,
                model.config.k,
                &cfg.reconstruct,
                seed::derive(seed, "train"),
            )?;
            lengths.save(&dir.join("frame_lengths"))?;
            let synthetic = reconstruct(&artifact, &model, &lengths, &generated, device, seed::derive(seed, "assemble"))?;
            let records: Vec<TrafficWindow> = synthetic.iter().map(SyntheticWindow::to_traffic_window).collect();
            jsonl::write(&dir.join("synthetic.jsonl"), &records)?;
            let provenance = Provenance {
                device_id: device.to_string(),
                generator: "iotflowgen".into(),
                windows: records.len(),
                seed,
                seqgan_manifest: hash_file(&manifest_path(cfg, Some(device), Stage::Seqgan))?,
                payload_standins: payload_standins(&records),
            };
            jsonl::write_json(&dir.join("synthetic.provenance.json"), &provenance)?;
            Ok((
                vec![dir.join("frame_lengths"), dir.join("synthetic.jsonl"), dir.join("synthetic.provenance.json")],
                serde_json::json!({ "windows": records.len(), "length_accuracy": lengths.accuracy.last() }),
            ))
        }
        Stage::Synthesize => {
            let windows: Vec<SyntheticWindow> = load_synthetic(&dir)?.iter().map(SyntheticWindow::from_traffic_window).collect();
            let mut rng = seed::rng(seed);
            let blueprints = build_device_capture(&windows, &cfg.addressing, &mut rng);
            write_capture(&blueprints, &dir.join("synthetic.pcap"))?;
            Ok((vec![dir.join("synthetic.pcap")], serde_json::json!({ "packets": blueprints.len() })))
        }
        Stage::Evaluate => Err(Error::Config("evaluate is not a per-device stage".into())),
    }
}

/// Decode generated code sequences and turn them into synthetic windows.
pub fn reconstruct(
    artifact: &SignatureArtifact,
    model: &VqstaeModel,
    lengths: &FrameLengthModel,
    generated: &[Vec<usize>],
    device: &str,
    seed: u64,
) -> Result<Vec<SyntheticWindow>> {
    let decoded = model.decode_many(generated)?;
    let rec = Reconstructor {
        vocab: &artifact.vocab,
        lengths,
        durations: &artifact.durations,
        ports: &model.ports,
    };
    rec.reconstruct_many(&decoded, generated, device, "synthetic", seed)
}

/// Real-vs-synthetic, uniform-baseline and null evaluations of one device.
pub fn evaluate_device(
    device: &str,
    real: &[TrafficWindow],
    synthetic: &[TrafficWindow],
    cfg: &crate::adversary::AdversaryConfig,
    seed: u64,
) -> Result<Vec<EvaluationReport>> {
    let baseline = uniform_baseline(real, synthetic.len(), seed::derive(seed, "uniform"))?;
    Ok(vec![
        cross_validate(device, "iotflowgen", real, synthetic, cfg, seed::derive(seed, "iotflowgen"))?,
        cross_validate(device, "uniform", real, &baseline, cfg, seed::derive(seed, "uniform.cv"))?,
        null_experiment(device, real, cfg, seed::derive(seed, "null"))?,
    ])
}

fn run_evaluate(cfg: &PipelineConfig, devices: &[String], seed: u64) -> Result<(Vec<PathBuf>, serde_json::Value)> {
    let mut reports = Vec::new();
    for d in devices {
        let dir = device_dir(cfg, d);
        let real = load_windows(&dir)?;
        let synthetic = load_synthetic(&dir)?;
        reports.extend(evaluate_device(d, &real, &synthetic, &cfg.adversary, seed::derive(seed, d))?);
    }
    write_reports(&cfg.output_dir, &reports)?;
    let out = &cfg.output_dir;
    Ok((
        vec![out.join("report.csv"), out.join("report.txt"), out.join("report.json")],
        serde_json::json!(reports.iter().map(|r| (format!("{}/{}", r.device_id, r.method), r.mean_accuracy)).collect::<BTreeMap<_, _>>()),
    ))
}

/// Run `stage` unless its manifest says it is already done.
fn step(
    cfg: &PipelineConfig,
    device: Option<&str>,
    stage: Stage,
    devices: &[String],
    summary: &Mutex<RunSummary>,
) -> Result<()> {
    let key = (device.map(str::to_string), stage);
    let exp = expected(cfg, device, stage, devices)?;
    if is_complete(cfg, device, stage, &exp) {
        info!(device = device.unwrap_or("-"), %stage, "up to date");
        summary.lock().expect("summary lock").skipped.push(key);
        return Ok(());
    }
    info!(device = device.unwrap_or("-"), %stage, "running");
    let label = match device {
        Some(d) => format!("{d}/{stage}"),
        None => stage.to_string(),
    };
    let (outputs, stats) = match device {
        Some(d) => run_device_stage(cfg, d, stage, exp.seed),
        None => run_evaluate(cfg, devices, exp.seed),
    }
    .map_err(|e| e.in_stage(&label))?;
    write_manifest(cfg, device, stage, exp, &outputs, stats).map_err(|e| e.in_stage(&label))?;
    summary.lock().expect("summary lock").executed.push(key);
    Ok(())
}

/// Run every stage up to and including `last`, resuming where manifests allow.
pub fn run_until(cfg: &PipelineConfig, last: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    let devices = cfg.device_ids()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io("writing config.toml", e))?;
    let stages: Vec<Stage> = Stage::PER_DEVICE.iter().copied().filter(|&s| s <= last).collect();
    let summary = Mutex::new(RunSummary::default());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<()>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(devices.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(device) = devices.get(i) else { break };
                let r = stages
                    .iter()
                    .try_for_each(|&s| step(cfg, Some(device), s, &devices, &summary));
                results.lock().expect("results lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    for (_, r) in results {
        r?;
    }
    if last == Stage::Evaluate {
        step(cfg, None, Stage::Evaluate, &devices, &summary)?;
    }
    let mut summary = summary.into_inner().expect("summary lock");
    summary.executed.sort();
    summary.skipped.sort();
    Ok(summary)
}

/// Full run; returns the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PathBuf> {
    run_until(cfg, Stage::Evaluate)?;
    Ok(cfg.output_dir.clone())
}
