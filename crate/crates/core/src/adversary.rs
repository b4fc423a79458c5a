//! Metadata adversaries: an LSTM over per-packet categorical features plus
//! timing, used to tell real from synthetic windows or one device from
//! another.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Embedding, Linear, Optimizer};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::error::{Error, Result};
use crate::ingest::{Direction, PacketRecord, ProtocolFlags, TrafficWindow};
use crate::nn::{self, LstmCell, ParamStore};
use crate::seed;

pub const UNK: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    pub hidden: usize,
    pub embedding: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub folds: usize,
    /// Occurrences a categorical value needs in training to get its own id.
    pub min_count: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            hidden: 64,
            embedding: 8,
            epochs: 15,
            batch_size: 32,
            learning_rate: 3e-3,
            folds: 5,
            min_count: 2,
        }
    }
}

/// Categorical tables fit on a training split; id 0 is UNK everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryVocab {
    pub lengths: BTreeMap<u32, u32>,
    pub protocols: BTreeMap<u16, u32>,
    pub ports: BTreeMap<u16, u32>,
    pub timing_mean: f64,
    pub timing_std: f64,
}

/// Ids in sorted key order for values seen at least `min_count` times.
fn index<K: Ord + Copy>(values: impl Iterator<Item = K>, min_count: usize) -> BTreeMap<K, u32> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(k, _)| k)
        .zip(1..)
        .collect()
}

impl AdversaryVocab {
    /// Values rarer than `min_count` stay UNK, so the UNK embedding is
    /// trained on the same kind of value it meets at test time.
    pub fn fit(windows: &[TrafficWindow], min_count: usize) -> Self {
        let packets = || windows.iter().flat_map(|w| &w.packets);
        let n = packets().count().max(1) as f64;
        let mean = packets().map(|p| p.duration).sum::<f64>() / n;
        let var = packets().map(|p| (p.duration - mean).powi(2)).sum::<f64>() / n;
        AdversaryVocab {
            lengths: index(packets().map(|p| p.frame_length), min_count),
            protocols: index(packets().map(|p| p.protocol_flags.bits()), min_count),
            ports: index(packets().flat_map(|p| [p.src_port, p.dst_port]).flatten(), min_count),
            timing_mean: mean,
            timing_std: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }

    fn port(&self, port: Option<u16>) -> u32 {
        // Absent ports get their own id after every seen port.
        match port {
            None => self.ports.len() as u32 + 1,
            Some(p) => self.ports.get(&p).copied().unwrap_or(UNK),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryInput {
    pub lengths: Vec<u32>,
    pub timings: Vec<f64>,
    pub directions: Vec<u32>,
    pub protocols: Vec<u32>,
    pub src_ports: Vec<u32>,
    pub dst_ports: Vec<u32>,
}

pub fn encode_features(vocab: &AdversaryVocab, window: &TrafficWindow) -> AdversaryInput {
    let ps = &window.packets;
    AdversaryInput {
        lengths: ps.iter().map(|p| vocab.lengths.get(&p.frame_length).copied().unwrap_or(UNK)).collect(),
        timings: ps
            .iter()
            .map(|p| (p.duration - vocab.timing_mean) / vocab.timing_std)
            .collect(),
        directions: ps.iter().map(|p| p.direction.as_index() as u32 + 1).collect(),
        protocols: ps
            .iter()
            .map(|p| vocab.protocols.get(&p.protocol_flags.bits()).copied().unwrap_or(UNK))
            .collect(),
        src_ports: ps.iter().map(|p| vocab.port(p.src_port)).collect(),
        dst_ports: ps.iter().map(|p| vocab.port(p.dst_port)).collect(),
    }
}

pub struct Classifier {
    pub vocab: AdversaryVocab,
    pub classes: usize,
    pub seq_len: usize,
    pub loss_curve: Vec<f64>,
    params: ParamStore,
    length_emb: Embedding,
    direction_emb: Embedding,
    protocol_emb: Embedding,
    src_port_emb: Embedding,
    dst_port_emb: Embedding,
    cell: LstmCell,
    out: Linear,
}

impl Classifier {
    fn new(vocab: AdversaryVocab, classes: usize, seq_len: usize, cfg: &AdversaryConfig, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(seed, DType::F32);
        let e = cfg.embedding;
        let ports = vocab.ports.len() + 2;
        let length_emb = nn::embedding(&mut ps, "adv.length", vocab.lengths.len() + 1, e)?;
        let direction_emb = nn::embedding(&mut ps, "adv.direction", 3, e)?;
        let protocol_emb = nn::embedding(&mut ps, "adv.protocol", vocab.protocols.len() + 1, e)?;
        let src_port_emb = nn::embedding(&mut ps, "adv.src_port", ports, e)?;
        let dst_port_emb = nn::embedding(&mut ps, "adv.dst_port", ports, e)?;
        let cell = LstmCell::new(&mut ps, "adv.lstm", 5 * e + 1, cfg.hidden)?;
        let out = nn::linear(&mut ps, "adv.out", cfg.hidden, classes)?;
        Ok(Classifier {
            vocab,
            classes,
            seq_len,
            loss_curve: Vec::new(),
            params: ps,
            length_emb,
            direction_emb,
            protocol_emb,
            src_port_emb,
            dst_port_emb,
            cell,
            out,
        })
    }

    fn logits(&self, windows: &[&TrafficWindow]) -> Result<Tensor> {
        let b = windows.len();
        let l = self.seq_len;
        let mut cols: [Vec<u32>; 5] = Default::default();
        let mut timing = Vec::with_capacity(b * l);
        for w in windows {
            if w.packets.len() != l {
                return Err(Error::LengthMismatch { left: w.packets.len(), right: l });
            }
            let x = encode_features(&self.vocab, w);
            cols[0].extend(x.lengths);
            cols[1].extend(x.directions);
            cols[2].extend(x.protocols);
            cols[3].extend(x.src_ports);
            cols[4].extend(x.dst_ports);
            timing.extend(x.timings.iter().map(|&t| t as f32));
        }
        let ids = |v: &[u32]| nn::u32_tensor(v, &[b, l]);
        let parts = [
            self.length_emb.forward(&ids(&cols[0])?)?,
            self.direction_emb.forward(&ids(&cols[1])?)?,
            self.protocol_emb.forward(&ids(&cols[2])?)?,
            self.src_port_emb.forward(&ids(&cols[3])?)?,
            self.dst_port_emb.forward(&ids(&cols[4])?)?,
            Tensor::from_vec(timing, (b, l, 1), self.params.device())?,
        ];
        let x = Tensor::cat(&parts, 2)?;
        let hs = self.cell.sequence(&x)?;
        let last = hs.narrow(1, l - 1, 1)?.squeeze(1)?;
        Ok(self.out.forward(&last)?)
    }

    pub fn predict(&self, windows: &[&TrafficWindow]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let pred = self.logits(chunk)?.argmax(1)?.to_vec1::<u32>()?;
            out.extend(pred.into_iter().map(|p| p as usize));
        }
        Ok(out)
    }

    pub fn accuracy(&self, windows: &[&TrafficWindow], labels: &[usize]) -> Result<f64> {
        if windows.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(windows)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / windows.len() as f64)
    }
}

/// Train a classifier on labeled windows; the vocabulary is fit on these
/// windows only.
pub fn train_classifier(
    windows: &[&TrafficWindow],
    labels: &[usize],
    classes: usize,
    cfg: &AdversaryConfig,
    seed: u64,
) -> Result<Classifier> {
    let first = windows.first().ok_or_else(|| Error::Data("no windows to train the adversary on".into()))?;
    let owned: Vec<TrafficWindow> = windows.iter().map(|w| (*w).clone()).collect();
    let vocab = AdversaryVocab::fit(&owned, cfg.min_count);
    let mut clf = Classifier::new(vocab, classes, first.packets.len(), cfg, seed::derive(seed, "adversary.params"))?;
    let mut opt = nn::adam(clf.params.vars(), cfg.learning_rate)?;
    let mut rng = seed::rng(seed::derive(seed, "adversary.train"));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&TrafficWindow> = idx.iter().map(|&i| windows[i]).collect();
            let y: Vec<u32> = idx.iter().map(|&i| labels[i] as u32).collect();
            let loss = nn::cross_entropy(&clf.logits(&batch)?, &nn::u32_tensor(&y, &[y.len()])?)?;
            opt.backward_step(&loss)?;
            sum += nn::scalar(&loss)? * idx.len() as f64;
            n += idx.len();
        }
        clf.loss_curve.push(sum / n as f64);
    }
    Ok(clf)
}

/// Downsample the larger set so both have `min(real, fake)` windows.
fn balance<'a, R: Rng + ?Sized>(
    real: &'a [TrafficWindow],
    fake: &'a [TrafficWindow],
    rng: &mut R,
) -> (Vec<&'a TrafficWindow>, Vec<&'a TrafficWindow>) {
    let n = real.len().min(fake.len());
    let mut pick = |set: &'a [TrafficWindow]| {
        let mut idx = rand::seq::index::sample(rng, set.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &set[i]).collect::<Vec<_>>()
    };
    let r = pick(real);
    let f = pick(fake);
    if real.len() != fake.len() {
        info!(real = real.len(), fake = fake.len(), kept = n, "downsampled to equal classes");
    }
    (r, f)
}

/// Real-vs-fake classifier on a balanced set.
pub fn train_realfake(
    real: &[TrafficWindow],
    fake: &[TrafficWindow],
    cfg: &AdversaryConfig,
    seed: u64,
) -> Result<Classifier> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Data("real-vs-fake training needs both classes".into()));
    }
    let mut rng = seed::rng(seed::derive(seed, "adversary.balance"));
    let (r, f) = balance(real, fake, &mut rng);
    let labels: Vec<usize> = std::iter::repeat_n(0, r.len()).chain(std::iter::repeat_n(1, f.len())).collect();
    let windows: Vec<&TrafficWindow> = r.into_iter().chain(f).collect();
    train_classifier(&windows, &labels, 2, cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub device_id: String,
    pub method: String,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub config: AdversaryConfig,
}

/// Element `i` goes to the test side when `i % k == j`.
fn fold_split<'a>(set: &[&'a TrafficWindow], k: usize, j: usize) -> (Vec<&'a TrafficWindow>, Vec<&'a TrafficWindow>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, w) in set.iter().enumerate() {
        if i % k == j {
            test.push(*w)
        } else {
            train.push(*w)
        }
    }
    (train, test)
}

/// Stratified k-fold real-vs-fake accuracy on a balanced set.
pub fn cross_validate(
    device_id: &str,
    method: &str,
    real: &[TrafficWindow],
    fake: &[TrafficWindow],
    cfg: &AdversaryConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    let k = cfg.folds;
    if k < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if real.len().min(fake.len()) < k {
        return Err(Error::Data(format!(
            "need at least {k} windows per class, got {} real and {} fake",
            real.len(),
            fake.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "cv.split"));
    let (mut r, mut f) = balance(real, fake, &mut rng);
    r.shuffle(&mut rng);
    f.shuffle(&mut rng);
    let mut folds = Vec::with_capacity(k);
    for j in 0..k {
        let (r_train, r_test) = fold_split(&r, k, j);
        let (f_train, f_test) = fold_split(&f, k, j);
        let labels = |a: usize, b: usize| -> Vec<usize> {
            std::iter::repeat_n(0, a).chain(std::iter::repeat_n(1, b)).collect()
        };
        let train_labels = labels(r_train.len(), f_train.len());
        let test_labels = labels(r_test.len(), f_test.len());
        let train: Vec<&TrafficWindow> = r_train.into_iter().chain(f_train).collect();
        let test: Vec<&TrafficWindow> = r_test.into_iter().chain(f_test).collect();
        let clf = train_classifier(&train, &train_labels, 2, cfg, seed::derive(seed, &format!("cv.fold{j}")))?;
        let acc = clf.accuracy(&test, &test_labels)?;
        debug!(device_id, method, fold = j, acc, "fold done");
        folds.push(acc);
    }
    let mean = folds.iter().sum::<f64>() / folds.len() as f64;
    Ok(EvaluationReport {
        device_id: device_id.to_string(),
        method: method.to_string(),
        fold_accuracies: folds,
        mean_accuracy: mean,
        real_count: r.len(),
        fake_count: f.len(),
        config: cfg.clone(),
    })
}

/// Real windows split in two random halves, one relabeled as fake.
pub fn null_experiment(device_id: &str, real: &[TrafficWindow], cfg: &AdversaryConfig, seed: u64) -> Result<EvaluationReport> {
    let mut idx: Vec<usize> = (0..real.len()).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, "null.split")));
    let half = real.len() / 2;
    let a: Vec<TrafficWindow> = idx[..half].iter().map(|&i| real[i].clone()).collect();
    let b: Vec<TrafficWindow> = idx[half..].iter().map(|&i| real[i].clone()).collect();
    cross_validate(device_id, "null", &a, &b, cfg, seed)
}

/// Baseline generator drawing every field uniformly: lengths and durations
/// over the real ranges, directions by coin flip, protocol configurations
/// among those observed and ports over the whole range.
pub fn uniform_baseline(real: &[TrafficWindow], m: usize, seed: u64) -> Result<Vec<TrafficWindow>> {
    let packets: Vec<&PacketRecord> = real.iter().flat_map(|w| &w.packets).collect();
    let first = real.first().ok_or_else(|| Error::Data("no real windows to size the baseline".into()))?;
    let l = first.packets.len();
    let min_len = packets.iter().map(|p| p.frame_length).min().unwrap_or(60);
    let max_len = packets.iter().map(|p| p.frame_length).max().unwrap_or(1500);
    let max_dur = packets.iter().map(|p| p.duration).fold(0.0, f64::max);
    let mut configs: Vec<ProtocolFlags> = packets.iter().map(|p| p.protocol_flags).collect();
    configs.sort_by_key(|f| f.bits());
    configs.dedup();
    let mut rng = seed::rng(seed);
    Ok((0..m)
        .map(|i| TrafficWindow {
            device_id: first.device_id.clone(),
            capture_id: "uniform".into(),
            start_offset: i,
            packets: (0..l)
                .map(|_| {
                    let flags = configs[rng.random_range(0..configs.len())];
                    let transport = flags.has_transport();
                    PacketRecord {
                        frame_length: rng.random_range(min_len..=max_len),
                        direction: Direction::from_index(rng.random_range(0..2)),
                        duration: if max_dur > 0.0 { rng.random_range(0.0..=max_dur) } else { 0.0 },
                        src_port: transport.then(|| rng.random_range(1..=65535)),
                        dst_port: transport.then(|| rng.random_range(1..=65535)),
                        protocol_flags: flags,
                        capture_id: "uniform".into(),
                        device_id: first.device_id.clone(),
                    }
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceClassifierReport {
    pub devices: Vec<String>,
    pub per_device_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
}

/// Multi-class device-type classifier with a stratified 80/20 hold-out.
pub fn train_device_classifier(
    corpora: &[(String, Vec<TrafficWindow>)],
    cfg: &AdversaryConfig,
    seed: u64,
) -> Result<(Classifier, DeviceClassifierReport)> {
    if corpora.len() < 2 {
        return Err(Error::Data("device classification needs at least 2 device labels".into()));
    }
    let mut rng = seed::rng(seed::derive(seed, "device.split"));
    let (mut train, mut train_y, mut test, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, (_, windows)) in corpora.iter().enumerate() {
        if windows.len() < 2 {
            return Err(Error::Data("every device needs at least 2 windows".into()));
        }
        let mut idx: Vec<usize> = (0..windows.len()).collect();
        idx.shuffle(&mut rng);
        let cut = (windows.len() / 5).max(1);
        for (pos, &i) in idx.iter().enumerate() {
            if pos < cut {
                test.push(&windows[i]);
                test_y.push(label);
            } else {
                train.push(&windows[i]);
                train_y.push(label);
            }
        }
    }
    let clf = train_classifier(&train, &train_y, corpora.len(), cfg, seed)?;
    let pred = clf.predict(&test)?;
    let mut hits = vec![0usize; corpora.len()];
    let mut totals = vec![0usize; corpora.len()];
    for (p, &y) in pred.iter().zip(&test_y) {
        totals[y] += 1;
        hits[y] += usize::from(*p == y);
    }
    let report = DeviceClassifierReport {
        devices: corpora.iter().map(|(d, _)| d.clone()).collect(),
        per_device_accuracy: hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect(),
        overall_accuracy: hits.iter().sum::<usize>() as f64 / test.len() as f64,
    };
    Ok((clf, report))
}

pub fn reports_csv(reports: &[EvaluationReport]) -> String {
    let folds = reports.iter().map(|r| r.fold_accuracies.len()).max().unwrap_or(0);
    let mut out = String::from("device,method");
    for j in 1..=folds {
        let _ = write!(out, ",fold_{j}");
    }
    out.push_str(",mean_accuracy,real_count,fake_count\n");
    for r in reports {
        let _ = write!(out, "{},{}", r.device_id, r.method);
        for j in 0..folds {
            match r.fold_accuracies.get(j) {
                Some(a) => {
                    let _ = write!(out, ",{a:.4}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{:.4},{},{}", r.mean_accuracy, r.real_count, r.fake_count);
    }
    out
}

/// Device rows against one column per method, accuracies in percent.
pub fn render_table(reports: &[EvaluationReport]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut devices: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !devices.contains(&r.device_id.as_str()) {
            devices.push(&r.device_id);
        }
    }
    let width = devices.iter().map(|d| d.len()).max().unwrap_or(6).max(6);
    let cols: Vec<usize> = methods.iter().map(|m| m.len().max(7)).collect();
    let mut out = format!("{:<width$}", "Device");
    for (m, w) in methods.iter().zip(&cols) {
        let _ = write!(out, " | {m:>w$}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(out.trim_end().len()));
    for d in &devices {
        let _ = write!(out, "{d:<width$}");
        for (m, w) in methods.iter().zip(&cols) {
            let cell = reports
                .iter()
                .find(|r| r.device_id == *d && r.method == *m)
                .map_or("-".to_string(), |r| format!("{:.1}%", 100.0 * r.mean_accuracy));
            let _ = write!(out, " | {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

pub fn write_reports(dir: &Path, reports: &[EvaluationReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p.display().to_string(), e))
    };
    write("report.csv", reports_csv(reports))?;
    write("report.txt", render_table(reports))?;
    crate::jsonl::write_json(&dir.join("report.json"), &reports)
}
