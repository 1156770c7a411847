//! Deterministic synthetic machine-sound corpus with DCASE-like structure.
//!
//! Each machine is a harmonic source with an amplitude/frequency modulation
//! pattern selected by its attribute and a pitch offset selected by its id.
//! The target domain shifts pitch and raises the noise floor. Anomalies add a
//! band-limited noise burst, detune odd harmonics, or drop the amplitude.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use diffcore::rng::{stream, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::write_wav_pcm16;
use crate::error::{AsdError, Result};
use crate::features::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Normal,
    Anomalous,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Burst,
    Detune,
    Dropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: String,
    pub attribute: Option<String>,
    pub domain: Domain,
    pub split: Split,
    pub truth: Truth,
    pub seed: u64,
    /// Attribute retained after masking, for purity evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_truth: Option<String>,
}

impl ManifestEntry {
    pub fn audio_path(&self) -> String {
        format!("audio/{}.wav", self.clip_id)
    }

    /// The attribute before any masking.
    pub fn true_attribute(&self) -> Option<&str> {
        self.attribute_truth.as_deref().or(self.attribute.as_deref())
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| AsdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| AsdError::io(path, e))?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| AsdError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AsdError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| AsdError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub name: String,
    pub fundamental: f64,
    /// Relative amplitude of harmonics 1, 2, ...
    pub harmonics: Vec<f64>,
    /// Amplitude-modulation rate (Hz) per attribute value.
    pub am_rates: Vec<f64>,
    /// Frequency-modulation rate (Hz) per attribute value.
    pub fm_rates: Vec<f64>,
    pub am_depth: f64,
    /// Peak frequency deviation as a fraction of each partial.
    pub fm_depth: f64,
    /// Pitch ratio per machine id.
    pub id_ratios: Vec<f64>,
    pub noise_level: f64,
    /// Per-clip noise level factor, log-uniform in `[1/spread, spread]`.
    #[serde(default = "unit")]
    pub noise_spread: f64,
    /// One-pole low-pass coefficient for the background noise, in [0, 1).
    pub noise_color: f64,
    /// Per-clip offset of the low-pass coefficient, uniform in `+-spread`.
    #[serde(default)]
    pub color_spread: f64,
    /// Standard deviation of the per-clip log gain of each harmonic.
    #[serde(default)]
    pub timbre_jitter: f64,
    /// Level, relative to the machine RMS, of unrelated steady tones at
    /// random frequencies added to every clip.
    #[serde(default)]
    pub interference: f64,
    pub target_pitch_shift: f64,
    pub target_noise_gain: f64,
    /// Band of the anomalous noise burst, Hz.
    pub burst_band: (f64, f64),
    /// Held-out types are excluded from encoder training in unseen mode.
    #[serde(default)]
    pub held_out: bool,
}

impl MachineSpec {
    pub fn attributes(&self) -> usize {
        self.am_rates.len()
    }

    pub fn validate(&self, sample_rate: u32, severity: &Severity) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let bad = |msg: String| Err(AsdError::Config(format!("machine {}: {msg}", self.name)));
        if self.harmonics.is_empty() || self.id_ratios.is_empty() || self.am_rates.is_empty() {
            return bad("needs harmonics, ids and attributes".into());
        }
        if self.am_rates.len() != self.fm_rates.len() {
            return bad("am_rates and fm_rates differ in length".into());
        }
        let max_ratio = self.id_ratios.iter().cloned().fold(0.0, f64::max);
        let top = self.fundamental
            * self.harmonics.len() as f64
            * max_ratio
            * (1.0 + self.target_pitch_shift.abs())
            * (1.0 + severity.detune + 0.02)
            * (1.0 + self.fm_depth);
        if top >= nyquist {
            return bad(format!("highest partial {top:.1} Hz reaches Nyquist {nyquist} Hz"));
        }
        let (lo, hi) = self.burst_band;
        if !(0.0..hi).contains(&lo) || hi >= nyquist {
            return bad(format!("burst band {lo}..{hi} Hz must lie below Nyquist {nyquist} Hz"));
        }
        Ok(())
    }
}

/// Strength of the injected faults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Severity {
    /// Burst RMS relative to the clean clip RMS.
    pub burst: f64,
    /// Fractional frequency offset applied to odd harmonics.
    pub detune: f64,
    /// Amplitude multiplier inside dropout segments.
    pub dropout: f64,
}

impl Default for Severity {
    fn default() -> Self {
        Self {
            burst: 1.5,
            detune: 0.15,
            dropout: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub train_per_machine: usize,
    pub test_per_machine: usize,
    pub target_fraction: f64,
    pub severity: Severity,
    pub machines: Vec<MachineSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            clip_seconds: 4.0,
            train_per_machine: 80,
            test_per_machine: 40,
            target_fraction: 0.1,
            severity: Severity::default(),
            machines: default_machines(),
        }
    }
}

fn machine(
    name: &str,
    fundamental: f64,
    harmonics: &[f64],
    am: [f64; 2],
    fm: [f64; 2],
    burst_band: (f64, f64),
    held_out: bool,
) -> MachineSpec {
    MachineSpec {
        name: name.into(),
        fundamental,
        harmonics: harmonics.to_vec(),
        am_rates: am.to_vec(),
        fm_rates: fm.to_vec(),
        am_depth: 0.4,
        fm_depth: 0.01,
        id_ratios: vec![1.0, 1.15],
        noise_level: 0.05,
        noise_spread: NOISE_SPREAD,
        noise_color: 0.6,
        color_spread: COLOR_SPREAD,
        timbre_jitter: TIMBRE_JITTER,
        interference: INTERFERENCE,
        target_pitch_shift: 0.0,
        target_noise_gain: 2.0,
        burst_band,
        held_out,
    }
}

fn unit() -> f64 {
    1.0
}

const NOISE_SPREAD: f64 = 1.25;
const COLOR_SPREAD: f64 = 0.0;
const TIMBRE_JITTER: f64 = 0.3;
const INTERFERENCE: f64 = 0.3;

/// Four seen types plus two held-out types.
pub fn default_machines() -> Vec<MachineSpec> {
    vec![
        machine("fan", 90.0, &[1.0, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2], [2.0, 5.0], [0.5, 1.5], (2000.0, 3000.0), false),
        machine("pump", 140.0, &[1.0, 0.3, 0.6, 0.2, 0.4, 0.1], [1.0, 3.5], [0.7, 2.0], (3000.0, 4200.0), false),
        machine("slider", 220.0, &[1.0, 0.5, 0.25, 0.12, 0.06], [4.0, 8.0], [1.0, 0.3], (1200.0, 2000.0), false),
        machine("valve", 330.0, &[0.6, 1.0, 0.4, 0.3, 0.15], [6.0, 11.0], [2.5, 0.8], (4500.0, 6000.0), false),
        machine("bearing", 180.0, &[1.0, 0.2, 0.5, 0.15, 0.3, 0.1, 0.05], [3.0, 7.0], [1.2, 0.4], (2500.0, 3600.0), true),
        machine("toycar", 260.0, &[1.0, 0.8, 0.3, 0.4, 0.1, 0.05], [1.5, 9.0], [0.6, 1.8], (1600.0, 2600.0), true),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub id_index: usize,
    pub attribute: usize,
    pub domain: Domain,
    pub anomaly: Option<AnomalyKind>,
    pub seed: u64,
}

/// Renders one clip. Pure in its arguments.
pub fn synthesize(spec: &MachineSpec, p: &ClipParams, sample_rate: u32, seconds: f64, sev: &Severity) -> Waveform {
    let mut rng = stream(p.seed, "clip");
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let jitter = 1.0 + rng.random_range(-0.01..0.01);
    let mut f0 = spec.fundamental * spec.id_ratios[p.id_index % spec.id_ratios.len()] * jitter;
    let ln_spread = spec.noise_spread.max(1.0).ln();
    let mut noise_level = spec.noise_level * rng.random_range(-ln_spread..=ln_spread).exp();
    let color = (spec.noise_color + rng.random_range(-1.0..=1.0) * spec.color_spread).clamp(0.0, 0.95);
    if p.domain == Domain::Target {
        f0 *= 1.0 + spec.target_pitch_shift;
        noise_level *= spec.target_noise_gain;
    }
    let attr = p.attribute % spec.attributes();
    let (am, fm) = (spec.am_rates[attr], spec.fm_rates[attr]);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let fm_phase = rng.random_range(0.0..2.0 * PI);
    let detune = matches!(p.anomaly, Some(AnomalyKind::Detune));

    let mut clean = vec![0.0; n];
    for (h, &amp) in spec.harmonics.iter().enumerate() {
        let order = (h + 1) as f64;
        let shift = if detune && h % 2 == 0 && h > 0 { 1.0 + sev.detune } else { 1.0 };
        let freq = order * f0 * shift;
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let z: f64 = StandardNormal.sample(&mut rng);
        let amp = amp * (spec.timbre_jitter * z).exp();
        // Integrated phase of f(t) = freq * (1 + fm_depth * sin(2 pi fm t + phi)).
        let dev = if fm > 0.0 { freq * spec.fm_depth / fm } else { 0.0 };
        for (i, c) in clean.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let ph = 2.0 * PI * freq * t - dev * ((2.0 * PI * fm * t + fm_phase).cos() - fm_phase.cos());
            *c += amp * (ph + phase0).sin();
        }
    }
    for (i, c) in clean.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *c *= 1.0 + spec.am_depth * (2.0 * PI * am * t + am_phase).sin();
    }
    let rms = (clean.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();

    let mut lp = 0.0;
    for c in clean.iter_mut() {
        let white: f64 = StandardNormal.sample(&mut rng);
        lp = color * lp + (1.0 - color) * white;
        *c += noise_level * rms * lp / (1.0 - color).max(1e-3).sqrt() * 2.0;
    }

    if spec.interference > 0.0 {
        add_interference(&mut clean, spec.interference * rms, sr, &mut stream(p.seed, "interference"));
    }

    match p.anomaly {
        Some(AnomalyKind::Burst) => add_burst(&mut clean, spec.burst_band, sev.burst * rms, sr, &mut rng),
        Some(AnomalyKind::Dropout) => apply_dropout(&mut clean, sev.dropout, sr, &mut rng),
        _ => {}
    }

    let gain = rng.random_range(0.25..0.45);
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let scale = gain / peak.max(rms * 3.0);
    Waveform {
        samples: clean.into_iter().map(|v| v * scale).collect(),
        sample_rate,
    }
}

/// Band-limited noise as a sum of random-phase partials inside `band`, over a
/// random 1.5 to 3 second segment with raised-cosine edges.
fn add_burst(x: &mut [f64], band: (f64, f64), target_rms: f64, sr: f64, rng: &mut Rng) {
    let n = x.len();
    let len = ((rng.random_range(1.5..3.0) * sr) as usize).min(n);
    let start = rng.random_range(0..=n - len);
    let comps = 48;
    let partials: Vec<(f64, f64)> = (0..comps)
        .map(|_| (rng.random_range(band.0..band.1), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let amp = target_rms * (2.0 / comps as f64).sqrt();
    let ramp = (0.02 * sr) as usize;
    for i in 0..len {
        let t = (start + i) as f64 / sr;
        let edge = if i < ramp {
            0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
        } else if len - i <= ramp {
            0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let s: f64 = partials.iter().map(|&(f, ph)| (2.0 * PI * f * t + ph).sin()).sum();
        x[start + i] += edge * amp * s;
    }
}

/// Three steady tones, log-uniform in 150 Hz to 0.45 sr.
fn add_interference(x: &mut [f64], level: f64, sr: f64, rng: &mut Rng) {
    for _ in 0..3 {
        let f = rng.random_range(150f64.ln()..(0.45 * sr).ln()).exp();
        let a = level * rng.random_range(0.5..1.0) * std::f64::consts::SQRT_2;
        let ph = rng.random_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / sr + ph).sin();
        }
    }
}

/// Three to five 150-400 ms segments scaled by `level`.
fn apply_dropout(x: &mut [f64], level: f64, sr: f64, rng: &mut Rng) {
    let n = x.len();
    let count = rng.random_range(3..=5);
    for _ in 0..count {
        let len = ((rng.random_range(0.15..0.4) * sr) as usize).min(n);
        let start = rng.random_range(0..=n - len);
        x[start..start + len].iter_mut().for_each(|v| *v *= level);
    }
}

pub struct Corpus {
    pub manifest: Vec<ManifestEntry>,
    pub clips: Vec<Waveform>,
}

struct Plan {
    id: usize,
    attribute: usize,
    domain: Domain,
    truth: Truth,
}

fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    stream(seed, clip_id).random()
}

/// Builds the manifest without rendering audio.
pub fn plan_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<ManifestEntry>> {
    if cfg.train_per_machine == 0 || cfg.test_per_machine < 2 {
        return Err(AsdError::Config("need at least 1 train and 2 test clips per machine".into()));
    }
    if cfg.machines.is_empty() {
        return Err(AsdError::Config("no machines configured".into()));
    }
    let mut names = BTreeSet::new();
    for m in &cfg.machines {
        m.validate(cfg.sample_rate, &cfg.severity)?;
        if !names.insert(&m.name) {
            return Err(AsdError::Config(format!("duplicate machine {}", m.name)));
        }
    }
    let mut out = Vec::new();
    for m in &cfg.machines {
        let mut rng = stream(seed, &format!("plan/{}", m.name));
        let class_of = |i: usize| (i % m.id_ratios.len(), (i / m.id_ratios.len()) % m.attributes());

        let n_target = ((cfg.train_per_machine as f64 * cfg.target_fraction).round() as usize).max(1);
        let mut train: Vec<Plan> = (0..cfg.train_per_machine)
            .map(|i| {
                let (id, attribute) = class_of(i);
                Plan {
                    id,
                    attribute,
                    domain: if i >= cfg.train_per_machine - n_target.min(cfg.train_per_machine) {
                        Domain::Target
                    } else {
                        Domain::Source
                    },
                    truth: Truth::Normal,
                }
            })
            .collect();

        let half = cfg.test_per_machine / 2;
        let mut test: Vec<Plan> = (0..cfg.test_per_machine)
            .map(|i| {
                let anomalous = i >= cfg.test_per_machine - half;
                let j = if anomalous { i - (cfg.test_per_machine - half) } else { i };
                let (id, attribute) = class_of(j / 2);
                Plan {
                    id,
                    attribute,
                    domain: if j % 2 == 0 { Domain::Source } else { Domain::Target },
                    truth: if anomalous { Truth::Anomalous } else { Truth::Normal },
                }
            })
            .collect();

        train.shuffle(&mut rng);
        test.shuffle(&mut rng);
        for (split, plans) in [(Split::Train, train), (Split::Test, test)] {
            let tag = if split == Split::Train { "train" } else { "test" };
            for (i, p) in plans.into_iter().enumerate() {
                let clip_id = format!("{}_id{:02}_{tag}_{i:04}", m.name, p.id);
                out.push(ManifestEntry {
                    seed: clip_seed(seed, &clip_id),
                    clip_id,
                    machine_type: m.name.clone(),
                    machine_id: format!("id{:02}", p.id),
                    attribute: Some(format!("att{}", p.attribute)),
                    domain: p.domain,
                    split,
                    truth: p.truth,
                    attribute_truth: None,
                });
            }
        }
    }
    Ok(out)
}

/// Anomaly kind of a test clip, drawn from its synthesis seed.
pub fn anomaly_for(entry: &ManifestEntry, seed: u64) -> Option<AnomalyKind> {
    if entry.truth != Truth::Anomalous {
        return None;
    }
    let kinds = [AnomalyKind::Burst, AnomalyKind::Detune, AnomalyKind::Dropout];
    let mut rng = stream(seed ^ entry.seed, "anomaly-kind");
    Some(kinds[rng.random_range(0..kinds.len())])
}

fn params_for(cfg: &CorpusConfig, e: &ManifestEntry, seed: u64) -> Result<(usize, ClipParams)> {
    let mi = cfg
        .machines
        .iter()
        .position(|m| m.name == e.machine_type)
        .ok_or_else(|| AsdError::Data(format!("unknown machine {}", e.machine_type)))?;
    let parse = |s: &str, prefix: &str| -> Result<usize> {
        s.strip_prefix(prefix)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| AsdError::Data(format!("cannot parse `{s}`")))
    };
    let attr = e
        .true_attribute()
        .ok_or_else(|| AsdError::Data(format!("{} has no attribute", e.clip_id)))?;
    Ok((
        mi,
        ClipParams {
            id_index: parse(&e.machine_id, "id")?,
            attribute: parse(attr, "att")?,
            domain: e.domain,
            anomaly: anomaly_for(e, seed),
            seed: e.seed,
        },
    ))
}

pub fn render_entry(cfg: &CorpusConfig, e: &ManifestEntry, seed: u64) -> Result<Waveform> {
    let (mi, p) = params_for(cfg, e, seed)?;
    Ok(synthesize(&cfg.machines[mi], &p, cfg.sample_rate, cfg.clip_seconds, &cfg.severity))
}

/// Manifest plus rendered audio, reproducible from `seed`.
pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let manifest = plan_corpus(cfg, seed)?;
    let clips = manifest
        .iter()
        .map(|e| render_entry(cfg, e, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { manifest, clips })
}

/// Writes `manifest.jsonl`, `audio/*.wav` and `corpus.json` into `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, seed: u64) -> Result<Vec<ManifestEntry>> {
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(|e| AsdError::io(&audio, e))?;
    let manifest = plan_corpus(cfg, seed)?;
    for e in &manifest {
        let w = render_entry(cfg, e, seed)?;
        write_wav_pcm16(&dir.join(e.audio_path()), &w)?;
    }
    write_manifest(&dir.join("manifest.jsonl"), &manifest)?;
    let meta = serde_json::json!({ "seed": seed, "corpus": cfg });
    let path = dir.join("corpus.json");
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| AsdError::io(&path, e))?;
    Ok(manifest)
}

/// Nulls the attribute of every train entry whose machine is in `subset`,
/// keeping the original in `attribute_truth`.
pub fn mask_attributes(manifest: &[ManifestEntry], subset: &[String]) -> Vec<ManifestEntry> {
    manifest
        .iter()
        .cloned()
        .map(|mut e| {
            if e.split == Split::Train && subset.contains(&e.machine_type) && e.attribute.is_some() {
                e.attribute_truth = e.attribute.take();
            }
            e
        })
        .collect()
}

/// Class key for the classification head.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassKey {
    pub machine_type: String,
    pub machine_id: String,
    pub attribute: String,
}

/// Distinct (type, id, attribute) triples over attributed train entries, sorted.
pub fn label_space(manifest: &[ManifestEntry]) -> Result<Vec<ClassKey>> {
    if manifest.is_empty() {
        return Err(AsdError::Data("empty manifest".into()));
    }
    let set: BTreeSet<ClassKey> = manifest
        .iter()
        .filter(|e| e.split == Split::Train)
        .filter_map(|e| {
            e.attribute.as_ref().map(|a| ClassKey {
                machine_type: e.machine_type.clone(),
                machine_id: e.machine_id.clone(),
                attribute: a.clone(),
            })
        })
        .collect();
    if set.is_empty() {
        return Err(AsdError::Data(
            "no attributed train entries; classification needs at least one labeled class".into(),
        ));
    }
    Ok(set.into_iter().collect())
}

/// Fraction of items whose cluster's majority label matches their own label.
pub fn purity<L: Ord + Clone, C: Ord + Clone>(labels: &[L], clusters: &[C]) -> f64 {
    use std::collections::BTreeMap;
    assert_eq!(labels.len(), clusters.len());
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<C, BTreeMap<L, usize>> = BTreeMap::new();
    for (l, c) in labels.iter().zip(clusters) {
        *counts.entry(c.clone()).or_default().entry(l.clone()).or_default() += 1;
    }
    let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train_per_machine: 20,
            test_per_machine: 10,
            clip_seconds: 0.5,
            machines: default_machines()[..2].to_vec(),
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn manifest_sizes_and_structure() {
        let m = plan_corpus(&small(), 3).unwrap();
        assert_eq!(m.len(), 2 * 30);
        let train: Vec<_> = m.iter().filter(|e| e.split == Split::Train).collect();
        assert!(train.iter().all(|e| e.truth == Truth::Normal));
        let target = train.iter().filter(|e| e.domain == Domain::Target).count();
        assert_eq!(target, 2 * 2);
        let anomalies = m.iter().filter(|e| e.truth == Truth::Anomalous).count();
        assert_eq!(anomalies, 10);
        assert!(m.iter().all(|e| !e.clip_id.contains("anom") && !e.clip_id.contains("normal")));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        let a = generate_corpus(&cfg, 9).unwrap();
        let b = generate_corpus(&cfg, 9).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.clips, b.clips);
        let c = generate_corpus(&cfg, 10).unwrap();
        assert_ne!(a.clips, c.clips);
        assert_eq!(a.manifest.len(), c.manifest.len());
    }

    #[test]
    fn rejects_partials_above_nyquist() {
        let mut cfg = small();
        cfg.machines[0].fundamental = 2000.0;
        assert!(plan_corpus(&cfg, 1).is_err());
        let mut cfg = small();
        cfg.machines[0].burst_band = (7000.0, 9000.0);
        assert!(plan_corpus(&cfg, 1).is_err());
    }

    #[test]
    fn label_space_counts_and_masking() {
        let m = plan_corpus(&small(), 1).unwrap();
        assert_eq!(label_space(&m).unwrap().len(), 2 * 4);
        let masked = mask_attributes(&m, &["fan".to_string()]);
        assert_eq!(label_space(&masked).unwrap().len(), 4);
        for (a, b) in m.iter().zip(&masked) {
            let hit = a.machine_type == "fan" && a.split == Split::Train;
            assert_eq!(b.attribute.is_none(), hit);
            assert_eq!(b.true_attribute(), a.attribute.as_deref());
        }
        assert_eq!(mask_attributes(&m, &[]), m);
        let all = mask_attributes(&m, &["fan".into(), "pump".into()]);
        assert!(label_space(&all).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = mask_attributes(&plan_corpus(&small(), 4).unwrap(), &["pump".into()]);
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &m).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
    }

    #[test]
    fn purity_of_known_partitions() {
        assert_eq!(purity(&[0, 0, 1, 1], &[5, 5, 7, 7]), 1.0);
        assert_eq!(purity(&[0, 1, 0, 1], &[5, 5, 5, 5]), 0.5);
    }
}
