//! Waveform chunking, log-mel extraction, SpecAug and patch sequences.

use std::sync::Arc;

use diffcore::rng::Rng;
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AsdError::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AsdError::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Splits into consecutive chunks of `seconds`; the last one is zero-padded.
pub fn chunk(w: &Waveform, seconds: f64) -> Result<Vec<Waveform>> {
    if w.is_empty() {
        return Err(AsdError::Data("cannot chunk an empty waveform".into()));
    }
    let size = (seconds * w.sample_rate as f64).round() as usize;
    if size == 0 {
        return Err(AsdError::Config(format!("chunk length {seconds}s is shorter than one sample")));
    }
    Ok(w.samples
        .chunks(size)
        .map(|c| {
            let mut samples = c.to_vec();
            samples.resize(size, 0.0);
            Waveform {
                samples,
                sample_rate: w.sample_rate,
            }
        })
        .collect())
}

/// A `frames x bands` grid, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<f64>,
    pub frame_length_ms: f64,
    pub hop_ms: f64,
}

impl FeatureMap {
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bands + f]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bands..(t + 1) * self.bands]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_length_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    /// Upper filterbank edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 128,
            frame_length_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 1024,
            f_max: None,
        }
    }
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn upper_edge(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Frame count for a signal of `len` samples (no centering).
    pub fn num_frames(&self, len: usize) -> usize {
        let win = self.win_samples();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop_samples()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filterbank: `n_mels` rows over `n_fft / 2 + 1` bins.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(cfg.upper_edge()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Center frequency of mel band `b` in Hz.
pub fn band_center(cfg: &MelConfig, b: usize) -> f64 {
    let hi = hz_to_mel(cfg.upper_edge());
    mel_to_hz(hi * (b + 1) as f64 / (cfg.n_mels + 1) as f64)
}

pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// Sparse filters: first nonzero bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        let win = cfg.win_samples();
        if cfg.sample_rate == 0 || cfg.n_mels == 0 || cfg.hop_samples() == 0 || win < 2 {
            return Err(AsdError::Config(format!("invalid mel config {cfg:?}")));
        }
        if cfg.n_fft < win {
            return Err(AsdError::Config(format!(
                "n_fft {} is shorter than the {win}-sample window",
                cfg.n_fft
            )));
        }
        if (cfg.sample_rate as f64) < 2.0 * cfg.upper_edge() {
            return Err(AsdError::Config(format!(
                "sample rate {} is below twice the mel upper edge {}",
                cfg.sample_rate,
                cfg.upper_edge()
            )));
        }
        let window = (0..win)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos())
            .collect();
        let filters = mel_filterbank(&cfg)
            .into_iter()
            .map(|row| {
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, row[start..end].to_vec())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn logmel(&self, w: &Waveform) -> Result<FeatureMap> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(AsdError::Data(format!(
                "waveform at {} Hz, extractor expects {} Hz",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = self.cfg.num_frames(w.len());
        if frames == 0 {
            return Err(AsdError::Data(format!(
                "{} samples is shorter than one {}-sample window",
                w.len(),
                self.window.len()
            )));
        }
        let hop = self.cfg.hop_samples();
        let bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        let mut data = Vec::with_capacity(frames * self.cfg.n_mels);
        for t in 0..frames {
            let seg = &w.samples[t * hop..t * hop + self.window.len()];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, (&s, &h)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                b.re = s * h;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (start, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
                data.push(e.max(LOG_FLOOR).ln());
            }
        }
        Ok(FeatureMap {
            frames,
            bands: self.cfg.n_mels,
            data,
            frame_length_ms: self.cfg.frame_length_ms,
            hop_ms: self.cfg.hop_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugPolicy {
    pub enabled: bool,
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    pub warp_max: usize,
    pub num_time_masks: usize,
    pub num_freq_masks: usize,
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            time_mask_max: 20,
            freq_mask_max: 16,
            warp_max: 2,
            num_time_masks: 2,
            num_freq_masks: 2,
        }
    }
}

impl SpecAugPolicy {
    pub fn identity() -> Self {
        Self {
            enabled: false,
            time_mask_max: 0,
            freq_mask_max: 0,
            warp_max: 0,
            num_time_masks: 0,
            num_freq_masks: 0,
        }
    }

    pub fn validate(&self, frames: usize, bands: usize) -> Result<()> {
        if self.time_mask_max >= frames || self.freq_mask_max >= bands || self.warp_max >= bands {
            return Err(AsdError::Config(format!(
                "SpecAug maxima {self:?} must be below the {frames}x{bands} grid"
            )));
        }
        Ok(())
    }
}

/// Band warp, then time masks, then frequency masks. Masked cells take the
/// mean of the warped map. Maxima beyond the grid are clipped to fit.
pub fn spec_augment(f: &FeatureMap, policy: &SpecAugPolicy, rng: &mut Rng) -> FeatureMap {
    let mut out = f.clone();
    if !policy.enabled {
        return out;
    }
    let (nt, nf) = (f.frames, f.bands);
    let warp = policy.warp_max.min(nf.saturating_sub(1));
    if warp > 0 {
        // Rotate a block of warp+1 adjacent bands by a random offset, so every
        // band moves by at most `warp` positions.
        let width = warp + 1;
        let start = rng.random_range(0..=nf - width);
        let shift = rng.random_range(1..width);
        for t in 0..nt {
            out.data[t * nf + start..t * nf + start + width].rotate_left(shift);
        }
    }
    let fill = out.mean();
    for _ in 0..policy.num_time_masks {
        let max = policy.time_mask_max.min(nt.saturating_sub(1));
        let width = rng.random_range(0..=max);
        let start = rng.random_range(0..=nt - width);
        mask_time(&mut out, start, width, fill);
    }
    for _ in 0..policy.num_freq_masks {
        let max = policy.freq_mask_max.min(nf.saturating_sub(1));
        let width = rng.random_range(0..=max);
        let start = rng.random_range(0..=nf - width);
        mask_freq(&mut out, start, width, fill);
    }
    out
}

pub fn mask_time(f: &mut FeatureMap, start: usize, width: usize, fill: f64) {
    let nf = f.bands;
    f.data[start * nf..(start + width) * nf].fill(fill);
}

pub fn mask_freq(f: &mut FeatureMap, start: usize, width: usize, fill: f64) {
    let nf = f.bands;
    for row in f.data.chunks_mut(nf) {
        row[start..start + width].fill(fill);
    }
}

/// Non-overlapping `patch_t x patch_f` patches in time-major order, each
/// flattened row-major. Trailing partial patches are dropped.
pub fn patchify(f: &FeatureMap, patch_t: usize, patch_f: usize) -> Result<Vec<Vec<f64>>> {
    if patch_t == 0 || patch_f == 0 || patch_t > f.frames || patch_f > f.bands {
        return Err(AsdError::Config(format!(
            "patch {patch_t}x{patch_f} does not fit a {}x{} grid",
            f.frames, f.bands
        )));
    }
    let (pt, pf) = (f.frames / patch_t, f.bands / patch_f);
    let mut out = Vec::with_capacity(pt * pf);
    for i in 0..pt {
        for j in 0..pf {
            let mut v = Vec::with_capacity(patch_t * patch_f);
            for t in i * patch_t..(i + 1) * patch_t {
                v.extend_from_slice(&f.frame(t)[j * patch_f..(j + 1) * patch_f]);
            }
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::rng::stream;

    fn grid(frames: usize, bands: usize) -> FeatureMap {
        FeatureMap {
            frames,
            bands,
            data: (0..frames * bands).map(|v| v as f64).collect(),
            frame_length_ms: 25.0,
            hop_ms: 10.0,
        }
    }

    fn wave(secs: f64) -> Waveform {
        let n = (secs * 16_000.0) as usize;
        Waveform::new((0..n).map(|i| (i as f64 * 0.01).sin()).collect(), 16_000).unwrap()
    }

    #[test]
    fn chunking_counts_and_padding() {
        assert_eq!(chunk(&wave(4.0), 2.0).unwrap().len(), 2);
        let c = chunk(&wave(3.0), 2.0).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].len(), 32_000);
        assert!(c[1].samples[16_000..].iter().all(|&v| v == 0.0));
        let w = wave(2.0);
        assert_eq!(chunk(&w, 2.0).unwrap(), vec![w]);
        assert!(chunk(&Waveform::new(vec![], 16_000).unwrap(), 2.0).is_err());
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.win_samples(), 400);
        assert_eq!(cfg.hop_samples(), 160);
        assert_eq!(cfg.num_frames(32_000), 1 + (32_000 - 400) / 160);
        let m = MelExtractor::new(cfg).unwrap();
        assert_eq!(m.logmel(&wave(2.0)).unwrap().frames, 198);
        assert!(m.logmel(&Waveform::new(vec![0.0; 399], 16_000).unwrap()).is_err());
    }

    #[test]
    fn silence_hits_the_floor() {
        let m = MelExtractor::new(MelConfig::default()).unwrap();
        let f = m.logmel(&Waveform::new(vec![0.0; 4000], 16_000).unwrap()).unwrap();
        assert!(f.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn no_empty_filters_at_default_resolution() {
        for row in mel_filterbank(&MelConfig::default()) {
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn rejects_low_sample_rate() {
        let cfg = MelConfig {
            f_max: Some(9000.0),
            ..MelConfig::default()
        };
        assert!(MelExtractor::new(cfg).is_err());
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&grid(8, 8), 4, 4).unwrap().len(), 4);
        assert_eq!(patchify(&grid(10, 8), 4, 4).unwrap().len(), 4);
        let g = grid(4, 4);
        assert_eq!(patchify(&g, 4, 4).unwrap(), vec![g.data.clone()]);
        assert!(patchify(&g, 5, 4).is_err());
    }

    #[test]
    fn patch_order_is_time_major() {
        let p = patchify(&grid(4, 4), 2, 2).unwrap();
        assert_eq!(p[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p[2], vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn disabled_policy_is_identity() {
        let g = grid(20, 16);
        let zero = SpecAugPolicy {
            enabled: true,
            ..SpecAugPolicy::identity()
        };
        assert_eq!(spec_augment(&g, &zero, &mut stream(1, "t")), g);
        assert_eq!(spec_augment(&g, &SpecAugPolicy::default(), &mut stream(1, "t")).frames, 20);
        let off = SpecAugPolicy {
            enabled: false,
            ..SpecAugPolicy::default()
        };
        assert_eq!(spec_augment(&g, &off, &mut stream(1, "t")), g);
    }

    #[test]
    fn single_time_mask_covers_three_frames() {
        let mut g = grid(10, 6);
        let fill = g.mean();
        mask_time(&mut g, 4, 3, fill);
        let masked: Vec<usize> = (0..10)
            .filter(|&t| g.frame(t).iter().all(|&v| v == fill))
            .collect();
        assert_eq!(masked, vec![4, 5, 6]);
    }
}
