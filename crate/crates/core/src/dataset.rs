//! Log-mel chunks for every clip of a manifest, cached as `f32`, plus the
//! per-band normalization applied before patching.

use std::path::Path;

use diffcore::rng::Rng;
use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::config::FeatureConfig;
use crate::encoder::EncoderConfig;
use crate::error::{AsdError, Result};
use crate::features::{chunk, patchify, spec_augment, FeatureMap, MelExtractor, SpecAugPolicy, Waveform};
use crate::synthdata::{generate_corpus, read_manifest, CorpusConfig, ManifestEntry};

/// One `frames x bands` log-mel chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub frames: usize,
    pub bands: usize,
    pub data: Vec<f32>,
}

impl Grid {
    fn from_map(m: &FeatureMap) -> Self {
        Self {
            frames: m.frames,
            bands: m.bands,
            data: m.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Manifest entries with their feature chunks, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Vec<ManifestEntry>,
    pub features: Vec<Vec<Grid>>,
}

impl Dataset {
    pub fn from_waveforms(manifest: Vec<ManifestEntry>, waves: &[Waveform], fc: &FeatureConfig) -> Result<Self> {
        if manifest.len() != waves.len() {
            return Err(AsdError::Data(format!(
                "{} manifest entries but {} waveforms",
                manifest.len(),
                waves.len()
            )));
        }
        let ex = MelExtractor::new(fc.mel)?;
        let mut features = Vec::with_capacity(waves.len());
        for (e, w) in manifest.iter().zip(waves) {
            if w.sample_rate != fc.mel.sample_rate {
                return Err(AsdError::Data(format!(
                    "{}: sample rate {} differs from the feature rate {}",
                    e.clip_id, w.sample_rate, fc.mel.sample_rate
                )));
            }
            let chunks = chunk(w, fc.chunk_seconds)?
                .iter()
                .map(|c| ex.logmel(c).map(|m| Grid::from_map(&m)))
                .collect::<Result<Vec<_>>>()?;
            features.push(chunks);
        }
        Ok(Self { manifest, features })
    }

    /// Reads `manifest.jsonl` and the referenced audio under `dir`.
    pub fn load(dir: &Path, fc: &FeatureConfig) -> Result<Self> {
        let path = dir.join("manifest.jsonl");
        if !path.exists() {
            return Err(AsdError::MissingArtifact(path));
        }
        let manifest = read_manifest(&path)?;
        let waves = manifest
            .iter()
            .map(|e| read_wav(&dir.join(e.audio_path())))
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(manifest, &waves, fc)
    }

    /// Synthesizes the corpus in memory, skipping the audio files.
    pub fn generate(cfg: &CorpusConfig, seed: u64, fc: &FeatureConfig) -> Result<Self> {
        let corpus = generate_corpus(cfg, seed)?;
        Self::from_waveforms(corpus.manifest, &corpus.clips, fc)
    }

    pub fn position(&self, clip_id: &str) -> Option<usize> {
        self.manifest.iter().position(|e| e.clip_id == clip_id)
    }

    /// Copy restricted to entries accepted by `keep`.
    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        let (manifest, features) = self
            .manifest
            .iter()
            .zip(&self.features)
            .filter(|(e, _)| keep(e))
            .map(|(e, f)| (e.clone(), f.clone()))
            .unzip();
        Self { manifest, features }
    }
}

const STD_FLOOR: f64 = 1e-3;

/// Per-band mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for g in grids {
            if sum.is_empty() {
                sum = vec![0.0; g.bands];
                sq = vec![0.0; g.bands];
            } else if g.bands != sum.len() {
                return Err(AsdError::Data(format!("band count {} differs from {}", g.bands, sum.len())));
            }
            for row in g.data.chunks(g.bands) {
                for (b, &v) in row.iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            n += g.frames;
        }
        if n == 0 {
            return Err(AsdError::Data("no frames to fit feature statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    fn normalize(&self, g: &Grid) -> Result<FeatureMap> {
        if g.bands != self.mean.len() {
            return Err(AsdError::Data(format!(
                "grid has {} bands, statistics have {}",
                g.bands,
                self.mean.len()
            )));
        }
        let data = g
            .data
            .chunks(g.bands)
            .flat_map(|row| row.iter().enumerate().map(|(b, &v)| (v as f64 - self.mean[b]) / self.std[b]))
            .collect();
        Ok(FeatureMap {
            frames: g.frames,
            bands: g.bands,
            data,
            frame_length_ms: 0.0,
            hop_ms: 0.0,
        })
    }
}

/// Normalized, optionally augmented `[L, patch_t * patch_f]` patch sequence.
pub fn patch_tensor(
    grid: &Grid,
    norm: &NormStats,
    enc: &EncoderConfig,
    aug: Option<(&SpecAugPolicy, &mut Rng)>,
) -> Result<Tensor<f32>> {
    let mut m = norm.normalize(grid)?;
    if let Some((policy, rng)) = aug {
        m = spec_augment(&m, policy, rng);
    }
    let patches = patchify(&m, enc.patch_t, enc.patch_f)?;
    let flat: Vec<f32> = patches.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::new(&[patches.len(), enc.patch_dim()], flat)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_statistics() {
        let g = Grid {
            frames: 2,
            bands: 2,
            data: vec![1.0, 10.0, 3.0, 10.0],
        };
        let s = NormStats::fit([&g]).unwrap();
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std, vec![1.0, STD_FLOOR]);
        let m = s.normalize(&g).unwrap();
        assert_eq!(m.data, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn patch_tensor_shape() {
        let g = Grid {
            frames: 8,
            bands: 6,
            data: vec![0.5; 48],
        };
        let enc = EncoderConfig {
            patch_t: 4,
            patch_f: 3,
            ..EncoderConfig::default()
        };
        let t = patch_tensor(&g, &NormStats::identity(6), &enc, None).unwrap();
        assert_eq!(t.shape(), &[4, 12]);
    }
}
