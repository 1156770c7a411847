//! Detection stages after training: embedding, detector fitting, scoring
//! and evaluation, both in memory and as files.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{Checkpoint, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendConfig, DetectorIndex, NormalEmbedding};
use crate::config::MetricsConfig;
use crate::dataset::Dataset;
use crate::error::{AsdError, Result};
use crate::metrics::{dcase_report, EvalRecord, MetricReport};
use crate::synthdata::{ManifestEntry, Split};
use crate::train::Model;

/// Chunk embeddings per clip id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Embeddings {
    pub clips: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Embeddings {
    pub fn get(&self, clip_id: &str) -> Result<&[Vec<f64>]> {
        self.clips
            .get(clip_id)
            .map(Vec::as_slice)
            .ok_or_else(|| AsdError::Data(format!("no embedding for clip {clip_id}")))
    }

    /// Mean chunk embedding of a clip.
    pub fn clip_mean(&self, clip_id: &str) -> Result<Vec<f64>> {
        let chunks = self.get(clip_id)?;
        let mut m = vec![0.0; chunks[0].len()];
        for c in chunks {
            m.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= chunks.len() as f64);
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(DType::F32);
        for (id, chunks) in &self.clips {
            ck.push(id.clone(), Tensor::from_rows(chunks)?, false);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let clips = ck
            .entries
            .iter()
            .map(|e| {
                let (n, _) = e.tensor.dims2();
                (e.name.clone(), (0..n).map(|i| e.tensor.row_slice(i).to_vec()).collect())
            })
            .collect();
        Ok(Self { clips })
    }
}

/// Embeds every clip of `data`.
pub fn embed_dataset(model: &Model, data: &Dataset) -> Result<Embeddings> {
    let mut clips = BTreeMap::new();
    for (e, chunks) in data.manifest.iter().zip(&data.features) {
        let emb = model
            .embed_clip(chunks)
            .map_err(|err| AsdError::Data(format!("{}: {err}", e.clip_id)))?;
        clips.insert(e.clip_id.clone(), emb.into_iter().map(|x| x.embedding).collect());
    }
    Ok(Embeddings { clips })
}

/// Detector over the train-split normals of every machine in the manifest.
pub fn fit_index(manifest: &[ManifestEntry], emb: &Embeddings, cfg: &BackendConfig) -> Result<DetectorIndex> {
    let mut normals = Vec::new();
    for e in manifest.iter().filter(|e| e.split == Split::Train) {
        for c in emb.get(&e.clip_id)? {
            normals.push(NormalEmbedding {
                machine_type: &e.machine_type,
                machine_id: &e.machine_id,
                domain: e.domain,
                embedding: c,
            });
        }
    }
    DetectorIndex::fit(cfg.partition, normals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub clip_id: String,
    pub machine_type: String,
    pub score: f64,
}

/// One score per test clip, in manifest order.
pub fn score_clips(index: &DetectorIndex, manifest: &[ManifestEntry], emb: &Embeddings, cfg: &BackendConfig) -> Result<Vec<ScoreRow>> {
    manifest
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| {
            let score = index.score_chunks(emb.get(&e.clip_id)?, &e.machine_type, &e.machine_id, cfg.aggregation)?;
            Ok(ScoreRow {
                clip_id: e.clip_id.clone(),
                machine_type: e.machine_type.clone(),
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    if !path.exists() {
        return Err(AsdError::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?)
}

/// Joins scores with manifest truth.
pub fn eval_records(manifest: &[ManifestEntry], scores: &[ScoreRow]) -> Result<Vec<EvalRecord>> {
    let by_id: BTreeMap<&str, &ManifestEntry> = manifest.iter().map(|e| (e.clip_id.as_str(), e)).collect();
    scores
        .iter()
        .map(|s| {
            let e = by_id
                .get(s.clip_id.as_str())
                .ok_or_else(|| AsdError::Data(format!("scored clip {} is not in the manifest", s.clip_id)))?;
            Ok(EvalRecord {
                clip_id: s.clip_id.clone(),
                score: s.score,
                truth: e.truth,
                machine_type: e.machine_type.clone(),
                domain: e.domain,
            })
        })
        .collect()
}

pub fn evaluate(manifest: &[ManifestEntry], scores: &[ScoreRow], cfg: &MetricsConfig) -> Result<MetricReport> {
    dcase_report(&eval_records(manifest, scores)?, cfg.mode, cfg.p)
}

/// Embedding, fitting and scoring in one call.
pub fn detect(model: &Model, data: &Dataset, cfg: &BackendConfig) -> Result<(Embeddings, Vec<ScoreRow>)> {
    let emb = embed_dataset(model, data)?;
    let index = fit_index(&data.manifest, &emb, cfg)?;
    let scores = score_clips(&index, &data.manifest, &emb, cfg)?;
    Ok((emb, scores))
}
