//! Nearest-neighbour (k = 1) cosine-distance detector with per-machine
//! partitions and separate source/target stores.

use std::collections::BTreeMap;

use diffcore::cosine;
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::synthdata::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// One detector per machine type.
    MachineType,
    /// One detector per machine type and id.
    MachineTypeAndId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub partition: PartitionMode,
    pub aggregation: Aggregation,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            partition: PartitionMode::MachineType,
            aggregation: Aggregation::Mean,
        }
    }
}

pub fn partition_key(mode: PartitionMode, machine_type: &str, machine_id: &str) -> String {
    match mode {
        PartitionMode::MachineType => machine_type.to_string(),
        PartitionMode::MachineTypeAndId => format!("{machine_type}/{machine_id}"),
    }
}

/// A normal training embedding with routing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEmbedding<'a> {
    pub machine_type: &'a str,
    pub machine_id: &'a str,
    pub domain: Domain,
    pub embedding: &'a [f64],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorIndex {
    pub mode: PartitionMode,
    pub partitions: BTreeMap<String, Partition>,
}

/// `min_i (1 - cos(q, e_i))` by exhaustive scan.
pub fn nn_distance(q: &[f64], store: &[Vec<f64>]) -> Result<f64> {
    if store.is_empty() {
        return Err(AsdError::EmptyStore);
    }
    Ok(store.iter().map(|e| 1.0 - cosine(q, e)).fold(f64::INFINITY, f64::min))
}

impl DetectorIndex {
    pub fn fit<'a>(mode: PartitionMode, normals: impl IntoIterator<Item = NormalEmbedding<'a>>) -> Result<Self> {
        let mut partitions: BTreeMap<String, Partition> = BTreeMap::new();
        for n in normals {
            let norm = diffcore::l2_norm(n.embedding);
            if !norm.is_finite() || norm == 0.0 {
                return Err(AsdError::Data(format!("{}: zero or non-finite embedding", n.machine_type)));
            }
            let unit: Vec<f64> = n.embedding.iter().map(|v| v / norm).collect();
            let p = partitions.entry(partition_key(mode, n.machine_type, n.machine_id)).or_default();
            match n.domain {
                Domain::Source => p.source.push(unit),
                Domain::Target => p.target.push(unit),
            }
        }
        if partitions.is_empty() {
            return Err(AsdError::Data("no normal embeddings to fit the detector".into()));
        }
        Ok(Self { mode, partitions })
    }

    pub fn partition(&self, machine_type: &str, machine_id: &str) -> Result<&Partition> {
        let key = partition_key(self.mode, machine_type, machine_id);
        self.partitions.get(&key).ok_or(AsdError::UnknownPartition(key))
    }

    /// `min(d_source, d_target)`, falling back to whichever store is non-empty.
    pub fn score(&self, q: &[f64], machine_type: &str, machine_id: &str) -> Result<f64> {
        let p = self.partition(machine_type, machine_id)?;
        let ds = nn_distance(q, &p.source);
        let dt = nn_distance(q, &p.target);
        match (ds, dt) {
            (Ok(a), Ok(b)) => Ok(a.min(b)),
            (Ok(a), Err(_)) | (Err(_), Ok(a)) => Ok(a),
            (Err(e), Err(_)) => Err(e),
        }
    }

    /// Per-clip score from its chunk embeddings.
    pub fn score_chunks(&self, chunks: &[Vec<f64>], machine_type: &str, machine_id: &str, agg: Aggregation) -> Result<f64> {
        let scores = chunks
            .iter()
            .map(|c| self.score(c, machine_type, machine_id))
            .collect::<Result<Vec<_>>>()?;
        aggregate(&scores, agg)
    }
}

pub fn aggregate(scores: &[f64], agg: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(AsdError::Data("clip has no chunks".into()));
    }
    Ok(match agg {
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Max => scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}
