//! AUC, partial AUC, domain-restricted AUC and DCASE-style aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::synthdata::{Domain, Truth};

pub const DEFAULT_P: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// A tied pair counts one half.
    Half,
    /// A tied pair counts zero.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    /// Arithmetic mean of the per-machine values.
    Mean,
    /// Harmonic mean of the per-machine values.
    Hmean,
}

fn check(normals: &[f64], anomalies: &[f64]) -> Result<()> {
    if normals.is_empty() || anomalies.is_empty() {
        return Err(AsdError::Data(format!(
            "AUC needs both classes ({} normal, {} anomalous)",
            normals.len(),
            anomalies.len()
        )));
    }
    if normals.iter().chain(anomalies).any(|v| !v.is_finite()) {
        return Err(AsdError::Numeric("non-finite anomaly score".into()));
    }
    Ok(())
}

/// Twice the number of (normal, anomaly) pairs ranked correctly, with ties
/// weighted per `mode`. Sort plus binary search.
fn doubled_wins(normals: &[f64], anomalies: &[f64], mode: TieMode) -> u64 {
    let mut sorted = normals.to_vec();
    sorted.sort_by(f64::total_cmp);
    anomalies
        .iter()
        .map(|&a| {
            let below = sorted.partition_point(|&n| n < a) as u64;
            let not_above = sorted.partition_point(|&n| n <= a) as u64;
            let ties = not_above - below;
            match mode {
                TieMode::Half => 2 * below + ties,
                TieMode::Strict => 2 * below,
            }
        })
        .sum()
}

/// Probability that an anomaly outscores a normal clip.
pub fn auc_with(normals: &[f64], anomalies: &[f64], mode: TieMode) -> Result<f64> {
    check(normals, anomalies)?;
    let pairs = (normals.len() * anomalies.len()) as f64;
    Ok(doubled_wins(normals, anomalies, mode) as f64 / 2.0 / pairs)
}

pub fn auc(normals: &[f64], anomalies: &[f64]) -> Result<f64> {
    auc_with(normals, anomalies, TieMode::Half)
}

/// AUC over the `floor(p * N)` highest-scoring normals.
pub fn pauc_with(normals: &[f64], anomalies: &[f64], p: f64, mode: TieMode) -> Result<f64> {
    check(normals, anomalies)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(AsdError::Config(format!("pAUC range p={p} must lie in (0, 1]")));
    }
    let k = (p * normals.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(AsdError::Data(format!(
            "pAUC with p={p} needs at least {} normal clips, got {}; use a larger test set",
            (1.0 / p).ceil(),
            normals.len()
        )));
    }
    let mut top = normals.to_vec();
    top.sort_by(|a, b| b.total_cmp(a));
    top.truncate(k);
    auc_with(&top, anomalies, mode)
}

pub fn pauc(normals: &[f64], anomalies: &[f64], p: f64) -> Result<f64> {
    pauc_with(normals, anomalies, p, TieMode::Half)
}

/// `n / sum(1 / v)`, defined for strictly positive values.
pub fn hmean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AsdError::Data("harmonic mean of no values".into()));
    }
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0)) {
        return Err(AsdError::Data(format!("harmonic mean needs positive values, got {v}")));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AsdError::Data("mean of no values".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    pub score: f64,
    pub truth: Truth,
    pub machine_type: String,
    pub domain: Domain,
}

fn split_scores<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> (Vec<f64>, Vec<f64>) {
    let (mut n, mut a) = (Vec::new(), Vec::new());
    for r in records {
        match r.truth {
            Truth::Normal => n.push(r.score),
            Truth::Anomalous => a.push(r.score),
            Truth::Unknown => {}
        }
    }
    (n, a)
}

/// AUC with normals of `domain` against every anomaly; `None` when that
/// domain has no normals.
pub fn domain_auc(records: &[EvalRecord], domain: Domain) -> Result<Option<f64>> {
    let normals: Vec<f64> = records
        .iter()
        .filter(|r| r.truth == Truth::Normal && r.domain == domain)
        .map(|r| r.score)
        .collect();
    if normals.is_empty() {
        return Ok(None);
    }
    let (_, anomalies) = split_scores(records.iter());
    auc(&normals, &anomalies).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineMetrics {
    pub machine_type: String,
    pub auc: f64,
    pub pauc: f64,
    pub auc_source: Option<f64>,
    pub auc_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: ReportMode,
    pub machines: Vec<MachineMetrics>,
    pub overall: f64,
    pub notes: Vec<String>,
}

pub fn dcase_report(records: &[EvalRecord], mode: ReportMode, p: f64) -> Result<MetricReport> {
    let mut by_machine: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        by_machine.entry(&r.machine_type).or_default().push(r.clone());
    }
    if by_machine.is_empty() {
        return Err(AsdError::Data("no records to evaluate".into()));
    }
    let mut machines = Vec::new();
    let mut notes = Vec::new();
    let mut values = Vec::new();
    for (name, recs) in by_machine {
        let (n, a) = split_scores(recs.iter());
        let ctx = |e: AsdError| AsdError::Data(format!("{name}: {e}"));
        let m = MachineMetrics {
            machine_type: name.to_string(),
            auc: auc(&n, &a).map_err(ctx)?,
            pauc: pauc(&n, &a, p).map_err(ctx)?,
            auc_source: domain_auc(&recs, Domain::Source)?,
            auc_target: domain_auc(&recs, Domain::Target)?,
        };
        for (d, v) in [("source", m.auc_source), ("target", m.auc_target)] {
            if v.is_none() {
                notes.push(format!("{name}: no {d} normals, AUC_{} omitted", &d[..1]));
            }
        }
        values.push(m.auc);
        values.push(m.pauc);
        machines.push(m);
    }
    let overall = match mode {
        ReportMode::Mean => mean(&values)?,
        ReportMode::Hmean => hmean(&values)?,
    };
    Ok(MetricReport {
        mode,
        machines,
        overall,
        notes,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", v * 100.0))
}

impl MetricReport {
    pub fn machine(&self, name: &str) -> Option<&MachineMetrics> {
        self.machines.iter().find(|m| m.machine_type == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = self.machines.iter().map(|m| m.machine_type.len()).max().unwrap_or(7).max(7);
        let _ = writeln!(s, "{:<w$}  {:>7}  {:>7}  {:>7}  {:>7}", "machine", "AUC", "pAUC", "AUC_s", "AUC_t");
        for m in &self.machines {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7}  {:>7}  {:>7}  {:>7}",
                m.machine_type,
                pct(Some(m.auc)),
                pct(Some(m.pauc)),
                pct(m.auc_source),
                pct(m.auc_target)
            );
        }
        let label = match self.mode {
            ReportMode::Mean => "mean",
            ReportMode::Hmean => "hmean",
        };
        let _ = writeln!(s, "{:<w$}  {:>7}", label, pct(Some(self.overall)));
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("machine_type,auc,pauc,auc_source,auc_target\n");
        for m in &self.machines {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                m.machine_type,
                pct(Some(m.auc)),
                pct(Some(m.pauc)),
                pct(m.auc_source).replace('-', ""),
                pct(m.auc_target).replace('-', "")
            );
        }
        let _ = writeln!(s, "overall,{},,,", pct(Some(self.overall)));
        s
    }
}

/// ROC points `(fpr, tpr)` from the highest threshold down.
pub fn roc_curve(normals: &[f64], anomalies: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = normals
        .iter()
        .map(|&s| (s, false))
        .chain(anomalies.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, na) = (normals.len().max(1) as f64, anomalies.len().max(1) as f64);
    let mut pts = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / nn, tp / na));
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_worked_values() {
        assert_eq!(auc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.1], &[0.3, 0.2]).unwrap(), 0.5);
        assert_eq!(auc(&[0.5, 0.6], &[0.1, 0.2]).unwrap(), 0.0);
        assert!(auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn tie_modes() {
        assert_eq!(auc_with(&[0.5], &[0.5], TieMode::Half).unwrap(), 0.5);
        assert_eq!(auc_with(&[0.5], &[0.5], TieMode::Strict).unwrap(), 0.0);
    }

    #[test]
    fn pauc_worked_values() {
        assert_eq!(pauc(&[0.4, 0.1], &[0.3, 0.2], 0.5).unwrap(), 0.0);
        assert_eq!(pauc(&[0.1, 0.2, 0.05], &[0.3, 0.4], 0.34).unwrap(), 1.0);
        let n = [0.3, 0.1, 0.7, 0.2];
        let a = [0.5, 0.15];
        assert_eq!(pauc(&n, &a, 1.0).unwrap(), auc(&n, &a).unwrap());
        assert!(pauc(&[0.1; 9], &[0.2], 0.1).is_err());
    }

    #[test]
    fn hmean_values() {
        assert_eq!(hmean(&[60.0, 60.0]).unwrap(), 60.0);
        assert!((hmean(&[40.0, 60.0]).unwrap() - 48.0).abs() < 1e-12);
        assert!(hmean(&[0.0, 1.0]).is_err());
    }

    fn rec(m: &str, score: f64, truth: Truth, domain: Domain) -> EvalRecord {
        EvalRecord {
            clip_id: format!("{m}_{score}"),
            score,
            truth,
            machine_type: m.into(),
            domain,
        }
    }

    #[test]
    fn domain_auc_cases() {
        let recs = vec![
            rec("a", 0.1, Truth::Normal, Domain::Source),
            rec("a", 0.2, Truth::Normal, Domain::Source),
            rec("a", 0.9, Truth::Normal, Domain::Target),
            rec("a", 0.5, Truth::Anomalous, Domain::Source),
            rec("a", 0.6, Truth::Anomalous, Domain::Target),
        ];
        assert_eq!(domain_auc(&recs, Domain::Source).unwrap(), Some(1.0));
        assert_eq!(domain_auc(&recs, Domain::Target).unwrap(), Some(0.0));
        let src: Vec<_> = recs.iter().filter(|r| r.domain == Domain::Source).cloned().collect();
        assert_eq!(domain_auc(&src, Domain::Target).unwrap(), None);
    }

    #[test]
    fn report_aggregation_modes() {
        // Ten normals per machine so that pAUC covers one normal.
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push(rec("a", i as f64, Truth::Normal, Domain::Source));
        }
        recs.push(rec("a", 100.0, Truth::Anomalous, Domain::Source));
        let r = dcase_report(&recs, ReportMode::Hmean, 0.1).unwrap();
        assert_eq!(r.overall, 1.0);
        assert!(r.to_table().contains("100.00"));
        assert!(r.notes.iter().any(|n| n.contains("target")));
    }
}
