//! Additive angular margin softmax, FIFO memory bank, codebook pseudo-labels
//! and the dual-level contrastive term, combined as `L_aam + lambda * L_dlcl`.

use std::collections::VecDeque;

use diffcore::rng::{normal_tensor, stream, Rng};
use diffcore::{cosine, Graph, ParamStore, Real, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::groupadapter::renormalize_rows;

pub const AAM_WEIGHT: &str = "loss.aam.weight";
pub const CODEBOOK: &str = "loss.codebook.vectors";
pub const BANK: &str = "loss.bank.entries";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub scale: f64,
    pub margin: f64,
    pub lambda: f64,
    pub tau2: f64,
    pub n_q: usize,
    pub bank_size: usize,
    /// Treat the selected codebook vector as a constant.
    pub stop_codebook_grad: bool,
    pub use_dlcl: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
            lambda: 1.0,
            tau2: 0.1,
            n_q: 64,
            bank_size: 512,
            stop_codebook_grad: false,
            use_dlcl: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AsdError::Config(format!("losses: {m}")));
        if !(self.scale > 0.0) {
            return bad("scale must be positive");
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return bad("margin must lie in [0, pi/2)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.tau2 > 0.0) {
            return bad("tau2 must be positive");
        }
        if self.n_q == 0 || self.bank_size == 0 {
            return bad("n_q and bank_size must be positive");
        }
        Ok(())
    }
}

/// Class weights `[c, E]` and codebook `[n_q, E]`, unit rows.
pub fn init_loss_params<T: Real>(store: &mut ParamStore<T>, classes: usize, embed_dim: usize, cfg: &LossConfig, seed: u64) -> Result<()> {
    let mut rng = stream(seed, "loss.init");
    if classes > 0 {
        let mut w = normal_tensor(&[classes, embed_dim], 1.0, &mut rng);
        renormalize_rows(&mut w, &mut rng);
        store.insert(AAM_WEIGHT, w)?;
    }
    let mut v = normal_tensor(&[cfg.n_q, embed_dim], 1.0, &mut rng);
    renormalize_rows(&mut v, &mut rng);
    store.insert(CODEBOOK, v)?;
    Ok(())
}

/// AAM-softmax for one unit embedding `e` (`[1, E]`) against class matrix
/// `w` (`[c, E]`, rows normalized here).
pub fn aam_loss<T: Real>(g: &mut Graph<T>, e: Var, w: Var, y: usize, scale: f64, margin: f64) -> Result<Var> {
    let wn = g.l2_normalize(w)?;
    let cos = g.matmul_t(e, wn)?;
    let c = g.value(cos).numel();
    if y >= c {
        return Err(AsdError::Data(format!("class {y} out of range for {c} classes")));
    }
    let cos = g.angular_margin(cos, y, T::lit(margin))?;
    let logits = g.scale(cos, T::lit(scale));
    let lse = g.log_sum_exp(logits);
    let target = g.pick(logits, y)?;
    let loss = g.sub(lse, target)?;
    if !g.scalar(loss).is_finite() {
        return Err(AsdError::Numeric("non-finite AAM loss".into()));
    }
    Ok(loss)
}

/// `-log( exp(x.v/tau) / (exp(x.v/tau) + sum_j exp(x.m_j/tau)) )`.
/// `bank` is `[n_b, E]` and must be a constant.
pub fn dlcl_loss<T: Real>(g: &mut Graph<T>, x: Var, v: Var, bank: Option<Var>, tau2: f64) -> Result<Var> {
    let pos = g.matmul_t(x, v)?;
    let logits = match bank {
        Some(m) => {
            let neg = g.matmul_t(x, m)?;
            g.concat_cols(&[pos, neg])?
        }
        None => pos,
    };
    let logits = g.scale(logits, T::lit(1.0 / tau2));
    let lse = g.log_sum_exp(logits);
    let first = g.pick(logits, 0)?;
    Ok(g.sub(lse, first)?)
}

/// Index of the most cosine-similar codebook row; ties go to the lowest index.
pub fn assign_pseudo_label<T: Real>(x: &[T], codebook: &Tensor<T>) -> Result<(usize, Vec<T>)> {
    let (n, d) = codebook.dims2();
    if n == 0 || d != x.len() {
        return Err(AsdError::Data(format!(
            "codebook {:?} does not match a {}-dim query",
            codebook.shape(),
            x.len()
        )));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..n {
        let c = cosine(x, codebook.row_slice(j));
        if c > best.1 {
            best = (j, c);
        }
    }
    Ok((best.0, codebook.row_slice(best.0).to_vec()))
}

/// Fixed-capacity FIFO of detached unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a copy of `e`, evicting the oldest entry when full.
    pub fn push(&mut self, e: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e.to_vec());
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn to_tensor<T: Real>(&self) -> Option<Tensor<T>> {
        let d = self.entries.front()?.len();
        let data = self.entries.iter().flatten().map(|&v| T::lit(v)).collect();
        Some(Tensor::new(&[self.entries.len(), d], data).expect("uniform rows"))
    }

    pub fn from_tensor(capacity: usize, t: &Tensor<f64>) -> Self {
        let mut b = Self::new(capacity);
        let (n, _) = t.dims2();
        for i in 0..n {
            b.push(t.row_slice(i));
        }
        b
    }
}

/// One item of a training batch.
pub struct BatchItem {
    pub embedding: Var,
    /// Class index when the attribute is known.
    pub label: Option<usize>,
}

pub struct BatchLoss {
    pub loss: Var,
    pub aam: f64,
    pub dlcl: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Codebook index per unlabeled item, in batch order.
    pub pseudo_labels: Vec<usize>,
    pub dlcl_active: bool,
}

/// `mean L_aam` over labeled items plus `lambda * mean L_dlcl` over unlabeled
/// ones. The contrastive term is skipped while the bank holds fewer than
/// `n_q` entries. Pushing labeled embeddings to the bank is left to the
/// caller, after the loss is formed.
pub fn combined_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    items: &[BatchItem],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let labeled: Vec<&BatchItem> = items.iter().filter(|i| i.label.is_some()).collect();
    let unlabeled: Vec<&BatchItem> = items.iter().filter(|i| i.label.is_none()).collect();
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(AsdError::Data("batch has neither labeled nor unlabeled items".into()));
    }
    let mut terms = Vec::new();
    let mut aam_sum = 0.0;
    if !labeled.is_empty() {
        let w = g.param(store, AAM_WEIGHT)?;
        let inv = 1.0 / labeled.len() as f64;
        for it in &labeled {
            let l = aam_loss(g, it.embedding, w, it.label.expect("labeled"), cfg.scale, cfg.margin)?;
            aam_sum += g.scalar(l).as_f64();
            terms.push(g.scale(l, T::lit(inv)));
        }
    }
    let dlcl_active = cfg.use_dlcl && !unlabeled.is_empty() && cfg.lambda > 0.0 && bank.len() >= cfg.n_q;
    let mut dlcl_sum = 0.0;
    let mut pseudo_labels = Vec::new();
    if dlcl_active {
        let codebook = store.get(CODEBOOK)?;
        let v_all = if cfg.stop_codebook_grad {
            g.constant(codebook.clone())
        } else {
            g.param(store, CODEBOOK)?
        };
        let m = g.constant(bank.to_tensor::<T>().expect("non-empty bank"));
        let wgt = cfg.lambda / unlabeled.len() as f64;
        for it in &unlabeled {
            let x = g.value(it.embedding).data().to_vec();
            let (j, _) = assign_pseudo_label(&x, codebook)?;
            pseudo_labels.push(j);
            let vc = g.slice_rows(v_all, j, 1)?;
            let l = dlcl_loss(g, it.embedding, vc, Some(m), cfg.tau2)?;
            dlcl_sum += g.scalar(l).as_f64();
            terms.push(g.scale(l, T::lit(wgt)));
        }
    }
    let loss = if terms.is_empty() {
        // Unlabeled-only batch during bank warm-up.
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.add_all(&terms)?
    };
    Ok(BatchLoss {
        loss,
        aam: if labeled.is_empty() { 0.0 } else { aam_sum / labeled.len() as f64 },
        dlcl: if pseudo_labels.is_empty() { 0.0 } else { dlcl_sum / pseudo_labels.len() as f64 },
        labeled: labeled.len(),
        unlabeled: unlabeled.len(),
        pseudo_labels,
        dlcl_active,
    })
}

/// k-means++ seeding under cosine distance: indices of `k` rows of `unit`.
pub fn kmeans_pp_seeds(unit: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = unit.len();
    let dist = |a: &[f64], b: &[f64]| 1.0 - cosine(a, b);
    let mut picked = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = unit.iter().map(|x| dist(x, &unit[picked[0]]).max(0.0).powi(2)).collect();
    while picked.len() < k.min(n) {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        };
        picked.push(pick);
        for (d, x) in d2.iter_mut().zip(unit) {
            *d = d.min(dist(x, &unit[pick]).max(0.0).powi(2));
        }
    }
    picked
}

/// Static k-means pseudo-labels on normalized embeddings: seeded k-means++
/// initialization, cosine assignment, at most 100 iterations.
pub fn offline_pl_baseline(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if k == 0 || k > n {
        return Err(AsdError::Data(format!("cannot form {k} clusters from {n} embeddings")));
    }
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let norm = diffcore::l2_norm(e);
            e.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut rng = stream(seed, "kmeans");
    let mut centers: Vec<Vec<f64>> = kmeans_pp_seeds(&unit, k, &mut rng).into_iter().map(|i| unit[i].clone()).collect();
    let mut labels = vec![0; n];
    for iter in 0..100 {
        let mut changed = false;
        for (i, x) in unit.iter().enumerate() {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let s = cosine(x, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
            if labels[i] != best.0 {
                labels[i] = best.0;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = unit.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(x, _)| x).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; c.len()];
            for m in &members {
                for (a, b) in mean.iter_mut().zip(m.iter()) {
                    *a += b;
                }
            }
            let norm = diffcore::l2_norm(&mean);
            if norm > 0.0 {
                *c = mean.into_iter().map(|v| v / norm).collect();
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn aam_two_class_closed_form() {
        let mut g = Graph::new();
        let e = g.constant(row(&[1.0, 0.0]));
        let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = aam_loss(&mut g, e, w, 0, 2.0, 0.0).unwrap();
        let expect = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.scalar(l) - expect).abs() < 1e-6);
        assert!((expect - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn dlcl_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(row(&[1.0, 0.0]));
        let m = g.constant(row(&[0.0, 1.0]));
        let l = dlcl_loss(&mut g, x, x, Some(m), 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(l) - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);

        let v = g.constant(row(&[0.6, 0.8]));
        let same = g.constant(Tensor::from_f64(&[3, 2], &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap());
        let l = dlcl_loss(&mut g, x, v, Some(same), 0.1).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let v = Tensor::<f64>::from_f64(&[3, 2], &[0.0, 1.0, 0.6, 0.8, 1.0, 0.0]).unwrap();
        assert_eq!(assign_pseudo_label(&[1.0, 0.0], &v).unwrap().0, 2);
        assert_eq!(assign_pseudo_label(&[0.6, 0.8], &v).unwrap().0, 1);
        let tied = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(assign_pseudo_label(&[1.0, 0.0], &tied).unwrap().0, 0);
    }

    #[test]
    fn bank_is_fifo() {
        let mut b = MemoryBank::new(2);
        b.push(&[1.0]);
        assert_eq!(b.len(), 1);
        b.push(&[2.0]);
        b.push(&[3.0]);
        let got: Vec<f64> = b.iter().map(|e| e[0]).collect();
        assert_eq!(got, vec![2.0, 3.0]);
    }

    #[test]
    fn kmeans_edge_cases() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64 * 0.01]).collect();
        assert_eq!(offline_pl_baseline(&pts, 1, 0).unwrap(), vec![0; 6]);
        assert!(offline_pl_baseline(&pts, 7, 0).is_err());
        let same = vec![vec![0.3, 0.4]; 5];
        let a = offline_pl_baseline(&same, 2, 0).unwrap();
        assert_eq!(a, offline_pl_baseline(&same, 2, 0).unwrap());
        assert!(a.iter().all(|&l| l == a[0]));
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        let mut rng = stream(3, "blobs");
        for c in 0..2 {
            for _ in 0..20 {
                let base = if c == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                pts.push(base.iter().map(|b| b + rng.random_range(-0.05..0.05)).collect());
                truth.push(c);
            }
        }
        let labels = offline_pl_baseline(&pts, 2, 1).unwrap();
        assert_eq!(crate::synthdata::purity(&truth, &labels), 1.0);
    }

    #[test]
    fn seeding_spreads_over_separate_directions() {
        let mut pts = Vec::new();
        for axis in 0..3 {
            for j in 0..5 {
                let mut v = vec![0.01 * j as f64; 3];
                v[axis] = 1.0;
                pts.push(v);
            }
        }
        let unit: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v / diffcore::l2_norm(p)).collect()).collect();
        let picks = kmeans_pp_seeds(&unit, 3, &mut stream(4, "seeds"));
        let axes: std::collections::BTreeSet<usize> = picks.iter().map(|i| i / 5).collect();
        assert_eq!(axes.len(), 3);
        assert_eq!(kmeans_pp_seeds(&unit, 40, &mut stream(4, "seeds")).len(), unit.len());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let store = ParamStore::new();
        let bank = MemoryBank::new(4);
        assert!(combined_loss(&mut g, &store, &[], &bank, &LossConfig::default()).is_err());
    }
}
