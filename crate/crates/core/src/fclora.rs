//! Multi-branch low-rank adaptation of a linear map `y = W x`, with `W`
//! stored as `[k, d]` (out x in). Each branch has a down-projection
//! `A_j: [r, d]` and an up-projection `B_i: [k, r]`.
//!
//! Fully connected: `y = W x + s (sum_i B_i)(sum_j A_j) x`.
//! Plain multi-branch: `y = W x + s sum_i B_i A_i x`.

use diffcore::rng::{normal_tensor, Rng};
use diffcore::{Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraBranchSet<T> {
    pub a: Vec<Tensor<T>>,
    pub b: Vec<Tensor<T>>,
    pub fully_connected: bool,
    pub scale: f64,
}

/// Largest admissible rank for a `d -> k` map. Rank 1 is always allowed.
pub fn max_rank(d: usize, k: usize) -> usize {
    (d.min(k) / 2).max(1)
}

pub fn check_dims(d: usize, k: usize, r: usize, n_l: usize) -> Result<()> {
    if d == 0 || k == 0 || r == 0 || n_l == 0 {
        return Err(AsdError::Config(format!(
            "LoRA dims must be positive (d={d}, k={k}, r={r}, branches={n_l})"
        )));
    }
    if r > max_rank(d, k) {
        return Err(AsdError::Config(format!(
            "LoRA rank {r} exceeds min(d, k)/2 for a {d}->{k} map"
        )));
    }
    Ok(())
}

impl<T: Real> LoraBranchSet<T> {
    /// Gaussian `A_j`, zero `B_i`: the adapted map starts equal to `W`.
    pub fn init(d: usize, k: usize, r: usize, n_l: usize, fully_connected: bool, rng: &mut Rng) -> Result<Self> {
        check_dims(d, k, r, n_l)?;
        let a = (0..n_l).map(|_| normal_tensor(&[r, d], INIT_STD, rng)).collect();
        let b = (0..n_l).map(|_| Tensor::zeros(&[k, r])).collect();
        Ok(Self {
            a,
            b,
            fully_connected,
            scale: 1.0,
        })
    }

    pub fn branches(&self) -> usize {
        self.a.len()
    }

    pub fn rank(&self) -> usize {
        self.a[0].dims2().0
    }

    pub fn num_scalars(&self) -> usize {
        self.a.iter().chain(&self.b).map(Tensor::numel).sum()
    }

    fn validate(&self) -> Result<(usize, usize, usize)> {
        if self.a.is_empty() || self.a.len() != self.b.len() {
            return Err(AsdError::Config(format!(
                "LoRA set has {} down and {} up projections",
                self.a.len(),
                self.b.len()
            )));
        }
        let (r, d) = self.a[0].dims2();
        let (k, r2) = self.b[0].dims2();
        let consistent = r == r2
            && self.a.iter().all(|t| t.dims2() == (r, d))
            && self.b.iter().all(|t| t.dims2() == (k, r));
        if !consistent {
            return Err(AsdError::Diff(diffcore::DiffError::shape(
                "lora branches",
                self.a[0].shape(),
                self.b[0].shape(),
            )));
        }
        Ok((d, k, r))
    }

    /// `Delta W`, `[k, d]`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        let (d, k, _) = self.validate()?;
        let mut out = Tensor::zeros(&[k, d]);
        if self.fully_connected {
            let sa = sum_all(&self.a);
            let sb = sum_all(&self.b);
            out = sb.matmul(&sa)?;
        } else {
            for (a, b) in self.a.iter().zip(&self.b) {
                out = out.add(&b.matmul(a)?)?;
            }
        }
        Ok(out.scale(T::lit(self.scale)))
    }

    /// Adapted forward for rows of `x` (`[n, d] -> [n, k]`).
    pub fn apply(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, k, _) = self.validate()?;
        if w.dims2() != (k, d) {
            return Err(AsdError::Diff(diffcore::DiffError::shape("lora apply", w.shape(), &[k, d])));
        }
        let base = x.matmul_t(w)?;
        let s = T::lit(self.scale);
        let delta = if self.fully_connected {
            x.matmul_t(&sum_all(&self.a))?.matmul_t(&sum_all(&self.b))?
        } else {
            let mut acc = Tensor::zeros(base.shape());
            for (a, b) in self.a.iter().zip(&self.b) {
                acc = acc.add(&x.matmul_t(a)?.matmul_t(b)?)?;
            }
            acc
        };
        Ok(base.add(&delta.scale(s))?)
    }

    /// `W + Delta W`; a plain forward with the result equals [`Self::apply`].
    pub fn merge(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(w.add(&self.delta()?)?)
    }

    /// Explicit double sum `sum_i sum_j B_i A_j`, the unfactored form.
    pub fn delta_double_sum(&self) -> Result<Tensor<T>> {
        let (d, k, _) = self.validate()?;
        let mut out = Tensor::zeros(&[k, d]);
        for (i, b) in self.b.iter().enumerate() {
            for (j, a) in self.a.iter().enumerate() {
                if self.fully_connected || i == j {
                    out = out.add(&b.matmul(a)?)?;
                }
            }
        }
        Ok(out.scale(T::lit(self.scale)))
    }
}

fn sum_all<T: Real>(ts: &[Tensor<T>]) -> Tensor<T> {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc = acc.add(t).expect("validated shapes");
    }
    acc
}

/// `x W^T + x A^T B^T` for a single branch.
pub fn single_lora<T: Real>(x: &Tensor<T>, w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    LoraBranchSet {
        a: vec![a.clone()],
        b: vec![b.clone()],
        fully_connected: true,
        scale: 1.0,
    }
    .apply(x, w)
}

/// Adaptation settings for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub branches: usize,
    pub fully_connected: bool,
    pub scale: f64,
    pub targets: Vec<String>,
    /// Freeze the backbone so only adaptation parameters train.
    pub frozen: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 4,
            branches: 4,
            fully_connected: true,
            scale: 1.0,
            targets: vec!["query".into(), "value".into()],
            frozen: false,
        }
    }
}

pub fn a_name(prefix: &str, j: usize) -> String {
    format!("{prefix}.lora.A.{j}")
}

pub fn b_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.lora.B.{i}")
}

/// Stores a branch set under `<prefix>.lora.{A,B}.<n>`.
pub fn insert_branches<T: Real>(store: &mut ParamStore<T>, prefix: &str, set: &LoraBranchSet<T>) -> Result<()> {
    for (j, a) in set.a.iter().enumerate() {
        store.insert(a_name(prefix, j), a.clone())?;
    }
    for (i, b) in set.b.iter().enumerate() {
        store.insert(b_name(prefix, i), b.clone())?;
    }
    Ok(())
}

/// Number of branches stored under `prefix`.
pub fn count_branches<T: Real>(store: &ParamStore<T>, prefix: &str) -> usize {
    (0..).take_while(|&j| store.contains(&a_name(prefix, j))).count()
}

pub fn read_branches<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    fully_connected: bool,
    scale: f64,
) -> Result<Option<LoraBranchSet<T>>> {
    let n = count_branches(store, prefix);
    if n == 0 {
        return Ok(None);
    }
    let a = (0..n).map(|j| store.get(&a_name(prefix, j)).cloned()).collect::<Result<_, _>>()?;
    let b = (0..n).map(|i| store.get(&b_name(prefix, i)).cloned()).collect::<Result<_, _>>()?;
    Ok(Some(LoraBranchSet {
        a,
        b,
        fully_connected,
        scale,
    }))
}

pub fn remove_branches<T: Real>(store: &mut ParamStore<T>, prefix: &str) -> usize {
    let n = count_branches(store, prefix);
    for j in 0..n {
        store.remove(&a_name(prefix, j));
        store.remove(&b_name(prefix, j));
    }
    n
}

/// Recorded `x W^T + s * delta(x)`, reading branches from the store.
pub fn apply_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    w: Var,
    fully_connected: bool,
    scale: f64,
) -> Result<Var> {
    let base = g.matmul_t(x, w)?;
    let n = count_branches(store, prefix);
    if n == 0 {
        return Ok(base);
    }
    let a = (0..n).map(|j| g.param(store, &a_name(prefix, j))).collect::<Result<Vec<_>, _>>()?;
    let b = (0..n).map(|i| g.param(store, &b_name(prefix, i))).collect::<Result<Vec<_>, _>>()?;
    let delta = if fully_connected {
        let sa = g.add_all(&a)?;
        let sb = g.add_all(&b)?;
        let h = g.matmul_t(x, sa)?;
        g.matmul_t(h, sb)?
    } else {
        let mut terms = Vec::with_capacity(n);
        for (&ai, &bi) in a.iter().zip(&b) {
            let h = g.matmul_t(x, ai)?;
            terms.push(g.matmul_t(h, bi)?);
        }
        g.add_all(&terms)?
    };
    let delta = if scale == 1.0 { delta } else { g.scale(delta, T::lit(scale)) };
    Ok(g.add(base, delta)?)
}
