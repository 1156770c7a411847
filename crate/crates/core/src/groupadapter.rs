//! Machine-aware group adapter: a decision MLP over the time-averaged input
//! yields a sharpened distribution `p` over unit-norm group vectors, and the
//! mixture `x_g = sum_i p_i a_i` is added to every step of the main branch.

use diffcore::rng::{normal_tensor, Rng};
use diffcore::{l2_norm, Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSite {
    Mha,
    Ffn,
    Transformer,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub site: AdapterSite,
    pub groups: usize,
    pub tau1: f64,
    /// Hidden width of the decision MLP; `None` means the model width.
    pub hidden: Option<usize>,
    /// One adapter shared by every layer instead of one per layer.
    pub shared: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            site: AdapterSite::Mha,
            groups: 32,
            tau1: 0.1,
            hidden: None,
            shared: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.site != AdapterSite::None && self.groups == 0 {
            return Err(AsdError::Config("adapter needs at least one group".into()));
        }
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(AsdError::Config(format!("tau1 must be positive, got {}", self.tau1)));
        }
        Ok(())
    }
}

pub const GROUPS: &str = "groups";
const MLP: [&str; 4] = ["mlp.0.weight", "mlp.0.bias", "mlp.1.weight", "mlp.1.bias"];

fn name(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Plain-tensor view of one adapter, for inference and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdapter<T> {
    /// `[n_g, d]`, rows unit-norm.
    pub groups: Tensor<T>,
    pub w0: Tensor<T>,
    pub b0: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub tau1: f64,
}

impl<T: Real> GroupAdapter<T> {
    /// Random unit groups, Gaussian first layer, near-zero output layer.
    pub fn init(d: usize, hidden: usize, n_g: usize, tau1: f64, rng: &mut Rng) -> Self {
        let mut groups = normal_tensor(&[n_g, d], 1.0, rng);
        renormalize_rows(&mut groups, rng);
        Self {
            groups,
            w0: normal_tensor(&[hidden, d], (1.0 / d as f64).sqrt(), rng),
            b0: Tensor::zeros(&[hidden]),
            w1: normal_tensor(&[n_g, hidden], 0.02, rng),
            b1: Tensor::zeros(&[n_g]),
            tau1,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.groups.dims2().0
    }

    pub fn insert(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(name(prefix, GROUPS), self.groups.clone())?;
        for (leaf, t) in MLP.iter().zip([&self.w0, &self.b0, &self.w1, &self.b1]) {
            store.insert(name(prefix, leaf), t.clone())?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore<T>, prefix: &str, tau1: f64) -> Result<Self> {
        let get = |leaf: &str| store.get(&name(prefix, leaf)).cloned();
        Ok(Self {
            groups: get(GROUPS)?,
            w0: get(MLP[0])?,
            b0: get(MLP[1])?,
            w1: get(MLP[2])?,
            b1: get(MLP[3])?,
            tau1,
        })
    }

    /// Decision-module logits (before the temperature) for a `[L, d]` sequence.
    pub fn logits(&self, seq: &Tensor<T>) -> Result<Vec<f64>> {
        let (l, d) = seq.dims2();
        if d != self.w0.dims2().1 {
            return Err(AsdError::Diff(diffcore::DiffError::shape(
                "group adapter input",
                seq.shape(),
                self.w0.shape(),
            )));
        }
        let mut pooled = vec![T::zero(); d];
        for t in 0..l {
            for (p, &v) in pooled.iter_mut().zip(seq.row_slice(t)) {
                *p += v;
            }
        }
        let inv = T::one() / T::lit(l as f64);
        pooled.iter_mut().for_each(|p| *p *= inv);
        let h = Tensor::row(pooled).matmul_t(&self.w0)?;
        let h: Vec<T> = h.data().iter().zip(self.b0.data()).map(|(&a, &b)| (a + b).max(T::zero())).collect();
        let z = Tensor::row(h).matmul_t(&self.w1)?;
        Ok(z.data().iter().zip(self.b1.data()).map(|(&a, &b)| (a + b).as_f64()).collect())
    }

    pub fn group_probs(&self, seq: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(softmax_tempered(&self.logits(seq)?, self.tau1))
    }

    pub fn mix(&self, p: &[f64]) -> Vec<f64> {
        mix(p, &self.groups)
    }

    /// `seq + x_g` broadcast over time, with `p` computed from `site_input`.
    pub fn apply(&self, seq: &Tensor<T>, site_input: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.group_probs(site_input)?;
        broadcast_add(seq, &self.mix(&p))
    }
}

/// `softmax(logits / tau)`.
pub fn softmax_tempered(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sum_i p_i a_i` over the rows of `groups`.
pub fn mix<T: Real>(p: &[f64], groups: &Tensor<T>) -> Vec<f64> {
    let (n, d) = groups.dims2();
    assert_eq!(p.len(), n, "probability length must match group count");
    let mut out = vec![0.0; d];
    for (i, &pi) in p.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(groups.row_slice(i)) {
            *o += pi * v.as_f64();
        }
    }
    out
}

pub fn broadcast_add<T: Real>(seq: &Tensor<T>, v: &[f64]) -> Result<Tensor<T>> {
    let (l, d) = seq.dims2();
    if v.len() != d {
        return Err(AsdError::Diff(diffcore::DiffError::shape("broadcast add", seq.shape(), &[v.len()])));
    }
    let mut out = seq.clone();
    for t in 0..l {
        for (o, &x) in out.row_slice_mut(t).iter_mut().zip(v) {
            *o += T::lit(x);
        }
    }
    Ok(out)
}

/// Divides each row by its norm; zero rows are redrawn. Returns how many
/// rows were redrawn.
pub fn renormalize_rows<T: Real>(t: &mut Tensor<T>, rng: &mut Rng) -> usize {
    let (n, d) = t.dims2();
    let mut redrawn = 0;
    for i in 0..n {
        let mut norm = l2_norm(t.row_slice(i));
        while norm == 0.0 || !norm.is_finite() {
            redrawn += 1;
            let fresh = normal_tensor::<T>(&[d], 1.0, rng);
            t.row_slice_mut(i).copy_from_slice(fresh.data());
            norm = l2_norm(t.row_slice(i));
        }
        let inv = T::lit(1.0 / norm);
        t.row_slice_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    redrawn
}

/// Renormalizes the group vectors stored under `prefix`.
pub fn renormalize_groups<T: Real>(store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Result<()> {
    let key = name(prefix, GROUPS);
    let redrawn = renormalize_rows(store.get_mut(&key)?, rng);
    if redrawn > 0 {
        log::warn!("{key}: re-initialized {redrawn} zero-norm group vector(s)");
    }
    Ok(())
}

/// Recorded adapter: returns `main + x_g` and the probability row `p`.
pub fn apply_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    site_input: Var,
    main: Var,
    tau1: f64,
) -> Result<(Var, Var)> {
    let p = probs_graph(g, store, prefix, site_input, tau1)?;
    let groups = g.param(store, &name(prefix, GROUPS))?;
    let xg = g.matmul(p, groups)?;
    Ok((g.add_row(main, xg)?, p))
}

pub fn probs_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    site_input: Var,
    tau1: f64,
) -> Result<Var> {
    let [w0, b0, w1, b1] = MLP.map(|leaf| g.param(store, &name(prefix, leaf)));
    let pooled = g.mean_rows(site_input);
    let h = g.matmul_t(pooled, w0?)?;
    let h = g.add_row(h, b0?)?;
    let h = g.relu(h);
    let z = g.matmul_t(h, w1?)?;
    let z = g.add_row(z, b1?)?;
    let z = g.scale(z, T::lit(1.0 / tau1));
    Ok(g.softmax(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::rng::stream;

    #[test]
    fn zero_mlp_gives_uniform_probs() {
        let mut rng = stream(1, "t");
        let mut ga = GroupAdapter::<f64>::init(6, 6, 4, 0.1, &mut rng);
        ga.w1 = Tensor::zeros(&[4, 6]);
        let seq = normal_tensor::<f64>(&[5, 6], 1.0, &mut rng);
        for p in ga.group_probs(&seq).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn tempered_softmax_worked_value() {
        let p = softmax_tempered(&[1.0, 0.0], 0.1);
        let e10 = 10f64.exp();
        assert!((p[0] - e10 / (e10 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.9999546).abs() < 1e-7);
        assert!((p[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn mix_midpoint_and_vertex() {
        let g = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mix(&[0.5, 0.5], &g), vec![0.5, 0.5]);
        assert_eq!(mix(&[0.0, 1.0], &g), vec![0.0, 1.0]);
    }

    #[test]
    fn constant_input_gets_constant_offset() {
        let mut rng = stream(2, "t");
        let ga = GroupAdapter::<f64>::init(3, 3, 2, 0.5, &mut rng);
        let seq = Tensor::<f64>::full(&[4, 3], 0.7);
        let out = ga.apply(&seq, &seq).unwrap();
        let xg = ga.mix(&ga.group_probs(&seq).unwrap());
        for t in 0..4 {
            for (j, &v) in out.row_slice(t).iter().enumerate() {
                assert_eq!(v, 0.7 + xg[j]);
            }
        }
    }

    #[test]
    fn zeroed_groups_are_identity() {
        let mut rng = stream(3, "t");
        let mut ga = GroupAdapter::<f64>::init(3, 3, 2, 0.5, &mut rng);
        ga.groups = Tensor::zeros(&[2, 3]);
        let seq = normal_tensor::<f64>(&[4, 3], 1.0, &mut rng);
        assert_eq!(ga.apply(&seq, &seq).unwrap(), seq);
    }

    #[test]
    fn renormalization_examples() {
        let mut rng = stream(4, "t");
        let mut t = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        renormalize_rows(&mut t, &mut rng);
        assert!((t.data()[0] - 0.6).abs() < 1e-15 && (t.data()[1] - 0.8).abs() < 1e-15);
        let before = t.clone();
        renormalize_rows(&mut t, &mut rng);
        assert!(t.max_abs_diff(&before) <= 1e-12);
        let mut z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(renormalize_rows(&mut z, &mut rng), 2);
        for i in 0..2 {
            assert!((l2_norm(z.row_slice(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_matches_plain_forward() {
        let mut rng = stream(5, "t");
        let ga = GroupAdapter::<f64>::init(4, 5, 3, 0.2, &mut rng);
        let mut store = ParamStore::new();
        ga.insert(&mut store, "a").unwrap();
        let x = normal_tensor::<f64>(&[6, 4], 1.0, &mut rng);
        let main = normal_tensor::<f64>(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let mi = g.constant(main.clone());
        let (out, p) = apply_graph(&mut g, &store, "a", xi, mi, 0.2).unwrap();
        assert!(g.value(out).max_abs_diff(&ga.apply(&main, &x).unwrap()) < 1e-12);
        let plain = ga.group_probs(&x).unwrap();
        for (a, b) in g.value(p).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
