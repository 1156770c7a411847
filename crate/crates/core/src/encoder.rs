//! Pre-norm transformer over patch sequences, attentive statistical pooling
//! and the projection to a unit-length embedding.

use diffcore::rng::{normal_tensor, stream, Rng};
use diffcore::{Graph, ParamStore, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::fclora::{self, LoraBranchSet, LoraConfig};
use crate::groupadapter::{self, AdapterConfig, AdapterSite, GroupAdapter};

pub const LINEAR_SITES: [&str; 6] = ["query", "key", "value", "output", "ffn_in", "ffn_out"];
const LN_EPS: f64 = 1e-5;
pub const STD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
    pub patch_t: usize,
    pub patch_f: usize,
    /// Capacity of the learned positional table.
    pub max_patches: usize,
    pub positional: bool,
    pub pool_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            embed_dim: 64,
            patch_t: 16,
            patch_f: 16,
            max_patches: 128,
            positional: true,
            pool_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_f
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AsdError::Config(format!("encoder: {m}")));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("layers, width, heads and ffn width must be positive".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.model_dim, self.num_heads));
        }
        if self.embed_dim == 0 || self.embed_dim > 2 * self.model_dim {
            return bad(format!("embed_dim {} must be in 1..={}", self.embed_dim, 2 * self.model_dim));
        }
        if self.patch_t == 0 || self.patch_f == 0 || self.max_patches == 0 || self.pool_hidden == 0 {
            return bad("patch sizes, max_patches and pool_hidden must be positive".into());
        }
        Ok(())
    }

    /// Input and output widths of a linear site.
    pub fn site_dims(&self, site: &str) -> Result<(usize, usize)> {
        let d = self.model_dim;
        match site {
            "query" | "key" | "value" | "output" => Ok((d, d)),
            "ffn_in" => Ok((d, self.ffn_dim)),
            "ffn_out" => Ok((self.ffn_dim, d)),
            other => Err(AsdError::Config(format!(
                "unknown LoRA target `{other}`; expected one of {LINEAR_SITES:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Nothing frozen.
    Full,
    /// Backbone frozen; LoRA, adapters, pooling and projection train.
    Lora,
}

/// Everything the forward pass needs besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub lora: LoraConfig,
    pub adapter: AdapterConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lora: LoraConfig::default(),
            adapter: AdapterConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        if self.lora.enabled {
            for t in &self.lora.targets {
                let (d, k) = self.encoder.site_dims(t)?;
                fclora::check_dims(d, k, self.lora.rank, self.lora.branches)?;
            }
        }
        Ok(())
    }

    pub fn adapter_prefix(&self, layer: usize) -> String {
        if self.adapter.shared {
            "shared.adapter".into()
        } else {
            format!("layer.{layer}.adapter")
        }
    }
}

pub fn linear_prefix(layer: usize, site: &str) -> String {
    format!("layer.{layer}.{site}")
}

/// True for backbone parameters: everything except LoRA branches, adapters,
/// pooling, projection and loss state.
pub fn is_base_param(name: &str) -> bool {
    let head = name.starts_with("patch.") || name == "pos" || name.starts_with("final_ln.");
    let layer = name.starts_with("layer.") && !name.contains(".lora.") && !name.contains(".adapter.");
    head || layer
}

pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("loss.") && !name.starts_with("opt.")
}

fn insert_linear<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        normal_tensor(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), rng),
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?;
    Ok(())
}

fn insert_ln<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Backbone, pooling and projection parameters.
pub fn init_base<T: Real>(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = stream(seed, "encoder.init");
    let d = cfg.model_dim;
    let mut s = ParamStore::new();
    insert_linear(&mut s, "patch", cfg.patch_dim(), d, &mut rng)?;
    s.insert("pos", normal_tensor(&[cfg.max_patches, d], 0.02, &mut rng))?;
    for i in 0..cfg.num_layers {
        insert_ln(&mut s, &format!("layer.{i}.ln1"), d)?;
        insert_ln(&mut s, &format!("layer.{i}.ln2"), d)?;
        for site in LINEAR_SITES {
            let (din, dout) = cfg.site_dims(site)?;
            insert_linear(&mut s, &linear_prefix(i, site), din, dout, &mut rng)?;
        }
    }
    insert_ln(&mut s, "final_ln", d)?;
    insert_linear(&mut s, "pool.0", d, cfg.pool_hidden, &mut rng)?;
    // Zero scoring layer: attention starts uniform.
    s.insert("pool.1.weight", Tensor::zeros(&[1, cfg.pool_hidden]))?;
    s.insert("pool.1.bias", Tensor::zeros(&[1]))?;
    s.insert(
        "proj.weight",
        normal_tensor(&[cfg.embed_dim, 2 * d], (1.0 / (2 * d) as f64).sqrt(), &mut rng),
    )?;
    Ok(s)
}

/// Adds zero-delta LoRA branches for every configured target.
pub fn attach_lora<T: Real>(store: &mut ParamStore<T>, spec: &ModelSpec, seed: u64) -> Result<()> {
    if !spec.lora.enabled {
        return Ok(());
    }
    for i in 0..spec.encoder.num_layers {
        for site in &spec.lora.targets {
            let prefix = linear_prefix(i, site);
            if fclora::count_branches(store, &prefix) > 0 {
                continue;
            }
            let (d, k) = spec.encoder.site_dims(site)?;
            let mut rng = stream(seed, &format!("lora.init/{prefix}"));
            let mut set = LoraBranchSet::<T>::init(d, k, spec.lora.rank, spec.lora.branches, spec.lora.fully_connected, &mut rng)?;
            set.scale = spec.lora.scale;
            fclora::insert_branches(store, &prefix, &set)?;
        }
    }
    Ok(())
}

pub fn attach_adapters<T: Real>(store: &mut ParamStore<T>, spec: &ModelSpec, seed: u64) -> Result<()> {
    if spec.adapter.site == AdapterSite::None {
        return Ok(());
    }
    let d = spec.encoder.model_dim;
    let hidden = spec.adapter.hidden.unwrap_or(d);
    let count = if spec.adapter.shared { 1 } else { spec.encoder.num_layers };
    for i in 0..count {
        let prefix = spec.adapter_prefix(i);
        if store.contains(&format!("{prefix}.{}", groupadapter::GROUPS)) {
            continue;
        }
        let mut rng = stream(seed, &format!("adapter.init/{prefix}"));
        GroupAdapter::<T>::init(d, hidden, spec.adapter.groups, spec.adapter.tau1, &mut rng).insert(store, &prefix)?;
    }
    Ok(())
}

/// Fresh parameter store for a spec.
pub fn init_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    let mut s = init_base(&spec.encoder, seed)?;
    attach_lora(&mut s, spec, seed)?;
    attach_adapters(&mut s, spec, seed)?;
    Ok(s)
}

/// Applies the freeze pattern of `mode`, unfreezing everything else.
pub fn apply_mode<T: Real>(store: &mut ParamStore<T>, mode: FinetuneMode) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        if mode == FinetuneMode::Lora && is_base_param(&n) {
            store.freeze(&n)?;
        } else {
            store.unfreeze(&n);
        }
    }
    Ok(())
}

/// Group adapters that the site uses, for renormalization.
pub fn adapter_prefixes<T: Real>(store: &ParamStore<T>) -> Vec<String> {
    store
        .names()
        .filter_map(|n| n.strip_suffix(&format!(".{}", groupadapter::GROUPS)))
        .map(str::to_string)
        .collect()
}

/// Intermediate handles of one forward pass.
pub struct Forward {
    pub frames: Var,
    pub pooled: Var,
    pub embedding: Var,
    /// Group distribution per adapter application, in layer order.
    pub probs: Vec<Var>,
}

fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, spec: &ModelSpec, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = fclora::apply_graph(g, store, prefix, x, w, spec.lora.fully_connected, spec.lora.scale)?;
    Ok(g.add_row(y, b)?)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    let n = g.layer_norm(x, T::lit(LN_EPS));
    let n = g.mul_row(n, gain)?;
    Ok(g.add_row(n, bias)?)
}

fn attention<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, spec: &ModelSpec, layer: usize, x: Var) -> Result<Var> {
    let q = linear(g, store, spec, &linear_prefix(layer, "query"), x)?;
    let k = linear(g, store, spec, &linear_prefix(layer, "key"), x)?;
    let v = linear(g, store, spec, &linear_prefix(layer, "value"), x)?;
    let dh = spec.encoder.head_dim();
    let inv = T::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(spec.encoder.num_heads);
    for h in 0..spec.encoder.num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let s = g.matmul_t(qh, kh)?;
        let s = g.scale(s, inv);
        let a = g.softmax(s);
        heads.push(g.matmul(a, vh)?);
    }
    let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, store, spec, &linear_prefix(layer, "output"), o)
}

fn adapt<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    spec: &ModelSpec,
    layer: usize,
    site_input: Var,
    main: Var,
    probs: &mut Vec<Var>,
) -> Result<Var> {
    let prefix = spec.adapter_prefix(layer);
    let (out, p) = groupadapter::apply_graph(g, store, &prefix, site_input, main, spec.adapter.tau1)?;
    probs.push(p);
    Ok(out)
}

/// Frame-level representations `[L, d]` for a `[L, patch_dim]` sequence.
pub fn encode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, spec: &ModelSpec, patches: Var) -> Result<(Var, Vec<Var>)> {
    let cfg = &spec.encoder;
    let (l, p) = g.value(patches).dims2();
    if p != cfg.patch_dim() {
        return Err(AsdError::Data(format!(
            "patch embedding: got {p}-dim patches, expected {}",
            cfg.patch_dim()
        )));
    }
    if cfg.positional && l > cfg.max_patches {
        return Err(AsdError::Data(format!(
            "sequence of {l} patches exceeds the positional table ({})",
            cfg.max_patches
        )));
    }
    let mut h = linear(g, store, spec, "patch", patches)?;
    if cfg.positional {
        let pos = g.param(store, "pos")?;
        let pos = g.slice_rows(pos, 0, l)?;
        h = g.add(h, pos)?;
    }
    let site = spec.adapter.site;
    let mut probs = Vec::new();
    for i in 0..cfg.num_layers {
        let ctx = |e: AsdError| match e {
            AsdError::Diff(d) => AsdError::Data(format!("layer {i}: {d}")),
            other => other,
        };
        let block_in = h;
        let a_in = layer_norm(g, store, &format!("layer.{i}.ln1"), h).map_err(ctx)?;
        let mut a = attention(g, store, spec, i, a_in).map_err(ctx)?;
        if site == AdapterSite::Mha {
            a = adapt(g, store, spec, i, a_in, a, &mut probs).map_err(ctx)?;
        }
        h = g.add(h, a)?;
        let f_in = layer_norm(g, store, &format!("layer.{i}.ln2"), h).map_err(ctx)?;
        let f = linear(g, store, spec, &linear_prefix(i, "ffn_in"), f_in).map_err(ctx)?;
        let f = g.gelu(f);
        let mut f = linear(g, store, spec, &linear_prefix(i, "ffn_out"), f).map_err(ctx)?;
        if site == AdapterSite::Ffn {
            f = adapt(g, store, spec, i, f_in, f, &mut probs).map_err(ctx)?;
        }
        h = g.add(h, f)?;
        if site == AdapterSite::Transformer {
            h = adapt(g, store, spec, i, block_in, h, &mut probs).map_err(ctx)?;
        }
    }
    Ok((layer_norm(g, store, "final_ln", h)?, probs))
}

/// Attention weights `[1, L]` from the scoring MLP.
pub fn pool_weights<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
    let w0 = g.param(store, "pool.0.weight")?;
    let b0 = g.param(store, "pool.0.bias")?;
    let w1 = g.param(store, "pool.1.weight")?;
    let b1 = g.param(store, "pool.1.bias")?;
    let h = g.matmul_t(seq, w0)?;
    let h = g.add_row(h, b0)?;
    let h = g.tanh(h);
    let s = g.matmul_t(h, w1)?;
    let s = g.add_row(s, b1)?;
    let s = g.transpose(s);
    Ok(g.softmax(s))
}

/// `concat(mu, sigma)` under weights `alpha` (`[1, L]`).
pub fn weighted_stats<T: Real>(g: &mut Graph<T>, seq: Var, alpha: Var) -> Result<Var> {
    let mu = g.matmul(alpha, seq)?;
    let sq = g.square(seq);
    let m2 = g.matmul(alpha, sq)?;
    let mu2 = g.square(mu);
    let var = g.sub(m2, mu2)?;
    let sigma = g.sqrt_eps(var, T::lit(STD_EPS));
    Ok(g.concat_cols(&[mu, sigma])?)
}

pub fn attentive_stat_pool<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
    let alpha = pool_weights(g, store, seq)?;
    weighted_stats(g, seq, alpha)
}

/// Linear map without bias, then L2 normalization.
pub fn project<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, u: Var) -> Result<Var> {
    let w = g.param(store, "proj.weight")?;
    let z = g.matmul_t(u, w)?;
    g.l2_normalize(z).map_err(|e| match e {
        diffcore::DiffError::ZeroNorm(_) => AsdError::Numeric("projection produced a zero vector".into()),
        other => other.into(),
    })
}

pub fn forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, spec: &ModelSpec, patches: Var) -> Result<Forward> {
    let (frames, probs) = encode(g, store, spec, patches)?;
    let pooled = attentive_stat_pool(g, store, frames)?;
    let embedding = project(g, store, pooled)?;
    Ok(Forward {
        frames,
        pooled,
        embedding,
        probs,
    })
}

/// Inference result for one patch sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub embedding: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

pub fn embed<T: Real>(store: &ParamStore<T>, spec: &ModelSpec, patches: Tensor<T>) -> Result<Embedded> {
    let mut g = Graph::new();
    let x = g.constant(patches);
    let f = forward(&mut g, store, spec, x)?;
    let embedding = g.value(f.embedding).to_f64_vec();
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(AsdError::Numeric("non-finite embedding".into()));
    }
    Ok(Embedded {
        embedding,
        probs: f.probs.iter().map(|&p| g.value(p).to_f64_vec()).collect(),
    })
}

/// Folds every LoRA branch set into its base weight. Returns how many sites
/// were merged.
pub fn merge_lora<T: Real>(store: &mut ParamStore<T>, fully_connected: bool, scale: f64) -> Result<usize> {
    let prefixes: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_suffix(".lora.A.0"))
        .map(str::to_string)
        .collect();
    for prefix in &prefixes {
        let set = fclora::read_branches(store, prefix, fully_connected, scale)?.expect("branch present");
        let key = format!("{prefix}.weight");
        let merged = set.merge(store.get(&key)?)?;
        let frozen = store.is_frozen(&key);
        store.unfreeze(&key);
        store.set(&key, merged)?;
        if frozen {
            store.freeze(&key)?;
        }
        fclora::remove_branches(store, prefix);
    }
    Ok(prefixes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                num_layers: 2,
                model_dim: 8,
                num_heads: 2,
                ffn_dim: 12,
                embed_dim: 6,
                patch_t: 2,
                patch_f: 3,
                max_patches: 10,
                positional: true,
                pool_hidden: 5,
            },
            lora: LoraConfig {
                rank: 2,
                branches: 3,
                ..LoraConfig::default()
            },
            adapter: AdapterConfig {
                groups: 3,
                ..AdapterConfig::default()
            },
        }
    }

    fn patches(l: usize, seed: u64) -> Tensor<f64> {
        normal_tensor(&[l, 6], 1.0, &mut stream(seed, "x"))
    }

    #[test]
    fn embedding_is_unit_and_length_preserved() {
        let spec = tiny();
        let store = init_model::<f64>(&spec, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(patches(7, 2));
        let f = forward(&mut g, &store, &spec, x).unwrap();
        assert_eq!(g.value(f.frames).shape(), &[7, 8]);
        let norm = diffcore::l2_norm(g.value(f.embedding).data());
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(f.probs.len(), 2);
    }

    #[test]
    fn plain_parameter_count() {
        let mut spec = tiny();
        spec.lora.enabled = false;
        spec.adapter.site = AdapterSite::None;
        let s = init_model::<f64>(&spec, 1).unwrap();
        let (d, f, p, n, e, ph, maxp) = (8, 12, 6, 2, 6, 5, 10);
        let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        let expected = (p * d + d) + maxp * d + n * per_layer + 2 * d + (d * ph + ph) + (ph + 1) + e * 2 * d;
        assert_eq!(s.num_scalars(), expected);
    }

    #[test]
    fn zero_delta_lora_is_bit_identical() {
        let mut spec = tiny();
        spec.adapter.site = AdapterSite::None;
        let with = init_model::<f64>(&spec, 3).unwrap();
        let mut plain = spec.clone();
        plain.lora.enabled = false;
        let without = init_model::<f64>(&plain, 3).unwrap();
        let a = embed(&with, &spec, patches(5, 4)).unwrap();
        let b = embed(&without, &plain, patches(5, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = tiny();
        let store = init_model::<f64>(&spec, 1).unwrap();
        let bad = normal_tensor::<f64>(&[4, 5], 1.0, &mut stream(1, "x"));
        assert!(embed(&store, &spec, bad).is_err());
        assert!(embed(&store, &spec, patches(11, 1)).is_err());
    }

    #[test]
    fn lora_mode_freezes_exactly_the_backbone() {
        let spec = tiny();
        let mut s = init_model::<f64>(&spec, 1).unwrap();
        apply_mode(&mut s, FinetuneMode::Lora).unwrap();
        assert!(s.is_frozen("layer.0.query.weight"));
        assert!(s.is_frozen("pos"));
        assert!(!s.is_frozen("layer.0.query.lora.A.0"));
        assert!(!s.is_frozen("layer.1.adapter.groups"));
        assert!(!s.is_frozen("proj.weight"));
        apply_mode(&mut s, FinetuneMode::Full).unwrap();
        assert_eq!(s.num_trainable_scalars(), s.num_scalars());
    }
}
