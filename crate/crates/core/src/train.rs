//! Training loop: SpecAug, encoder with LoRA and adapters, combined loss,
//! AdamW with warm-up, renormalization and the memory bank.

use std::collections::BTreeSet;

use diffcore::rng::{indexed_stream, stream};
use diffcore::{lr_schedule, AdamW, Checkpoint, DiffError, Graph, ParamStore, Real};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{FeatureConfig, RunConfig};
use crate::dataset::{patch_tensor, Dataset, Grid, NormStats};
use crate::encoder::{self, adapter_prefixes, apply_mode, is_encoder_param, Embedded, FinetuneMode, ModelSpec};
use crate::error::{AsdError, Result};
use crate::groupadapter::{renormalize_groups, renormalize_rows};
use crate::losses::{combined_loss, init_loss_params, kmeans_pp_seeds, BatchItem, LossConfig, MemoryBank, BANK, CODEBOOK};
use crate::synthdata::{label_space, mask_attributes, ClassKey, ManifestEntry, Split};

const ADAM_EPS: f64 = 1e-8;
const META_KEY: &str = "model";
const HISTORY_KEY: &str = "loss_history";
/// Most unlabeled chunks embedded to seed the codebook.
const CODEBOOK_SEED_POOL: usize = 1024;

/// Everything besides tensors that inference and resumption need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub spec: ModelSpec,
    pub features: FeatureConfig,
    pub norm: NormStats,
    pub classes: Vec<ClassKey>,
    /// Machine types the encoder was trained on.
    pub machines: Vec<String>,
    pub losses: LossConfig,
    pub mode: FinetuneMode,
    pub seed: u64,
}

impl ModelMeta {
    pub fn attach(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.attrs.insert(META_KEY.into(), serde_json::to_value(self)?);
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let v = ck
            .attrs
            .get(META_KEY)
            .ok_or_else(|| AsdError::Data("checkpoint has no model metadata".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Inference view: encoder parameters plus metadata.
#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            meta: ModelMeta::from_checkpoint(ck)?,
            store: ck.to_store(is_encoder_param)?,
        })
    }

    pub fn embed_grid(&self, grid: &Grid) -> Result<Embedded> {
        let x = patch_tensor(grid, &self.meta.norm, &self.meta.spec.encoder, None)?;
        encoder::embed(&self.store, &self.meta.spec, x)
    }

    /// One embedding per chunk.
    pub fn embed_clip(&self, chunks: &[Grid]) -> Result<Vec<Embedded>> {
        chunks.iter().map(|g| self.embed_grid(g)).collect()
    }
}

/// Machine types the encoder trains on: the configured list, or every type
/// in the corpus that is not held out.
pub fn training_machines(cfg: &RunConfig, data: &Dataset) -> Result<Vec<String>> {
    let present: BTreeSet<&str> = data.manifest.iter().map(|e| e.machine_type.as_str()).collect();
    let machines: Vec<String> = match &cfg.training.machines {
        Some(list) => {
            if let Some(m) = list.iter().find(|m| !present.contains(m.as_str())) {
                return Err(AsdError::Data(format!("training machine {m} is not in the manifest")));
            }
            list.clone()
        }
        None => {
            let held: BTreeSet<&str> = cfg
                .data
                .corpus
                .machines
                .iter()
                .filter(|m| m.held_out)
                .map(|m| m.name.as_str())
                .collect();
            present.into_iter().filter(|m| !held.contains(m)).map(str::to_string).collect()
        }
    };
    if machines.is_empty() {
        return Err(AsdError::Data("no machine types to train on".into()));
    }
    Ok(machines)
}

/// One training chunk and its class, if its attribute is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainItem {
    pub clip: usize,
    pub chunk: usize,
    pub label: Option<usize>,
}

fn class_of(e: &ManifestEntry, classes: &[ClassKey]) -> Option<usize> {
    let a = e.attribute.as_ref()?;
    classes
        .iter()
        .position(|c| c.machine_type == e.machine_type && c.machine_id == e.machine_id && &c.attribute == a)
}

/// Train-split chunks of the training machines after attribute masking.
/// Unlabeled chunks are dropped when the contrastive term is off.
pub fn train_items(cfg: &RunConfig, meta: &ModelMeta, data: &Dataset) -> Result<Vec<TrainItem>> {
    let masked = mask_attributes(&data.manifest, &cfg.data.mask_attributes);
    let mut items = Vec::new();
    for (i, e) in masked.iter().enumerate() {
        if e.split != Split::Train || !meta.machines.contains(&e.machine_type) {
            continue;
        }
        let label = class_of(e, &meta.classes);
        if e.attribute.is_some() && label.is_none() {
            return Err(AsdError::Data(format!("{}: attribute outside the label space", e.clip_id)));
        }
        if label.is_none() && !meta.losses.use_dlcl {
            continue;
        }
        for c in 0..data.features[i].len() {
            items.push(TrainItem { clip: i, chunk: c, label });
        }
    }
    if items.is_empty() {
        return Err(AsdError::Data("no training chunks".into()));
    }
    Ok(items)
}

/// Per-step summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub aam: f64,
    pub dlcl: f64,
    pub dlcl_active: bool,
    pub pseudo_labels: Vec<usize>,
}

/// Mutable training state; everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub meta: ModelMeta,
    /// Encoder and loss parameters.
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub bank: MemoryBank,
    pub step: u64,
    pub losses: Vec<f64>,
}

fn with_step(step: u64) -> impl Fn(AsdError) -> AsdError {
    move |e| match e {
        AsdError::Diff(DiffError::NonFiniteGradient(n)) => {
            AsdError::Numeric(format!("non-finite gradient for {n} at step {step}"))
        }
        AsdError::Numeric(m) => AsdError::Numeric(format!("{m} at step {step}")),
        other => other,
    }
}

impl TrainState {
    /// Fresh state. With `base`, encoder weights start from that checkpoint:
    /// its LoRA branches are merged first, then branches and adapters of the
    /// current spec are attached where missing.
    pub fn init(cfg: &RunConfig, data: &Dataset, base: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.model_spec();
        let seed = cfg.training.seed;
        let machines = training_machines(cfg, data)?;
        let masked = mask_attributes(&data.manifest, &cfg.data.mask_attributes);
        let train: Vec<ManifestEntry> = masked
            .iter()
            .filter(|e| e.split == Split::Train && machines.contains(&e.machine_type))
            .cloned()
            .collect();
        let classes = label_space(&train)?;
        let (mut store, norm) = match base {
            Some(ck) => {
                let prev = ModelMeta::from_checkpoint(ck)?;
                if prev.spec.encoder != spec.encoder {
                    return Err(AsdError::Config("base checkpoint encoder differs from encoder config".into()));
                }
                if prev.features != cfg.features {
                    log::warn!("feature settings differ from the base checkpoint; using the current ones");
                }
                let mut s: ParamStore<f32> = ck.to_store(is_encoder_param)?;
                let merged = encoder::merge_lora(&mut s, prev.spec.lora.fully_connected, prev.spec.lora.scale)?;
                if merged > 0 {
                    log::info!("merged {merged} LoRA site(s) of the base checkpoint");
                }
                encoder::attach_lora(&mut s, &spec, seed)?;
                encoder::attach_adapters(&mut s, &spec, seed)?;
                (s, prev.norm)
            }
            None => {
                let s = encoder::init_model(&spec, seed)?;
                let grids = data
                    .manifest
                    .iter()
                    .zip(&data.features)
                    .filter(|(e, _)| e.split == Split::Train && machines.contains(&e.machine_type))
                    .flat_map(|(_, f)| f.iter());
                (s, NormStats::fit(grids)?)
            }
        };
        apply_mode(&mut store, cfg.mode())?;
        init_loss_params(&mut store, classes.len(), spec.encoder.embed_dim, &cfg.losses, seed)?;
        let meta = ModelMeta {
            spec,
            features: cfg.features.clone(),
            norm,
            classes,
            machines,
            losses: cfg.losses.clone(),
            mode: cfg.mode(),
            seed,
        };
        let t = &cfg.training;
        let mut state = Self {
            meta,
            store,
            opt: AdamW::new(t.betas, ADAM_EPS, t.weight_decay),
            bank: MemoryBank::new(cfg.losses.bank_size),
            step: 0,
            losses: Vec::new(),
        };
        state.seed_codebook(cfg, data)?;
        Ok(state)
    }

    /// Places codebook rows on k-means++ picks among the initial embeddings
    /// of unlabeled training chunks. Rows with no pick keep their random draw.
    fn seed_codebook(&mut self, cfg: &RunConfig, data: &Dataset) -> Result<()> {
        if !cfg.losses.use_dlcl {
            return Ok(());
        }
        let unlabeled: Vec<TrainItem> = train_items(cfg, &self.meta, data)?
            .into_iter()
            .filter(|i| i.label.is_none())
            .collect();
        if unlabeled.is_empty() {
            return Ok(());
        }
        let stride = unlabeled.len().div_ceil(CODEBOOK_SEED_POOL);
        let model = self.model()?;
        let unit = unlabeled
            .iter()
            .step_by(stride)
            .map(|it| model.embed_grid(&data.features[it.clip][it.chunk]).map(|e| e.embedding))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream(self.meta.seed, "codebook.seed");
        let picks = kmeans_pp_seeds(&unit, cfg.losses.n_q, &mut rng);
        let codebook = self.store.get_mut(CODEBOOK)?;
        for (row, &i) in picks.iter().enumerate() {
            for (c, &v) in codebook.row_slice_mut(row).iter_mut().zip(&unit[i]) {
                *c = f32::lit(v);
            }
        }
        log::debug!("codebook: seeded {} of {} rows from unlabeled chunks", picks.len(), cfg.losses.n_q);
        Ok(())
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let meta = ModelMeta::from_checkpoint(ck)?;
        let store = ck.to_store(|n| !n.starts_with("opt.") && n != BANK)?;
        let t = &cfg.training;
        let mut opt = AdamW::new(t.betas, ADAM_EPS, t.weight_decay);
        opt.restore(
            ck.step,
            ck.with_prefix("opt.").map(|e| (e.name.clone(), e.tensor.cast::<f32>())),
        );
        let bank = match ck.get(BANK) {
            Some(e) => MemoryBank::from_tensor(meta.losses.bank_size, &e.tensor),
            None => MemoryBank::new(meta.losses.bank_size),
        };
        let losses = match ck.attrs.get(HISTORY_KEY) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Vec::new(),
        };
        Ok(Self {
            meta,
            store,
            opt,
            bank,
            step: ck.step,
            losses,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store, self.step);
        for (name, t) in self.opt.state_tensors() {
            ck.push(name, t.cast(), false);
        }
        if let Some(t) = self.bank.to_tensor::<f64>() {
            ck.push(BANK, t, false);
        }
        self.meta.attach(&mut ck)?;
        ck.attrs.insert(HISTORY_KEY.into(), serde_json::to_value(&self.losses)?);
        Ok(ck)
    }

    /// Inference model with the current parameters.
    pub fn model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for (n, t) in self.store.iter().filter(|(n, _)| is_encoder_param(n)) {
            store.insert(n.clone(), t.clone())?;
            if self.store.is_frozen(n) {
                store.freeze(n)?;
            }
        }
        Ok(Model {
            meta: self.meta.clone(),
            store,
        })
    }

    /// One optimizer step on a batch drawn from `items`.
    pub fn train_step(&mut self, cfg: &RunConfig, data: &Dataset, items: &[TrainItem]) -> Result<StepRecord> {
        let step = self.step;
        let seed = self.meta.seed;
        let t = &cfg.training;
        let lr = lr_schedule(step, t.lr, t.warmup_steps);
        let mut pick = indexed_stream(seed, "batch", step);
        let batch: Vec<TrainItem> = (0..t.batch_size).map(|_| items[pick.random_range(0..items.len())]).collect();
        let policy = self.meta.features.specaug;
        let spec = &self.meta.spec;
        let mut g = Graph::<f32>::new();
        let mut inputs = Vec::with_capacity(batch.len());
        for (i, it) in batch.iter().enumerate() {
            let mut rng = indexed_stream(seed, &format!("specaug/{step}"), i as u64);
            let aug = policy.enabled.then_some((&policy, &mut rng));
            let x = patch_tensor(&data.features[it.clip][it.chunk], &self.meta.norm, &spec.encoder, aug)?;
            let x = g.constant(x);
            let f = encoder::forward(&mut g, &self.store, spec, x).map_err(with_step(step))?;
            inputs.push(BatchItem {
                embedding: f.embedding,
                label: it.label,
            });
        }
        let bl = combined_loss(&mut g, &self.store, &inputs, &self.bank, &self.meta.losses)?;
        let loss = g.scalar(bl.loss).as_f64();
        if !loss.is_finite() {
            return Err(AsdError::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(bl.loss).map_err(|e| with_step(step)(e.into()))?;
        self.opt
            .step(&mut self.store, &grads, lr)
            .map_err(|e| with_step(step)(e.into()))?;
        let mut rng = indexed_stream(seed, "renorm", step);
        for prefix in adapter_prefixes(&self.store) {
            renormalize_groups(&mut self.store, &prefix, &mut rng)?;
        }
        if self.store.contains(CODEBOOK) {
            let redrawn = renormalize_rows(self.store.get_mut(CODEBOOK)?, &mut rng);
            if redrawn > 0 {
                log::warn!("codebook: re-initialized {redrawn} zero-norm row(s)");
            }
        }
        for it in inputs.iter().filter(|i| i.label.is_some()) {
            self.bank.push(&g.value(it.embedding).to_f64_vec());
        }
        self.step += 1;
        self.losses.push(loss);
        Ok(StepRecord {
            step,
            lr,
            loss,
            aam: bl.aam,
            dlcl: bl.dlcl,
            dlcl_active: bl.dlcl_active,
            pseudo_labels: bl.pseudo_labels,
        })
    }
}

/// Runs steps until `cfg.training.steps`, calling `hook` after each one.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut state: TrainState,
    mut hook: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<TrainState> {
    let items = train_items(cfg, &state.meta, data)?;
    let labeled = items.iter().filter(|i| i.label.is_some()).count();
    log::info!(
        "training on {} chunks ({labeled} labeled) from {}, {} classes, {} trainable scalars",
        items.len(),
        state.meta.machines.join(","),
        state.meta.classes.len(),
        state.store.num_trainable_scalars()
    );
    while state.step < cfg.training.steps {
        let rec = state.train_step(cfg, data, &items)?;
        if cfg.training.log_every > 0 && (rec.step % cfg.training.log_every == 0 || state.step == cfg.training.steps) {
            log::info!(
                "step {:>6}  loss {:.4}  aam {:.4}  dlcl {:.4}  lr {:.2e}",
                rec.step,
                rec.loss,
                rec.aam,
                rec.dlcl,
                rec.lr
            );
        }
        hook(&state, &rec)?;
    }
    Ok(state)
}

/// Untrained model with the statistics a trained one would use; the
/// frozen-random-encoder baseline.
pub fn random_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let mut c = cfg.clone();
    c.training.steps = 0;
    TrainState::init(&c, data, None)?.model()
}

/// Moving average over `window` steps ending at `end` (exclusive).
pub fn moving_average(losses: &[f64], end: usize, window: usize) -> Option<f64> {
    let end = end.min(losses.len());
    let start = end.checked_sub(window.max(1))?;
    Some(losses[start..end].iter().sum::<f64>() / (end - start) as f64)
}
