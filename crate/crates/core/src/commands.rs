//! File-level commands over a work directory. Each reads the artifacts of
//! earlier stages and writes its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use diffcore::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::backend::DetectorIndex;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::encoder::{self, is_base_param, is_encoder_param};
use crate::groupadapter::AdapterSite;
use crate::error::{AsdError, Result};
use crate::losses::offline_pl_baseline;
use crate::metrics::{dcase_report, hmean, mean, roc_curve, EvalRecord, MetricReport, ReportMode};
use crate::pipeline::{self, Embeddings, ScoreRow};
use crate::plots;
use crate::synthdata::{read_manifest, write_corpus, ManifestEntry, Split, Truth};
use crate::train::{self, Model, StepRecord, TrainState};

pub const MODEL: &str = "model.ckpt";
pub const CHECKPOINTS: &str = "checkpoints";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EMBEDDINGS: &str = "embeddings.ckpt";
pub const INDEX: &str = "index.json";
pub const SCORES: &str = "scores.csv";
pub const REPORT: &str = "report";
pub const GROUPS: &str = "groups.csv";
pub const ABLATION: &str = "ablation.csv";

/// All command paths resolve against this root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.path(&cfg.data.dir)
    }

    /// Path of an artifact that an earlier stage must have written.
    pub fn require(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(AsdError::MissingArtifact(p))
        }
    }

    fn ensure_parent(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| AsdError::io(dir, e))?;
        }
        Ok(())
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel);
        self.ensure_parent(&p)?;
        fs::write(&p, bytes).map_err(|e| AsdError::io(&p, e))?;
        Ok(p)
    }

    fn manifest(&self, cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
        read_manifest(&self.require(Path::new(&cfg.data.dir).join("manifest.jsonl"))?)
    }
}

fn read_checkpoint(ws: &Workspace, rel: &str) -> Result<Checkpoint> {
    Ok(Checkpoint::read(&ws.require(rel)?)?)
}

/// Per-machine counts for a manifest.
pub fn manifest_summary(manifest: &[ManifestEntry]) -> String {
    #[derive(Default)]
    struct Counts {
        train: usize,
        target: usize,
        test: usize,
        anomalous: usize,
    }
    let mut by: BTreeMap<&str, Counts> = BTreeMap::new();
    for e in manifest {
        let c = by.entry(&e.machine_type).or_default();
        match e.split {
            Split::Train => {
                c.train += 1;
                c.target += usize::from(e.domain == crate::synthdata::Domain::Target);
            }
            Split::Test => {
                c.test += 1;
                c.anomalous += usize::from(e.truth == Truth::Anomalous);
            }
        }
    }
    let mut s = String::new();
    for (m, c) in by {
        let _ = writeln!(
            s,
            "{m:<8} train {:>4} ({} target)  test {:>4} ({} anomalous)",
            c.train, c.target, c.test, c.anomalous
        );
    }
    s
}

/// Renders the synthetic corpus into the data directory.
pub fn cmd_gen_data(ws: &Workspace, cfg: &RunConfig, force: bool) -> Result<String> {
    let dir = ws.data_dir(cfg);
    if dir.join("manifest.jsonl").exists() {
        if !force {
            return Err(AsdError::Exists(dir));
        }
        fs::remove_dir_all(&dir).map_err(|e| AsdError::io(&dir, e))?;
    }
    let manifest = write_corpus(&dir, &cfg.data.corpus, cfg.data.seed)?;
    Ok(manifest_summary(&manifest))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Base checkpoint whose encoder weights initialize the run.
    pub init: Option<String>,
    /// Checkpoint to continue from.
    pub resume: Option<String>,
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn step_log(records: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,loss,aam,dlcl,dlcl_active\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.lr, r.loss, r.aam, r.dlcl, r.dlcl_active);
    }
    s
}

pub fn cmd_train(ws: &Workspace, cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let data = Dataset::load(&ws.data_dir(cfg), &cfg.features)?;
    let state = match (&opts.resume, &opts.init) {
        (Some(_), Some(_)) => return Err(AsdError::Config("--resume and --init are mutually exclusive".into())),
        (Some(r), None) => TrainState::from_checkpoint(&read_checkpoint(ws, r)?, cfg)?,
        (None, Some(i)) => TrainState::init(cfg, &data, Some(&read_checkpoint(ws, i)?))?,
        (None, None) => TrainState::init(cfg, &data, None)?,
    };
    let every = cfg.training.checkpoint_every;
    let mut records = Vec::new();
    let state = train::train(cfg, &data, state, |st, rec| {
        records.push(rec.clone());
        if every > 0 && st.step % every == 0 && st.step < cfg.training.steps {
            let p = ws.path(Path::new(CHECKPOINTS).join(format!("step_{:06}.ckpt", st.step)));
            ws.ensure_parent(&p)?;
            st.to_checkpoint()?.write(&p)?;
        }
        Ok(())
    })?;
    ws.write(TRAIN_LOG, step_log(&records))?;
    let mut ck = state.to_checkpoint()?;
    ck.attrs.insert("tag".into(), "final".into());
    let out = ws.path(opts.out.as_deref().unwrap_or(MODEL));
    ws.ensure_parent(&out)?;
    ck.write(&out)?;
    Ok(TrainSummary {
        steps: state.step,
        first_loss: state.losses.first().copied(),
        last_loss: state.losses.last().copied(),
        checkpoint: out,
    })
}

/// Embeds every clip with the model checkpoint; returns the clip count.
pub fn cmd_embed(ws: &Workspace, cfg: &RunConfig, model: &str, out: &str) -> Result<usize> {
    let model = Model::from_checkpoint(&read_checkpoint(ws, model)?)?;
    let data = Dataset::load(&ws.data_dir(cfg), &model.meta.features)?;
    let emb = pipeline::embed_dataset(&model, &data)?;
    let p = ws.path(out);
    ws.ensure_parent(&p)?;
    emb.to_checkpoint()?.write(&p)?;
    Ok(emb.clips.len())
}

fn read_embeddings(ws: &Workspace, rel: &str) -> Result<Embeddings> {
    Embeddings::from_checkpoint(&read_checkpoint(ws, rel)?)
}

/// Fits the detector on train normals; returns the partition count.
pub fn cmd_fit_backend(ws: &Workspace, cfg: &RunConfig, embeddings: &str, out: &str) -> Result<usize> {
    let manifest = ws.manifest(cfg)?;
    let emb = read_embeddings(ws, embeddings)?;
    let index = pipeline::fit_index(&manifest, &emb, &cfg.backend)?;
    ws.write(out, serde_json::to_vec(&index)?)?;
    Ok(index.partitions.len())
}

/// Scores every test clip; returns the row count.
pub fn cmd_score(ws: &Workspace, cfg: &RunConfig, index: &str, embeddings: &str, out: &str) -> Result<usize> {
    let manifest = ws.manifest(cfg)?;
    let path = ws.require(index)?;
    let bytes = fs::read(&path).map_err(|e| AsdError::io(&path, e))?;
    let index: DetectorIndex = serde_json::from_slice(&bytes)?;
    let emb = read_embeddings(ws, embeddings)?;
    let rows = pipeline::score_clips(&index, &manifest, &emb, &cfg.backend)?;
    let p = ws.path(out);
    ws.ensure_parent(&p)?;
    pipeline::write_scores(&p, &rows)?;
    Ok(rows.len())
}

/// Writes `<prefix>.txt`, `<prefix>.csv`, `<prefix>.json` and SVG plots.
pub fn cmd_eval(ws: &Workspace, cfg: &RunConfig, scores: &str, prefix: &str) -> Result<MetricReport> {
    let manifest = ws.manifest(cfg)?;
    let rows = pipeline::read_scores(&ws.require(scores)?)?;
    let records = pipeline::eval_records(&manifest, &rows)?;
    let report = dcase_report(&records, cfg.metrics.mode, cfg.metrics.p)?;
    ws.write(format!("{prefix}.txt"), report.to_table())?;
    ws.write(format!("{prefix}.csv"), report.to_csv())?;
    ws.write(format!("{prefix}.json"), serde_json::to_vec_pretty(&report)?)?;
    ws.write("plots/bars.svg", plots::bar_chart(&report))?;
    let machines: BTreeSet<&str> = records.iter().map(|r| r.machine_type.as_str()).collect();
    for m in machines {
        let (mut n, mut a) = (Vec::new(), Vec::new());
        for r in records.iter().filter(|r| r.machine_type == m) {
            match r.truth {
                Truth::Normal => n.push(r.score),
                Truth::Anomalous => a.push(r.score),
                Truth::Unknown => {}
            }
        }
        ws.write(format!("plots/roc_{m}.svg"), plots::roc_chart(&format!("ROC {m}"), &roc_curve(&n, &a)))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSummary {
    pub sites: usize,
    pub scalars_before: usize,
    pub scalars_after: usize,
}

/// Folds LoRA branches into base weights. Optimizer state and the memory
/// bank are dropped; the result is for inference.
pub fn cmd_merge_lora(ws: &Workspace, input: &str, out: &str) -> Result<MergeSummary> {
    let ck = read_checkpoint(ws, input)?;
    let mut meta = train::ModelMeta::from_checkpoint(&ck)?;
    let mut store = ck.to_store::<f32>(is_encoder_param)?;
    let before = store.num_scalars();
    let sites = encoder::merge_lora(&mut store, meta.spec.lora.fully_connected, meta.spec.lora.scale)?;
    if sites == 0 {
        log::warn!("{input} has no LoRA branches; writing it unchanged");
    }
    meta.spec.lora.enabled = false;
    let mut merged = Checkpoint::from_store(&store, ck.step);
    meta.attach(&mut merged)?;
    if let Some(tag) = ck.attrs.get("tag") {
        merged.attrs.insert("tag".into(), tag.clone());
    }
    let p = ws.path(out);
    ws.ensure_parent(&p)?;
    merged.write(&p)?;
    Ok(MergeSummary {
        sites,
        scalars_before: before,
        scalars_after: store.num_scalars(),
    })
}

/// Scalars of the backbone alone, i.e. what a merged model carries.
pub fn base_scalars(store: &diffcore::ParamStore<f32>) -> usize {
    store.iter().filter(|(n, _)| is_base_param(n)).map(|(_, t)| t.numel()).sum()
}

/// Writes the mean group distribution per clip for one adapter application
/// (the last one by default).
pub fn cmd_inspect_groups(ws: &Workspace, cfg: &RunConfig, model: &str, out: &str, layer: Option<usize>) -> Result<usize> {
    let model = Model::from_checkpoint(&read_checkpoint(ws, model)?)?;
    if model.meta.spec.adapter.site == AdapterSite::None {
        return Err(AsdError::Config("model has no group adapter".into()));
    }
    let data = Dataset::load(&ws.data_dir(cfg), &model.meta.features)?;
    let n_g = model.meta.spec.adapter.groups;
    let mut s = String::from("clip_id,machine_type");
    for j in 1..=n_g {
        let _ = write!(s, ",p_{j}");
    }
    s.push('\n');
    for (e, chunks) in data.manifest.iter().zip(&data.features) {
        let emb = model.embed_clip(chunks)?;
        let apps = emb[0].probs.len();
        let l = layer.unwrap_or(apps - 1);
        if l >= apps {
            return Err(AsdError::Config(format!("adapter layer {l} out of range (0..{apps})")));
        }
        let mut p = vec![0.0; n_g];
        for x in &emb {
            p.iter_mut().zip(&x.probs[l]).for_each(|(a, b)| *a += b / emb.len() as f64);
        }
        let _ = write!(s, "{},{}", e.clip_id, e.machine_type);
        for v in p {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    ws.write(out, s)?;
    Ok(data.manifest.len())
}

/// Result of one in-memory train/detect/evaluate run.
pub struct Experiment {
    pub state: TrainState,
    pub model: Model,
    pub embeddings: Embeddings,
    pub scores: Vec<ScoreRow>,
    pub records: Vec<EvalRecord>,
    /// `None` when the configured aggregate is undefined, e.g. a harmonic
    /// mean over a zero pAUC.
    pub report: Option<MetricReport>,
}

pub fn run_experiment(cfg: &RunConfig, data: &Dataset, base: Option<&Checkpoint>) -> Result<Experiment> {
    let state = TrainState::init(cfg, data, base)?;
    let state = train::train(cfg, data, state, |_, _| Ok(()))?;
    let model = state.model()?;
    let (embeddings, scores) = pipeline::detect(&model, data, &cfg.backend)?;
    let records = pipeline::eval_records(&data.manifest, &scores)?;
    let report = match dcase_report(&records, cfg.metrics.mode, cfg.metrics.p) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("no aggregate report: {e}");
            None
        }
    };
    Ok(Experiment {
        state,
        model,
        embeddings,
        scores,
        records,
        report,
    })
}

/// Replaces the hidden attributes of `machines` with static k-means
/// clusters of the model's clip embeddings (`k` per machine type).
pub fn pseudo_label(data: &Dataset, emb: &Embeddings, machines: &[String], k: usize, seed: u64) -> Result<Dataset> {
    let mut out = data.clone();
    for m in machines {
        let idx: Vec<usize> = out
            .manifest
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train && &e.machine_type == m)
            .map(|(i, _)| i)
            .collect();
        let vecs = idx
            .iter()
            .map(|&i| emb.clip_mean(&out.manifest[i].clip_id))
            .collect::<Result<Vec<_>>>()?;
        let labels = offline_pl_baseline(&vecs, k.min(vecs.len()), seed)?;
        for (&i, c) in idx.iter().zip(labels) {
            let e = &mut out.manifest[i];
            if e.attribute_truth.is_none() {
                e.attribute_truth = e.attribute.clone();
            }
            e.attribute = Some(format!("pl{c}"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rank,
    Branches,
    FullyConnected,
    Frozen,
    /// Values are `site/groups`, e.g. `ffn/8`.
    AdapterSite,
    /// `aam`, `pl` or `dlcl`.
    Objective,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| AsdError::Config(format!("unknown ablation axis `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "rank",
            Self::Branches => "branches",
            Self::FullyConnected => "fully_connected",
            Self::Frozen => "frozen",
            Self::AdapterSite => "adapter_site",
            Self::Objective => "objective",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        match self {
            Self::Rank => v(&["8", "16", "32", "64"]),
            Self::Branches => v(&["1", "4", "8", "16"]),
            Self::FullyConnected => v(&["on", "off"]),
            Self::Frozen => v(&["off", "on"]),
            Self::AdapterSite => {
                let mut out = vec!["none/0".to_string()];
                for site in ["mha", "ffn", "transformer"] {
                    for g in [4, 8, 16] {
                        out.push(format!("{site}/{g}"));
                    }
                }
                out
            }
            Self::Objective => v(&["aam", "pl", "dlcl"]),
        }
    }
}

fn parse_on_off(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(AsdError::Config(format!("expected on/off, got `{v}`"))),
    }
}

fn parse_num(v: &str) -> Result<usize> {
    v.parse().map_err(|_| AsdError::Config(format!("expected an integer, got `{v}`")))
}

/// The config for one grid cell. Objective `pl` is returned with the
/// contrastive term off; the relabeling happens in [`run_ablation`].
pub fn ablation_config(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match axis {
        AblationAxis::Rank => c.fclora.rank = parse_num(value)?,
        AblationAxis::Branches => c.fclora.branches = parse_num(value)?,
        AblationAxis::FullyConnected => c.fclora.fully_connected = parse_on_off(value)?,
        AblationAxis::Frozen => c.fclora.frozen = parse_on_off(value)?,
        AblationAxis::AdapterSite => {
            let (site, groups) = value
                .split_once('/')
                .ok_or_else(|| AsdError::Config(format!("expected site/groups, got `{value}`")))?;
            c.adapter.site = serde_json::from_value(serde_json::Value::String(site.into()))
                .map_err(|_| AsdError::Config(format!("unknown adapter site `{site}`")))?;
            if c.adapter.site != AdapterSite::None {
                c.adapter.groups = parse_num(groups)?;
            }
        }
        AblationAxis::Objective => match value {
            "aam" | "pl" => c.losses.use_dlcl = false,
            "dlcl" => c.losses.use_dlcl = true,
            _ => return Err(AsdError::Config(format!("unknown objective `{value}`"))),
        },
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub status: String,
    /// Aggregate over all machines, or over masked machines for the
    /// objective axis when attributes are masked.
    pub score: Option<f64>,
    pub mean_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub axes: Vec<(AblationAxis, Vec<String>)>,
    pub seeds: Vec<u64>,
    /// k-means clusters per machine for the `pl` objective.
    pub pl_clusters: usize,
}

/// Aggregate and mean AUC over `machines` (all when empty). A zero value
/// makes the harmonic mean zero, its limit, instead of an error.
pub fn subset_scores(records: &[EvalRecord], mode: ReportMode, p: f64, machines: &[String]) -> Result<(f64, f64)> {
    let picked: Vec<EvalRecord> = records
        .iter()
        .filter(|r| machines.is_empty() || machines.contains(&r.machine_type))
        .cloned()
        .collect();
    let report = dcase_report(&picked, ReportMode::Mean, p)?;
    let values: Vec<f64> = report.machines.iter().flat_map(|m| [m.auc, m.pauc]).collect();
    let aucs: Vec<f64> = report.machines.iter().map(|m| m.auc).collect();
    let agg = match mode {
        ReportMode::Mean => mean(&values)?,
        ReportMode::Hmean if values.iter().any(|&v| v == 0.0) => 0.0,
        ReportMode::Hmean => hmean(&values)?,
    };
    Ok((agg, mean(&aucs)?))
}

/// One train/detect/evaluate run per (axis value, seed).
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, base: Option<&Checkpoint>, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (axis, values) in &grid.axes {
        for value in values {
            for &seed in &grid.seeds {
                let mut row = AblationRow {
                    axis: axis.name().into(),
                    value: value.clone(),
                    seed,
                    status: "ok".into(),
                    score: None,
                    mean_auc: None,
                };
                let mut seeded = cfg.clone();
                seeded.training.seed = seed;
                let c = match ablation_config(&seeded, *axis, value) {
                    Ok(c) => c,
                    Err(e) => {
                        row.status = format!("invalid: {e}");
                        rows.push(row);
                        continue;
                    }
                };
                log::info!("ablation {}={value} seed {seed}", axis.name());
                let focus = if *axis == AblationAxis::Objective {
                    c.data.mask_attributes.clone()
                } else {
                    Vec::new()
                };
                let outcome = if *axis == AblationAxis::Objective && value == "pl" {
                    run_experiment(&c, data, base).and_then(|first| {
                        let relabeled =
                            pseudo_label(data, &first.embeddings, &c.data.mask_attributes, grid.pl_clusters, seed)?;
                        let mut c2 = c.clone();
                        c2.data.mask_attributes.clear();
                        run_experiment(&c2, &relabeled, base)
                    })
                } else {
                    run_experiment(&c, data, base)
                };
                match outcome.and_then(|x| subset_scores(&x.records, c.metrics.mode, c.metrics.p, &focus)) {
                    Ok((score, auc)) => {
                        row.score = Some(score);
                        row.mean_auc = Some(auc);
                    }
                    Err(e) => row.status = format!("failed: {e}"),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn cmd_ablate(ws: &Workspace, cfg: &RunConfig, grid: &AblationGrid, init: Option<&str>, out: &str) -> Result<Vec<AblationRow>> {
    let data = Dataset::load(&ws.data_dir(cfg), &cfg.features)?;
    let base = init.map(|p| read_checkpoint(ws, p)).transpose()?;
    let rows = run_ablation(cfg, &data, base.as_ref(), grid)?;
    let p = ws.path(out);
    ws.ensure_parent(&p)?;
    let mut w = csv::Writer::from_path(&p)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AsdError::io(&p, e))?;
    Ok(rows)
}
