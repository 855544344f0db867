//! Experiment harness: scheduler sweeps, the negative-perturbation protocol
//! and the trajectory study.
//!
//! Every random draw in a run is derived from the master seed through
//! [`derive_seed`], keyed by role and grid position, never by execution
//! order. Cells of a grid share their replicate's sampling seeds, so two
//! cells differ only in the guidance schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    argmax, save_dataset, DataError, DatasetSpec, EmbedSpec, Embedder, LabeledDataset,
    OracleClassifier, OracleSpec,
};
use crate::diffusion::{
    sample_batch, Condition, DiffusionError, NoiseKind, NoiseSchedule, SamplerSpec,
};
use crate::eval::{
    frechet_distance, gaussian_stats, is_from_posteriors, pca_fit, trajectory_diagnostics,
    EvalError, GaussianStats, Pca, UTURN_TAU,
};
use crate::nn::{
    load_params, save_params, train, AdamConfig, Architecture, Denoiser, FormatError, LrSchedule,
    NnError, TrainConfig,
};
use crate::rng::{derive_seed, seeded};
use crate::sched::{GuidanceSchedule, SchedError, ScheduleShape, ShapeKind, ZeroInterval};

#[derive(Debug, Error)]
pub enum XpError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run directory already has a manifest: {0}")]
    ManifestExists(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl XpError {
    /// Whether the failure lies in the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            XpError::Config(_)
                | XpError::Data(DataError::Config(_))
                | XpError::Nn(NnError::Config(_))
                | XpError::Diffusion(DiffusionError::Config(_))
                | XpError::Eval(EvalError::Config(_))
                | XpError::Sched(SchedError::InvalidParam(_))
        )
    }
}

fn config_err(msg: impl Into<String>) -> XpError {
    XpError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    /// Load parameters from this file instead of training.
    pub params_path: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let a = Architecture::new(1, 1);
        Self {
            hidden: a.hidden,
            time_dim: a.time_dim,
            class_dim: a.class_dim,
            params_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub p_uncond: f64,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            p_uncond: t.p_uncond,
            adam: t.adam,
            lr_schedule: t.lr_schedule,
            ema_decay: t.ema_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub horizon: u32,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::LinearBeta,
            horizon: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerEntry {
    pub shape: ShapeKind,
    #[serde(default)]
    pub param: Option<f64>,
}

impl SchedulerEntry {
    pub fn new(shape: ShapeKind, param: Option<f64>) -> Self {
        Self { shape, param }
    }

    pub fn schedule(&self, omega: f64, horizon: u32) -> Result<GuidanceSchedule, SchedError> {
        GuidanceSchedule::new(
            ScheduleShape::from_kind(self.shape, self.param)?,
            omega,
            horizon,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub schedulers: Vec<SchedulerEntry>,
    pub omegas: Vec<f64>,
    pub samples_per_class: usize,
    pub replicates: usize,
    /// Samples per diversity group within a class.
    pub diversity_group: usize,
    /// Record trajectories to compute U-turn and wander statistics.
    pub diagnostics: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            schedulers: vec![
                SchedulerEntry::new(ShapeKind::Static, None),
                SchedulerEntry::new(ShapeKind::Linear, None),
                SchedulerEntry::new(ShapeKind::Cosine, None),
            ],
            omegas: vec![1.1, 1.15, 1.2, 1.25, 1.3, 1.35],
            samples_per_class: 1000,
            replicates: 3,
            diversity_group: 10,
            diagnostics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    pub omega: f64,
    pub width: u32,
    /// Start timesteps of the intervals to zero; all intervals when absent.
    pub intervals: Option<Vec<u32>>,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            omega: 1.15,
            width: 50,
            intervals: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajSpec {
    pub scheduler: SchedulerEntry,
    pub omegas: Vec<f64>,
    pub seeds_per_class: usize,
    pub tau: f64,
}

impl Default for TrajSpec {
    fn default() -> Self {
        Self {
            scheduler: SchedulerEntry::new(ShapeKind::Static, None),
            omegas: vec![0.0, 50.0, 100.0],
            seeds_per_class: 8,
            tau: UTURN_TAU,
        }
    }
}

/// Declarative description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub noise: NoiseSpec,
    pub sampler: SamplerSpec,
    pub embed: EmbedSpec,
    pub oracle: OracleSpec,
    pub sweep: SweepSpec,
    pub perturb: PerturbSpec,
    pub traj: TrajSpec,
    /// Rayon worker threads for sub-runs; results do not depend on it.
    pub workers: usize,
    /// Rows sampled together in one batch.
    pub chunk: usize,
    /// Also write `dataset.bin` into the run directory.
    pub write_dataset: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            noise: NoiseSpec::default(),
            sampler: SamplerSpec::default(),
            embed: EmbedSpec::default(),
            oracle: OracleSpec::default(),
            sweep: SweepSpec::default(),
            perturb: PerturbSpec::default(),
            traj: TrajSpec::default(),
            workers: 1,
            chunk: 100,
            write_dataset: true,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Seed roles; each is mixed with the master seed.
mod stream {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const ORACLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const TRAJ: u64 = 5;
    pub const REPLICATE: u64 = 100;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub oracle: u64,
    pub split: u64,
    pub traj: u64,
    pub replicates: Vec<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), XpError> {
        let s = &self.sweep;
        if s.schedulers.is_empty() || s.omegas.is_empty() {
            return Err(config_err(
                "sweep.schedulers and sweep.omegas must be nonempty",
            ));
        }
        if s.samples_per_class < 2 {
            return Err(config_err("sweep.samples_per_class must be ≥ 2"));
        }
        if s.replicates == 0 {
            return Err(config_err("sweep.replicates must be ≥ 1"));
        }
        if s.diversity_group < 2 || s.diversity_group > s.samples_per_class {
            return Err(config_err(
                "sweep.diversity_group must be in 2..=sweep.samples_per_class",
            ));
        }
        let horizon = self.noise.horizon;
        for entry in &s.schedulers {
            for &w in &s.omegas {
                entry.schedule(w, horizon)?;
            }
        }
        if self.perturb.width == 0 || !horizon.is_multiple_of(self.perturb.width) {
            return Err(config_err(format!(
                "perturb.width {} must divide the horizon {horizon}",
                self.perturb.width
            )));
        }
        if let Some(starts) = &self.perturb.intervals {
            for &st in starts {
                if st % self.perturb.width != 0 || st >= horizon {
                    return Err(config_err(format!(
                        "perturb.intervals entry {st} is not an interval start"
                    )));
                }
            }
        }
        GuidanceSchedule::constant(self.perturb.omega, horizon)?;
        if self.traj.omegas.is_empty() || self.traj.seeds_per_class == 0 {
            return Err(config_err(
                "traj.omegas and traj.seeds_per_class must be nonempty",
            ));
        }
        if !(self.traj.tau > 0.0 && self.traj.tau < 1.0) {
            return Err(config_err("traj.tau must be in (0, 1)"));
        }
        for &w in &self.traj.omegas {
            self.traj.scheduler.schedule(w, horizon)?;
        }
        if self.workers == 0 || self.chunk == 0 {
            return Err(config_err("workers and chunk must be ≥ 1"));
        }
        NoiseSchedule::new(self.noise.kind, horizon)?;
        crate::diffusion::visit_timesteps(&self.sampler, horizon)?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            p_uncond: self.train.p_uncond,
            adam: self.train.adam.clone(),
            lr_schedule: self.train.lr_schedule,
            ema_decay: self.train.ema_decay,
            seed: derive_seed(self.seed, stream::TRAIN),
        }
    }

    pub fn seeds(&self, replicates: usize) -> ResolvedSeeds {
        let m = self.seed;
        ResolvedSeeds {
            data: derive_seed(m, stream::DATA),
            init: derive_seed(m, stream::INIT),
            train: derive_seed(m, stream::TRAIN),
            oracle: derive_seed(m, stream::ORACLE),
            split: derive_seed(m, stream::SPLIT),
            traj: derive_seed(m, stream::TRAJ),
            replicates: (0..replicates as u64)
                .map(|r| derive_seed(m, stream::REPLICATE + r))
                .collect(),
        }
    }

    /// SHA-256 over the canonical JSON of the config with the output
    /// directory blanked: where a run is written is not part of what it is.
    pub fn digest(&self) -> Result<String, XpError> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// Everything metrics are measured against: the oracle, the Gaussian fit of
/// the dataset embeddings, and the PCA basis for trajectories.
pub struct Reference {
    pub oracle: OracleClassifier,
    pub held_out_accuracy: f64,
    pub embedder: Embedder,
    pub stats: GaussianStats,
    /// Two-component PCA of the dataset embeddings.
    pub pca: Pca,
}

impl Reference {
    pub fn build(cfg: &RunConfig, dataset: &LabeledDataset) -> Result<Reference, XpError> {
        let seeds = cfg.seeds(0);
        let (train_split, held) = dataset.split(seeds.split);
        let oracle = OracleClassifier::train(&train_split, cfg.embed, &cfg.oracle, seeds.oracle)?;
        let held_out_accuracy = oracle.accuracy(&held);
        info!(
            "oracle accuracy: train {:.4}, held-out {:.4}",
            oracle.train_accuracy(),
            held_out_accuracy
        );
        let embedder = oracle.embedder().clone();
        let feats = embedder.embed_all(dataset.data().chunks(dataset.dim()));
        let stats = gaussian_stats(&feats)?;
        let pca = pca_fit(&feats, 2.min(embedder.output_dim()))?;
        Ok(Reference {
            oracle,
            held_out_accuracy,
            embedder,
            stats,
            pca,
        })
    }

    /// Embedding followed by the PCA projection.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.pca.project(&self.embedder.embed(x))
    }

    /// Metrics of labelled samples. Diversity groups are consecutive runs
    /// of `group` samples within each class; U-turn and wander means are
    /// NaN when no trajectories were recorded.
    pub fn metrics<V: AsRef<[f64]>>(
        &self,
        samples: &[V],
        labels: &[usize],
        group: usize,
        uturns: &[usize],
        wanders: &[f64],
    ) -> Result<CellMetrics, XpError> {
        let feats = self.embedder.embed_all(samples.iter().map(|s| s.as_ref()));
        self.metrics_from_features(&feats, labels, group, uturns, wanders)
    }

    fn metrics_from_features(
        &self,
        feats: &[Vec<f64>],
        labels: &[usize],
        group: usize,
        uturns: &[usize],
        wanders: &[f64],
    ) -> Result<CellMetrics, XpError> {
        if feats.len() != labels.len() || feats.is_empty() {
            return Err(XpError::Eval(EvalError::Input(
                "need one label per sample and at least one sample".into(),
            )));
        }
        if group < 2 {
            return Err(config_err("diversity group must be ≥ 2"));
        }
        let posteriors: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| self.oracle.posterior_from_features(f))
            .collect();
        let hits = posteriors
            .iter()
            .zip(labels)
            .filter(|(p, y)| argmax(p) == **y)
            .count();
        let mut by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
        for (f, &y) in feats.iter().zip(labels) {
            by_class.entry(y).or_default().push(f);
        }
        let groups: Vec<Vec<&Vec<f64>>> = by_class
            .values()
            .flat_map(|rows| {
                rows.chunks(group)
                    .filter(|g| g.len() >= 2)
                    .map(<[_]>::to_vec)
            })
            .collect();
        let mean = |v: &mut dyn Iterator<Item = f64>| {
            let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                sum / n as f64
            }
        };
        Ok(CellMetrics {
            fd: frechet_distance(&gaussian_stats(feats)?, &self.stats)?,
            adherence: hits as f64 / labels.len() as f64,
            is_analog: is_from_posteriors(&posteriors)?,
            diversity: crate::eval::diversity(&groups)?,
            uturn_mean: mean(&mut uturns.iter().map(|&u| u as f64)),
            wander_mean: mean(&mut wanders.iter().copied()),
        })
    }
}

/// Builds the denoiser for `dataset`: loaded from `model.params_path` when
/// set, trained otherwise. Returns the mean loss of the last 100 steps when
/// trained.
pub fn build_model(
    cfg: &RunConfig,
    dataset: &LabeledDataset,
    ns: &NoiseSchedule,
) -> Result<(Denoiser, Option<f64>), XpError> {
    let model = match &cfg.model.params_path {
        Some(path) => return Ok((load_params(path)?, None)),
        None => {
            let arch = Architecture {
                dim: dataset.dim(),
                hidden: cfg.model.hidden.clone(),
                time_dim: cfg.model.time_dim,
                class_dim: cfg.model.class_dim,
                classes: dataset.classes(),
            };
            Denoiser::new(arch, cfg.seeds(0).init)?
        }
    };
    let mut model = model;
    info!(
        "training {} parameters for {} steps",
        model.param_count(),
        cfg.train.steps
    );
    let report = train(
        &mut model,
        dataset.data(),
        dataset.labels(),
        ns,
        &cfg.train_config(),
    )?;
    let tail = report.losses.len().min(100);
    let last = report.losses[report.losses.len() - tail..]
        .iter()
        .sum::<f64>()
        / tail as f64;
    info!("final training loss {last:.5}");
    Ok((model, Some(last)))
}

/// Trained model plus the reference it is measured against.
pub struct Lab {
    pub cfg: RunConfig,
    pub dataset: LabeledDataset,
    pub model: Denoiser,
    pub ns: NoiseSchedule,
    pub refs: Reference,
    pub final_train_loss: Option<f64>,
    pub timings: Vec<(String, f64)>,
}

impl Lab {
    /// Generates the dataset, trains (or loads) the denoiser, and builds
    /// the reference.
    pub fn prepare(cfg: &RunConfig) -> Result<Lab, XpError> {
        cfg.validate()?;
        let mut timings = Vec::new();
        let clock = Instant::now();
        let dataset = cfg.data.generate(cfg.seeds(0).data)?;
        timings.push(("data".to_string(), clock.elapsed().as_secs_f64()));
        let ns = NoiseSchedule::new(cfg.noise.kind, cfg.noise.horizon)?;
        let clock = Instant::now();
        let (model, final_loss) = build_model(cfg, &dataset, &ns)?;
        timings.push(("train".to_string(), clock.elapsed().as_secs_f64()));
        Self::assemble(cfg, dataset, model, ns, final_loss, timings)
    }

    /// Builds a lab around an already-trained model.
    pub fn with_model(
        cfg: &RunConfig,
        dataset: LabeledDataset,
        model: Denoiser,
    ) -> Result<Lab, XpError> {
        cfg.validate()?;
        let ns = NoiseSchedule::new(cfg.noise.kind, cfg.noise.horizon)?;
        Self::assemble(cfg, dataset, model, ns, None, Vec::new())
    }

    fn assemble(
        cfg: &RunConfig,
        dataset: LabeledDataset,
        model: Denoiser,
        ns: NoiseSchedule,
        final_train_loss: Option<f64>,
        mut timings: Vec<(String, f64)>,
    ) -> Result<Lab, XpError> {
        if model.arch().dim != dataset.dim() || model.arch().classes != dataset.classes() {
            return Err(config_err("model architecture does not match the dataset"));
        }
        let clock = Instant::now();
        let refs = Reference::build(cfg, &dataset)?;
        timings.push(("reference".to_string(), clock.elapsed().as_secs_f64()));
        Ok(Lab {
            cfg: cfg.clone(),
            dataset,
            model,
            ns,
            refs,
            final_train_loss,
            timings,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.refs.project(x)
    }
}

/// Metrics of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub fd: f64,
    pub adherence: f64,
    pub is_analog: f64,
    pub diversity: f64,
    pub uturn_mean: f64,
    pub wander_mean: f64,
}

impl CellMetrics {
    const NAN: CellMetrics = CellMetrics {
        fd: f64::NAN,
        adherence: f64::NAN,
        is_analog: f64::NAN,
        diversity: f64::NAN,
        uturn_mean: f64::NAN,
        wander_mean: f64::NAN,
    };
}

/// One batch of a cell: rows `start..start + len` of class `class`.
#[derive(Debug, Clone, Copy)]
struct Chunk {
    cell: usize,
    class: usize,
    start: usize,
    len: usize,
}

struct ChunkOut {
    embeddings: Vec<Vec<f64>>,
    uturns: Vec<usize>,
    wanders: Vec<f64>,
}

/// A cell to evaluate: a schedule plus the replicate seed its samples use.
#[derive(Debug, Clone)]
pub struct CellJob {
    pub schedule: GuidanceSchedule,
    pub seed: u64,
}

/// Seed of row `index` of class `class` in a cell sampled with `seed`.
pub fn row_seed(seed: u64, class: usize, per_class: usize, index: usize) -> u64 {
    derive_seed(seed, (class * per_class + index) as u64)
}

fn run_chunk(
    lab: &Lab,
    job: &CellJob,
    chunk: Chunk,
    per_class: usize,
    diagnostics: bool,
    tau: f64,
) -> Result<ChunkOut, XpError> {
    let conds = vec![Condition::Class(chunk.class); chunk.len];
    let mut rngs: Vec<_> = (chunk.start..chunk.start + chunk.len)
        .map(|i| seeded(row_seed(job.seed, chunk.class, per_class, i)))
        .collect();
    let out = sample_batch(
        &lab.model,
        &conds,
        &job.schedule,
        &lab.cfg.sampler,
        &lab.ns,
        &mut rngs,
        diagnostics,
    )?;
    let embeddings = lab
        .refs
        .embedder
        .embed_all(out.samples.iter().map(Vec::as_slice));
    let (mut uturns, mut wanders) = (Vec::new(), Vec::new());
    if let Some(trajs) = out.trajectories {
        for traj in trajs {
            let proj: Vec<Vec<f64>> = traj.states.iter().map(|(_, x)| lab.project(x)).collect();
            let diag = trajectory_diagnostics(&proj, tau)?;
            uturns.push(diag.uturn_count);
            wanders.push(diag.wander_ratio);
        }
    }
    Ok(ChunkOut {
        embeddings,
        uturns,
        wanders,
    })
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Samples `per_class` rows per class for every job and computes its
/// metrics. A failing cell yields `Err` in its slot; the others are
/// unaffected. Results are in job order regardless of `workers`.
pub fn evaluate_cells(
    lab: &Lab,
    jobs: &[CellJob],
    per_class: usize,
    diversity_group: usize,
    diagnostics: bool,
    workers: usize,
) -> Vec<Result<CellMetrics, String>> {
    let classes = lab.dataset.classes();
    let chunk_len = lab.cfg.chunk;
    let mut chunks = Vec::new();
    for cell in 0..jobs.len() {
        for class in 0..classes {
            let mut start = 0;
            while start < per_class {
                let len = chunk_len.min(per_class - start);
                chunks.push(Chunk {
                    cell,
                    class,
                    start,
                    len,
                });
                start += len;
            }
        }
    }
    let tau = lab.cfg.traj.tau;
    let outs: Vec<Result<ChunkOut, XpError>> = with_pool(workers, || {
        chunks
            .par_iter()
            .map(|c| run_chunk(lab, &jobs[c.cell], *c, per_class, diagnostics, tau))
            .collect()
    });

    let mut per_cell: Vec<Vec<(Chunk, Result<ChunkOut, XpError>)>> =
        (0..jobs.len()).map(|_| Vec::new()).collect();
    for (c, o) in chunks.into_iter().zip(outs) {
        per_cell[c.cell].push((c, o));
    }
    per_cell
        .into_iter()
        .map(|parts| {
            let (mut feats, mut labels, mut uturns, mut wanders) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (c, out) in parts {
                let out = out.map_err(|e| e.to_string())?;
                labels.extend(std::iter::repeat_n(c.class, c.len));
                feats.extend(out.embeddings);
                uturns.extend(out.uturns);
                wanders.extend(out.wanders);
            }
            lab.refs
                .metrics_from_features(&feats, &labels, diversity_group, &uturns, &wanders)
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Draws `per_class` samples for each of `classes` under `schedule`, with
/// the row seeds a sweep cell sampled with `seed` would use. Rows are
/// grouped by class in the order given.
pub fn generate_samples(
    cfg: &RunConfig,
    model: &Denoiser,
    ns: &NoiseSchedule,
    schedule: &GuidanceSchedule,
    classes: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset, XpError> {
    let mut chunks = Vec::new();
    for &class in classes {
        let mut start = 0;
        while start < per_class {
            let len = cfg.chunk.min(per_class - start);
            chunks.push((class, start, len));
            start += len;
        }
    }
    let outs: Vec<Result<Vec<Vec<f64>>, XpError>> = with_pool(cfg.workers, || {
        chunks
            .par_iter()
            .map(|&(class, start, len)| {
                let conds = vec![Condition::Class(class); len];
                let mut rngs: Vec<_> = (start..start + len)
                    .map(|i| seeded(row_seed(seed, class, per_class, i)))
                    .collect();
                let out =
                    sample_batch(model, &conds, schedule, &cfg.sampler, ns, &mut rngs, false)?;
                Ok(out.samples)
            })
            .collect()
    });
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for ((class, _, _), out) in chunks.iter().zip(outs) {
        for row in out? {
            data.extend(row);
            labels.push(*class);
        }
    }
    Ok(LabeledDataset::new(
        model.arch().dim,
        model.arch().classes,
        data,
        labels,
    )?)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_param(p: Option<f64>) -> String {
    p.map(fmt_f64).unwrap_or_default()
}

fn csv_status(r: &Result<CellMetrics, String>) -> (CellMetrics, String) {
    match r {
        Ok(m) => (*m, "ok".to_string()),
        Err(e) => (
            CellMetrics::NAN,
            format!("error: {}", e.replace([',', '\n'], ";")),
        ),
    }
}

fn metric_cols(m: &CellMetrics) -> String {
    [
        m.fd,
        m.adherence,
        m.is_analog,
        m.diversity,
        m.uturn_mean,
        m.wander_mean,
    ]
    .iter()
    .map(|v| fmt_f64(*v))
    .collect::<Vec<_>>()
    .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run_id: String,
    pub scheduler: ShapeKind,
    pub param: Option<f64>,
    pub omega: f64,
    pub replicate: usize,
    pub metrics: Result<CellMetrics, String>,
}

pub const SWEEP_HEADER: &str =
    "run_id,scheduler,omega,param,replicate,fd,adherence,is_analog,diversity,uturn_mean,wander_mean,status";

/// Every `(scheduler, ω, replicate)` cell of the sweep grid, in grid order.
pub fn run_sweep(lab: &Lab) -> Vec<SweepRow> {
    let cfg = &lab.cfg;
    let s = &cfg.sweep;
    let seeds = cfg.seeds(s.replicates);
    let mut keys = Vec::new();
    let mut jobs = Vec::new();
    for entry in &s.schedulers {
        for &omega in &s.omegas {
            for (r, &seed) in seeds.replicates.iter().enumerate() {
                let schedule = entry
                    .schedule(omega, cfg.noise.horizon)
                    .expect("validated with the config");
                keys.push((*entry, omega, r));
                jobs.push(CellJob { schedule, seed });
            }
        }
    }
    let results = evaluate_cells(
        lab,
        &jobs,
        s.samples_per_class,
        s.diversity_group,
        s.diagnostics,
        cfg.workers,
    );
    keys.into_iter()
        .zip(results)
        .map(|((entry, omega, r), metrics)| SweepRow {
            run_id: format!(
                "sweep-{}-{}-{}-r{r}",
                entry.shape,
                fmt_param(entry.param),
                omega
            ),
            scheduler: entry.shape,
            param: entry.param,
            omega,
            replicate: r,
            metrics,
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        let (m, status) = csv_status(&row.metrics);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.run_id,
            row.scheduler,
            fmt_f64(row.omega),
            fmt_param(row.param),
            row.replicate,
            metric_cols(&m),
            status
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRow {
    pub replicate: usize,
    /// `None` for the unperturbed baseline.
    pub interval: Option<(u32, u32)>,
    pub omega: f64,
    pub metrics: Result<CellMetrics, String>,
}

pub const PERTURB_HEADER: &str =
    "run_id,interval_start,interval_end,omega,replicate,fd,adherence,is_analog,diversity,uturn_mean,wander_mean,status";

/// Static-guidance baseline plus one row per zeroed interval, per
/// replicate. Rows are sorted by replicate, baseline first, then interval
/// start.
pub fn run_negative_perturbation(lab: &Lab) -> Result<Vec<PerturbRow>, XpError> {
    let cfg = &lab.cfg;
    let p = &cfg.perturb;
    let horizon = cfg.noise.horizon;
    if p.width == 0 || !horizon.is_multiple_of(p.width) {
        return Err(config_err(format!(
            "perturb.width {} must divide the horizon {horizon}",
            p.width
        )));
    }
    let mut starts: Vec<u32> = match &p.intervals {
        Some(v) => v.clone(),
        None => (0..horizon / p.width).map(|k| k * p.width).collect(),
    };
    starts.sort_unstable();
    starts.dedup();
    let seeds = cfg.seeds(cfg.sweep.replicates);
    let mut keys = Vec::new();
    let mut jobs = Vec::new();
    for (r, &seed) in seeds.replicates.iter().enumerate() {
        keys.push((r, None));
        jobs.push(CellJob {
            schedule: GuidanceSchedule::constant(p.omega, horizon)?,
            seed,
        });
        for &st in &starts {
            let iv = (st, st + p.width);
            let shape = ScheduleShape::PiecewiseZero {
                base: Box::new(ScheduleShape::Static),
                intervals: vec![ZeroInterval::new(f64::from(iv.0), f64::from(iv.1))],
            };
            keys.push((r, Some(iv)));
            jobs.push(CellJob {
                schedule: GuidanceSchedule::new(shape, p.omega, horizon)?,
                seed,
            });
        }
    }
    let s = &cfg.sweep;
    let results = evaluate_cells(
        lab,
        &jobs,
        s.samples_per_class,
        s.diversity_group,
        s.diagnostics,
        cfg.workers,
    );
    Ok(keys
        .into_iter()
        .zip(results)
        .map(|((replicate, interval), metrics)| PerturbRow {
            replicate,
            interval,
            omega: p.omega,
            metrics,
        })
        .collect())
}

pub fn perturb_csv(rows: &[PerturbRow]) -> String {
    let mut out = String::from(PERTURB_HEADER);
    out.push('\n');
    for row in rows {
        let (m, status) = csv_status(&row.metrics);
        let (id, a, b) = match row.interval {
            None => (
                format!("perturb-baseline-r{}", row.replicate),
                String::new(),
                String::new(),
            ),
            Some((a, b)) => (
                format!("perturb-{a}-{b}-r{}", row.replicate),
                a.to_string(),
                b.to_string(),
            ),
        };
        let _ = writeln!(
            out,
            "{id},{a},{b},{},{},{},{status}",
            fmt_f64(row.omega),
            row.replicate,
            metric_cols(&m)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajPoint {
    pub step: usize,
    pub t: u32,
    pub pc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajRecord {
    pub omega: f64,
    pub class: usize,
    pub seed: usize,
    /// Projected states, or the sampling error.
    pub points: Result<Vec<TrajPoint>, String>,
    pub uturn_count: Option<usize>,
    pub wander_ratio: Option<f64>,
}

pub const TRAJ_HEADER: &str = "omega,class,seed,step,t,pc1,pc2";
pub const TRAJ_DIAG_HEADER: &str = "omega,class,seed,uturn_count,wander_ratio,status";

/// Samples `seeds_per_class` trajectories per class for every `ω`; seed `j`
/// of class `k` uses the same initial noise at every `ω`.
pub fn run_trajectory_study(lab: &Lab) -> Vec<TrajRecord> {
    let cfg = &lab.cfg;
    let t = &cfg.traj;
    let base = cfg.seeds(0).traj;
    let classes = lab.dataset.classes();
    let mut tasks = Vec::new();
    for &omega in &t.omegas {
        for class in 0..classes {
            for seed in 0..t.seeds_per_class {
                tasks.push((omega, class, seed));
            }
        }
    }
    let run_one = |&(omega, class, seed): &(f64, usize, usize)| -> TrajRecord {
        let result = (|| -> Result<(Vec<TrajPoint>, usize, f64), XpError> {
            let sched = t.scheduler.schedule(omega, cfg.noise.horizon)?;
            let mut rngs = [seeded(row_seed(base, class, t.seeds_per_class, seed))];
            let out = sample_batch(
                &lab.model,
                &[Condition::Class(class)],
                &sched,
                &cfg.sampler,
                &lab.ns,
                &mut rngs,
                true,
            )?;
            let traj = out.trajectories.expect("recorded").remove(0);
            let points: Vec<TrajPoint> = traj
                .states
                .iter()
                .enumerate()
                .map(|(step, (ts, x))| TrajPoint {
                    step,
                    t: *ts,
                    pc: lab.project(x),
                })
                .collect();
            let proj: Vec<Vec<f64>> = points.iter().map(|p| p.pc.clone()).collect();
            let diag = trajectory_diagnostics(&proj, t.tau)?;
            Ok((points, diag.uturn_count, diag.wander_ratio))
        })();
        match result {
            Ok((points, u, w)) => TrajRecord {
                omega,
                class,
                seed,
                points: Ok(points),
                uturn_count: Some(u),
                wander_ratio: Some(w),
            },
            Err(e) => TrajRecord {
                omega,
                class,
                seed,
                points: Err(e.to_string()),
                uturn_count: None,
                wander_ratio: None,
            },
        }
    };
    with_pool(cfg.workers, || tasks.par_iter().map(run_one).collect())
}

pub fn traj_csvs(records: &[TrajRecord]) -> (String, String) {
    let mut traj = String::from(TRAJ_HEADER);
    traj.push('\n');
    let mut diag = String::from(TRAJ_DIAG_HEADER);
    diag.push('\n');
    for r in records {
        let omega = fmt_f64(r.omega);
        match &r.points {
            Ok(points) => {
                for p in points {
                    let pc1 = p.pc.first().copied().unwrap_or(f64::NAN);
                    let pc2 = p.pc.get(1).copied().unwrap_or(f64::NAN);
                    let _ = writeln!(
                        traj,
                        "{omega},{},{},{},{},{},{}",
                        r.class,
                        r.seed,
                        p.step,
                        p.t,
                        fmt_f64(pc1),
                        fmt_f64(pc2)
                    );
                }
                let _ = writeln!(
                    diag,
                    "{omega},{},{},{},{},ok",
                    r.class,
                    r.seed,
                    r.uturn_count.unwrap_or(0),
                    fmt_f64(r.wander_ratio.unwrap_or(f64::NAN))
                );
            }
            Err(e) => {
                let _ = writeln!(
                    diag,
                    "{omega},{},{},,NaN,error: {}",
                    r.class,
                    r.seed,
                    e.replace([',', '\n'], ";")
                );
            }
        }
    }
    (traj, diag)
}

/// Deterministic record of a run. Wall-clock timings live in the
/// `timings.json` sidecar so that the manifest itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub runner: String,
    pub config_digest: String,
    pub config: RunConfig,
    pub seeds: ResolvedSeeds,
    pub outputs: Vec<String>,
    pub stages: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

impl RunManifest {
    pub fn new(
        cfg: &RunConfig,
        runner: &str,
        outputs: Vec<String>,
        stages: Vec<String>,
    ) -> Result<Self, XpError> {
        let mut config = cfg.clone();
        config.output_dir = PathBuf::new();
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            runner: runner.to_string(),
            config_digest: cfg.digest()?,
            seeds: cfg.seeds(cfg.sweep.replicates),
            config,
            outputs,
            stages,
        })
    }

    /// Whether the stored digest matches the stored config.
    pub fn digest_matches(&self) -> Result<bool, XpError> {
        Ok(self.config.digest()? == self.config_digest)
    }
}

/// Writes `manifest.json` (and the `timings.json` sidecar); refuses to
/// replace an existing manifest.
pub fn write_manifest(
    dir: &Path,
    manifest: &RunManifest,
    timings: &[(String, f64)],
) -> Result<(), XpError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => XpError::ManifestExists(path.clone()),
            _ => XpError::Io(e),
        })?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    file.write_all(json.as_bytes())?;
    let timing_map: BTreeMap<&str, f64> = timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    fs::write(
        dir.join(TIMINGS_FILE),
        serde_json::to_string_pretty(&timing_map)? + "\n",
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, XpError> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Runner {
    Sweep,
    Perturb,
    Traj,
}

impl Runner {
    pub fn name(self) -> &'static str {
        match self {
            Runner::Sweep => "sweep",
            Runner::Perturb => "perturb",
            Runner::Traj => "traj",
        }
    }
}

/// Runs one runner end to end into `dir`: prepares the lab, writes the
/// CSV outputs, `params.bin`, optionally `dataset.bin`, and the manifest.
/// Fails before doing any work if `dir` already holds a manifest.
pub fn execute(cfg: &RunConfig, runner: Runner, dir: &Path) -> Result<RunManifest, XpError> {
    cfg.validate()?;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(XpError::ManifestExists(dir.join(MANIFEST_FILE)));
    }
    let lab = Lab::prepare(cfg)?;
    execute_with_lab(&lab, runner, dir)
}

pub fn execute_with_lab(lab: &Lab, runner: Runner, dir: &Path) -> Result<RunManifest, XpError> {
    if dir.join(MANIFEST_FILE).exists() {
        return Err(XpError::ManifestExists(dir.join(MANIFEST_FILE)));
    }
    fs::create_dir_all(dir)?;
    let mut timings = lab.timings.clone();
    let mut outputs = Vec::new();
    let clock = Instant::now();
    match runner {
        Runner::Sweep => {
            let rows = run_sweep(lab);
            fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
            outputs.push("sweep.csv".to_string());
        }
        Runner::Perturb => {
            let rows = run_negative_perturbation(lab)?;
            fs::write(dir.join("perturb.csv"), perturb_csv(&rows))?;
            outputs.push("perturb.csv".to_string());
        }
        Runner::Traj => {
            let records = run_trajectory_study(lab);
            let (traj, diag) = traj_csvs(&records);
            fs::write(dir.join("traj.csv"), traj)?;
            fs::write(dir.join("traj_diag.csv"), diag)?;
            outputs.push("traj.csv".to_string());
            outputs.push("traj_diag.csv".to_string());
        }
    }
    timings.push((runner.name().to_string(), clock.elapsed().as_secs_f64()));
    save_params(&lab.model, &dir.join("params.bin"))?;
    outputs.push("params.bin".to_string());
    if lab.cfg.write_dataset {
        save_dataset(&lab.dataset, &dir.join("dataset.bin"))?;
        outputs.push("dataset.bin".to_string());
    }
    let stages = timings.iter().map(|(k, _)| k.clone()).collect();
    let manifest = RunManifest::new(&lab.cfg, runner.name(), outputs, stages)?;
    write_manifest(dir, &manifest, &timings)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small 2-D config that trains in well under a second.
    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            data: DatasetSpec::Gmm {
                n: 400,
                centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
                sigma: 0.2,
            },
            model: ModelSpec {
                hidden: vec![16],
                time_dim: 8,
                class_dim: 4,
                params_path: None,
            },
            train: TrainSpec {
                steps: 30,
                batch_size: 16,
                ..TrainSpec::default()
            },
            noise: NoiseSpec {
                kind: NoiseKind::LinearBeta,
                horizon: 100,
            },
            sampler: SamplerSpec::ddim(10),
            embed: EmbedSpec::Identity,
            sweep: SweepSpec {
                schedulers: vec![
                    SchedulerEntry::new(ShapeKind::Static, None),
                    SchedulerEntry::new(ShapeKind::Linear, None),
                ],
                omegas: vec![1.15],
                samples_per_class: 12,
                replicates: 1,
                diversity_group: 4,
                diagnostics: true,
            },
            perturb: PerturbSpec {
                omega: 1.15,
                width: 25,
                intervals: None,
            },
            traj: TrajSpec {
                omegas: vec![0.0, 5.0],
                seeds_per_class: 2,
                ..TrajSpec::default()
            },
            chunk: 5,
            write_dataset: false,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
        tiny_config().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut c = tiny_config();
        c.sweep.omegas.clear();
        assert!(c.validate().unwrap_err().is_config());
        let mut c = tiny_config();
        c.perturb.width = 30;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.sweep.samples_per_class = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.sweep
            .schedulers
            .push(SchedulerEntry::new(ShapeKind::Pcs, None));
        assert!(c.validate().is_err());
    }

    #[test]
    fn sweep_cardinality_and_determinism() {
        let cfg = tiny_config();
        let lab = Lab::prepare(&cfg).unwrap();
        let rows = run_sweep(&lab);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.metrics.is_ok()));
        let again = run_sweep(&Lab::prepare(&cfg).unwrap());
        assert_eq!(sweep_csv(&rows), sweep_csv(&again));
        let mut par = Lab::prepare(&cfg).unwrap();
        par.cfg.workers = 4;
        assert_eq!(sweep_csv(&run_sweep(&par)), sweep_csv(&rows));
    }

    #[test]
    fn perturbation_rows_and_noop_interval() {
        let mut cfg = tiny_config();
        cfg.sweep.diagnostics = false;
        let lab = Lab::prepare(&cfg).unwrap();
        let rows = run_negative_perturbation(&lab).unwrap();
        assert_eq!(rows.len(), 1 + 4);
        assert_eq!(rows[0].interval, None);
        let starts: Vec<u32> = rows[1..].iter().map(|r| r.interval.unwrap().0).collect();
        assert_eq!(starts, vec![0, 25, 50, 75]);
        // ddim over 10 steps evaluates t = 100, 90, …, 10: nothing in [0, 10)
        let mut cfg2 = cfg.clone();
        cfg2.perturb.width = 10;
        cfg2.perturb.intervals = Some(vec![50, 0]);
        let lab2 = Lab::with_model(&cfg2, lab.dataset.clone(), lab.model.clone()).unwrap();
        let rows2 = run_negative_perturbation(&lab2).unwrap();
        assert_eq!(rows2.len(), 3);
        assert_eq!(rows2[1].interval, Some((0, 10)));
        assert_eq!(
            format!("{:?}", rows2[1].metrics),
            format!("{:?}", rows2[0].metrics)
        );
        assert_ne!(
            format!("{:?}", rows2[2].metrics),
            format!("{:?}", rows2[0].metrics)
        );
    }

    #[test]
    fn trajectories_share_initial_state_across_omega() {
        let lab = Lab::prepare(&tiny_config()).unwrap();
        let recs = run_trajectory_study(&lab);
        assert_eq!(recs.len(), 2 * 2 * 2);
        let first = |omega: f64, class: usize, seed: usize| {
            let r = recs
                .iter()
                .find(|r| r.omega == omega && r.class == class && r.seed == seed)
                .unwrap();
            r.points.as_ref().unwrap()[0].clone()
        };
        assert_eq!(first(0.0, 1, 1), first(5.0, 1, 1));
        assert_ne!(first(0.0, 1, 1), first(0.0, 1, 0));
        let (traj, diag) = traj_csvs(&recs);
        assert_eq!(traj.lines().count(), 1 + 8 * 11);
        assert_eq!(diag.lines().count(), 1 + 8);
    }

    #[test]
    fn manifest_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let m = RunManifest::new(&cfg, "sweep", vec!["sweep.csv".into()], vec![]).unwrap();
        write_manifest(dir.path(), &m, &[]).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(back.digest_matches().unwrap());
        assert!(matches!(
            write_manifest(dir.path(), &m, &[]),
            Err(XpError::ManifestExists(_))
        ));
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = tiny_config();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 1;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }
}
