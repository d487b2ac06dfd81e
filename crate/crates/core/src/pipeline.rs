//! Config-driven commands: the full adaptation loop, evaluation, standalone BA,
//! synthetic dataset generation and plot export. Every command writes its artifacts
//! under one directory together with a manifest of seeds and checksums.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::continual::{BatchPolicy, Trainer, TrainerConfig};
use crate::controller::{Action, BaScheduler, Controller, ControllerConfig, Hooks};
use crate::depth_net::{DepthNet, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::evaluation::{
    dense_scale_invariant_error, map_depth_error, percent_correct_frames, write_metrics,
    DepthEvalConfig, FrameMetrics,
};
use crate::geometry::Intrinsics;
use crate::keyframe::{hex_digest, read_message_log, Keyframe, KeyframeGraph, KeyframeStore, MessageLog, SparsePoint};
use crate::losses::{validation_loss, LossWeights};
use crate::map_refinement::{refine_map, select_host, BaOptions, BaReport, CullConfig};
use crate::synthetic::{NoiseSpec, SceneSpec, SyntheticScene};
use crate::tum::{load_tum_sequence, write_trajectory, TumOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    EnvA,
    EnvB,
    Layered,
}

impl Preset {
    pub fn spec(self, seed: u64, frames: usize) -> SceneSpec {
        match self {
            Preset::EnvA => SceneSpec::env_a(seed, frames),
            Preset::EnvB => SceneSpec::env_b(seed, frames),
            Preset::Layered => SceneSpec::layered(seed, frames),
        }
    }
}

/// Noise of the default run: SLAM-like depth noise with a tenth of the points
/// pushed three times along their rays.
pub fn run_noise() -> NoiseSpec {
    NoiseSpec {
        sigma_i: 0.01,
        sigma_d: 0.05,
        sigma_t: 0.003,
        outlier_ratio: 0.1,
        outlier_scale: 3.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub preset: Preset,
    pub seed: u64,
    pub frames: usize,
    /// Replaces the preset's noise.
    pub noise: Option<NoiseSpec>,
    /// Scene description file; overrides the preset, keeps `seed` and `frames`.
    pub spec: Option<PathBuf>,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            preset: Preset::EnvB,
            seed: 0,
            frames: 60,
            noise: Some(run_noise()),
            spec: None,
        }
    }
}

impl SyntheticSource {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let mut spec = match &self.spec {
            Some(path) => {
                let mut s: SceneSpec = parse_toml(path)?;
                s.seed = self.seed;
                s.frames = self.frames;
                s
            }
            None => self.preset.spec(self.seed, self.frames),
        };
        if let Some(n) = &self.noise {
            spec.noise = n.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TumSource {
    pub dir: PathBuf,
    pub tolerance: f64,
    pub keyframe_every: usize,
    pub downsample: usize,
    pub grid_size: usize,
    pub max_fts: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for TumSource {
    fn default() -> Self {
        let o = TumOptions::default();
        Self {
            dir: PathBuf::new(),
            tolerance: o.tolerance,
            keyframe_every: o.keyframe_every,
            downsample: o.downsample,
            grid_size: o.grid_size,
            max_fts: o.max_fts,
            fx: o.intrinsics.fx,
            fy: o.intrinsics.fy,
            cx: o.intrinsics.cx,
            cy: o.intrinsics.cy,
            width: o.intrinsics.width,
            height: o.intrinsics.height,
        }
    }
}

impl TumSource {
    pub fn options(&self) -> Result<TumOptions> {
        Ok(TumOptions {
            tolerance: self.tolerance,
            keyframe_every: self.keyframe_every,
            intrinsics: Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?,
            downsample: self.downsample,
            grid_size: self.grid_size,
            max_fts: self.max_fts,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Synthetic(SyntheticSource),
    /// Keyframe message log written by `synth` or a recorded run.
    Log(LogSource),
    Tum(TumSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSource {
    pub path: PathBuf,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic(SyntheticSource::default())
    }
}

impl SourceConfig {
    fn check_paths(&self) -> Result<()> {
        let p = match self {
            SourceConfig::Synthetic(s) => s.spec.as_deref(),
            SourceConfig::Log(l) => Some(l.path.as_path()),
            SourceConfig::Tum(t) => Some(t.dir.as_path()),
        };
        match p {
            Some(p) if !p.exists() => Err(Error::MissingFile(p.to_path_buf())),
            _ => Ok(()),
        }
    }

    /// Intrinsics and a lazy keyframe stream.
    pub fn open(&self) -> Result<(Intrinsics, KeyframeStream)> {
        self.check_paths()?;
        match self {
            SourceConfig::Synthetic(s) => {
                let scene = SyntheticScene::new(s.scene_spec()?)?;
                let k = scene.intrinsics;
                let n = scene.frames();
                Ok((k, Box::new((0..n).map(move |i| scene.render(i)))))
            }
            SourceConfig::Log(l) => {
                let (k, kfs) = read_message_log(&l.path)?;
                Ok((k, Box::new(kfs.into_iter().map(Ok))))
            }
            SourceConfig::Tum(t) => {
                let seq = load_tum_sequence(&t.dir, &t.options()?)?;
                log::info!(
                    "{}: {} associated frames, {} skipped, {} keyframes",
                    t.dir.display(),
                    seq.associated,
                    seq.skipped,
                    seq.keyframes.len()
                );
                Ok((seq.intrinsics, Box::new(seq.keyframes.into_iter().map(Ok))))
            }
        }
    }

    pub fn load_all(&self) -> Result<(Intrinsics, Vec<Keyframe>)> {
        let (k, stream) = self.open()?;
        Ok((k, stream.collect::<Result<Vec<_>>>()?))
    }

    fn seed(&self) -> Option<u64> {
        match self {
            SourceConfig::Synthetic(s) => Some(s.seed),
            _ => None,
        }
    }
}

pub type KeyframeStream = Box<dyn Iterator<Item = Result<Keyframe>> + Send>;

/// Offline fit that stands in for a network pre-trained elsewhere: dense ground-truth
/// depth on a synthetic environment, supervised through the sparse-depth term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Start from this network or trainer checkpoint instead of fitting.
    pub checkpoint: Option<PathBuf>,
    pub preset: Preset,
    pub seed: u64,
    pub frames: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda1: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            checkpoint: None,
            preset: Preset::EnvA,
            seed: 1000,
            frames: 100,
            steps: 200,
            lr: 1e-3,
            lambda1: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn scene_store(&self) -> Result<KeyframeStore> {
        let scene = SyntheticScene::new(self.preset.spec(self.seed, self.frames))?;
        let mut store = KeyframeStore::new(scene.intrinsics);
        for kf in scene.render_all()? {
            store.insert(kf)?;
        }
        Ok(store)
    }
}

/// Copy of `store` whose keyframes carry every valid ground-truth pixel as a label.
fn densely_labelled(store: &KeyframeStore) -> Result<KeyframeStore> {
    let mut out = KeyframeStore::new(store.intrinsics);
    for kf in store.keyframes() {
        let mut kf = kf.clone();
        let gt = kf
            .gt_depth
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("keyframe {} has no ground-truth depth", kf.id)))?;
        let w = gt.hw().1;
        kf.sparse_points = gt
            .data()
            .iter()
            .enumerate()
            .filter(|(_, d)| **d > 0.0 && d.is_finite())
            .map(|(i, d)| SparsePoint {
                u: (i % w) as f32,
                v: (i / w) as f32,
                depth: *d,
                map_point_id: i as u64,
            })
            .collect();
        out.insert(kf)?;
    }
    Ok(out)
}

/// Fits `net` to the ground truth of `store` for `cfg.steps` batches, visiting
/// keyframes in a seeded shuffled order.
pub fn pretrain(net: DepthNet, store: &KeyframeStore, cfg: &PretrainConfig) -> Result<DepthNet> {
    if store.is_empty() {
        return Err(Error::invalid("pretraining scene has no keyframes"));
    }
    let dense = densely_labelled(store)?;
    let mut tc = TrainerConfig {
        policy: BatchPolicy::RecentOnly,
        weights: LossWeights {
            lambda1: cfg.lambda1,
            ..LossWeights::default()
        },
        ..TrainerConfig::default()
    };
    tc.adam.lr = cfg.lr;
    let mut trainer = Trainer::new(net, tc)?;
    let ids: Vec<u64> = dense.keyframes().iter().map(|k| k.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = ids.clone();
            order.shuffle(&mut rng);
        }
        let id = order.pop().expect("refilled");
        let r = trainer.fine_tune_step(&dense, id)?;
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {:.4}", r.loss.total);
        }
    }
    let mut net = trainer.net;
    net.step = 0;
    Ok(net)
}

/// Reads a network from a plain network checkpoint or a trainer checkpoint.
pub fn load_network(path: &Path) -> Result<DepthNet> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        DepthNet::read_checkpoint(bytes.as_slice())
    } else {
        Ok(Trainer::read_checkpoint(bytes.as_slice(), TrainerConfig::default())?.net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Seed of the network initialisation.
    pub net_seed: u64,
    pub source: SourceConfig,
    pub pretrain: PretrainConfig,
    pub controller: ControllerConfig,
    pub trainer: TrainerConfig,
    pub cull: CullConfig,
    pub ba: BaOptions,
    pub eval: DepthEvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/latest"),
            net_seed: 0,
            source: SourceConfig::default(),
            pretrain: PretrainConfig::default(),
            controller: ControllerConfig::default(),
            trainer: TrainerConfig::default(),
            cull: CullConfig {
                gamma: 0.5,
                d_max: 10.0,
            },
            ba: BaOptions::default(),
            eval: DepthEvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = parse_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.trainer.regularizer.validate()?;
        self.trainer.weights.validate()?;
        if self.trainer.inner_iters == 0 {
            return Err(Error::Config("trainer.inner_iters must be at least 1".into()));
        }
        self.cull.validate()?;
        self.eval.validate()?;
        self.source.check_paths()?;
        if let Some(p) = &self.pretrain.checkpoint {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Network the run adapts: a checkpoint, a fresh pretraining fit or a seeded init.
    pub fn initial_network(&self) -> Result<DepthNet> {
        let p = &self.pretrain;
        if let Some(path) = &p.checkpoint {
            return load_network(path);
        }
        let net = DepthNet::init(self.net_seed);
        if p.enabled && p.steps > 0 {
            pretrain(net, &p.scene_store()?, p)
        } else {
            Ok(net)
        }
    }
}

/// Parses a TOML file, reporting syntax and schema errors with their line.
pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.message().to_string(),
        }
    })
}

/// Snapshot handed to the BA worker.
pub struct BaJob {
    pub index: usize,
    pub trigger_t: u64,
    pub store: KeyframeStore,
    pub net: DepthNet,
    pub cull: CullConfig,
    pub options: BaOptions,
}

#[derive(Clone, Debug)]
pub struct BaOutcome {
    pub index: usize,
    pub trigger_t: u64,
    pub keyframes: usize,
    pub culled: BTreeSet<u64>,
    pub hosts: BTreeMap<u64, u64>,
    pub val_losses: Vec<(u64, f64)>,
    /// Poses and refined points; `None` when too few keyframes to adjust.
    pub graph: Option<KeyframeGraph>,
    pub report: Option<BaReport>,
    /// Points culled after the adjustment; included in `culled`.
    pub recull: usize,
    /// Map-point depth error with hosts assigned, before culling.
    pub e_si_pre: f64,
    pub e_si_culled: f64,
    /// After the adjustment, counting the points culled afterwards.
    pub e_si_adjusted: f64,
    pub e_si_post: f64,
}

fn e_si_or_nan(store: &KeyframeStore) -> f64 {
    map_depth_error(store).map(|e| e.e_si).unwrap_or(f64::NAN)
}

impl BaJob {
    /// Validation losses and depth maps for every keyframe, then map refinement.
    pub fn run(mut self) -> Result<BaOutcome> {
        let mut depth_maps = BTreeMap::new();
        let mut val_losses = Vec::new();
        let ids: Vec<u64> = self.store.keyframes().iter().map(|k| k.id).collect();
        for id in &ids {
            let kf = self.store.get_mut(*id).expect("listed");
            if let Some(l) = validation_loss(kf, &self.net)? {
                val_losses.push((*id, l));
            }
            depth_maps.insert(*id, self.net.predict(&kf.image)?);
        }
        let mut hosted = self.store.clone();
        let hosts: Vec<(u64, Option<u64>)> = hosted
            .map_points()
            .values()
            .filter(|m| !m.culled)
            .map(|m| (m.id, select_host(m, &hosted)))
            .collect();
        for (id, h) in hosts {
            if h.is_some() {
                hosted.map_points_mut().get_mut(&id).expect("listed").host_kf = h;
            }
        }
        let e_si_pre = e_si_or_nan(&hosted);
        let refined = refine_map(&mut self.store, &depth_maps, &self.cull, &self.options)?;
        hosted.mark_culled(&refined.cull.culled);
        let e_si_culled = e_si_or_nan(&hosted);
        let mut adjusted = self.store.clone();
        for id in &refined.recull.culled {
            adjusted.map_points_mut().get_mut(id).expect("culled from the store").culled = false;
        }
        let e_si_adjusted = e_si_or_nan(&adjusted);
        let culled = refined.culled();
        let (graph, report) = match refined.solution {
            Some(sol) => (Some(sol.graph(0)), Some(sol.report)),
            None => (None, None),
        };
        Ok(BaOutcome {
            index: self.index,
            trigger_t: self.trigger_t,
            keyframes: ids.len(),
            recull: refined.recull.culled.len(),
            culled,
            hosts: refined.cull.hosts,
            val_losses,
            graph,
            report,
            e_si_pre,
            e_si_culled,
            e_si_adjusted,
            e_si_post: e_si_or_nan(&self.store),
        })
    }
}

/// Applies a finished BA to the live store and returns the published graph.
pub fn merge_outcome(store: &mut KeyframeStore, outcome: &BaOutcome) -> KeyframeGraph {
    for (id, l) in &outcome.val_losses {
        if store.get(*id).is_some_and(|k| k.last_val_loss.is_none()) {
            store.set_val_loss(*id, *l);
        }
    }
    store.mark_culled(&outcome.culled);
    for (id, host) in &outcome.hosts {
        if let Some(mp) = store.map_points_mut().get_mut(id) {
            mp.host_kf = Some(*host);
        }
    }
    if let Some(g) = &outcome.graph {
        store.apply_graph(g);
    }
    store.snapshot()
}

#[derive(Clone, Debug, Serialize)]
pub struct BaSummaryRow {
    pub ba: usize,
    pub trigger_t: u64,
    pub merged_t: u64,
    pub keyframes: usize,
    pub landmarks: usize,
    pub residuals: usize,
    pub culled: usize,
    pub recull: usize,
    pub kept: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub accepted: usize,
    pub e_si_pre: f64,
    pub e_si_culled: f64,
    pub e_si_adjusted: f64,
    pub e_si_post: f64,
    pub graph_seq: u64,
    pub graph_sha256: String,
}

/// Live state behind the controller hooks.
struct Loop<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    store: KeyframeStore,
    trainer: Trainer,
    scheduler: BaScheduler<BaJob, Result<BaOutcome>>,
    latest: u64,
    t: u64,
    submitted: usize,
    ba_rows: Vec<BaSummaryRow>,
    graphs: MessageLog<BufWriter<std::fs::File>>,
}

impl Loop<'_> {
    /// Waits for the BA worker and merges everything it finished.
    fn settle(&mut self) -> Result<()> {
        for outcome in self.scheduler.wait_idle() {
            let outcome = outcome?;
            let graph = merge_outcome(&mut self.store, &outcome);
            self.graphs.graph(&graph)?;
            let name = format!("ba/ba_{}.csv", outcome.index);
            let mut row = BaSummaryRow {
                ba: outcome.index,
                trigger_t: outcome.trigger_t,
                merged_t: self.t,
                keyframes: outcome.keyframes,
                landmarks: 0,
                residuals: 0,
                culled: outcome.culled.len(),
                recull: outcome.recull,
                kept: 0,
                initial_cost: f64::NAN,
                final_cost: f64::NAN,
                accepted: 0,
                e_si_pre: outcome.e_si_pre,
                e_si_culled: outcome.e_si_culled,
                e_si_adjusted: outcome.e_si_adjusted,
                e_si_post: outcome.e_si_post,
                graph_seq: graph.seq,
                graph_sha256: graph.checksum(),
            };
            if let Some(r) = &outcome.report {
                r.write_csv(std::fs::File::create(self.dir.join(&name))?)?;
                row.landmarks = r.landmarks;
                row.residuals = r.residuals;
                row.kept = r.kept;
                row.initial_cost = r.initial_cost;
                row.final_cost = r.final_cost;
                row.accepted = r.accepted();
            }
            log::info!(
                "BA {} merged at t={}: culled {}, cost {:.4e} -> {:.4e}, e_si {:.4} -> {:.4}",
                row.ba,
                self.t,
                row.culled,
                row.initial_cost,
                row.final_cost,
                row.e_si_pre,
                row.e_si_post
            );
            self.ba_rows.push(row);
        }
        Ok(())
    }
}

impl Hooks for Loop<'_> {
    fn validate(&mut self) -> Result<f64> {
        self.settle()?;
        let kf = self.store.get_mut(self.latest).expect("latest keyframe stored");
        match validation_loss(kf, &self.trainer.net)? {
            Some(l) => Ok(l),
            None => {
                log::warn!("keyframe {} has no sparse points; validation counts as failed", self.latest);
                Ok(f64::INFINITY)
            }
        }
    }

    fn fine_tune(&mut self) -> Result<()> {
        let r = self.trainer.fine_tune_step(&self.store, self.latest)?;
        log::debug!("t={} batch {:?} loss {:.4}", self.t, r.batch, r.loss.total);
        Ok(())
    }

    fn trigger_ba(&mut self) -> Result<()> {
        let job = BaJob {
            index: self.submitted,
            trigger_t: self.t,
            store: self.store.clone(),
            net: self.trainer.net.clone(),
            cull: self.cfg.cull.clone(),
            options: self.cfg.ba.clone(),
        };
        self.submitted += 1;
        let s = self.scheduler.submit(job);
        log::info!("BA {} triggered at t={}: {s:?}", self.submitted - 1, self.t);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub summary: BTreeMap<String, f64>,
    /// Relative artifact path to sha256.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.toml";

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            status: "running".into(),
            ..Self::default()
        }
    }

    /// Checksums every file under `dir` and writes the manifest there.
    pub fn finish(mut self, dir: &Path, outcome: &Result<()>) -> Result<()> {
        match outcome {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.to_string());
            }
        }
        self.artifacts = checksums(dir)?;
        let text = toml::to_string_pretty(&self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        parse_toml(&dir.join(MANIFEST))
    }
}

fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST) {
                let rel = p.strip_prefix(dir).expect("under dir");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, hex_digest(&std::fs::read(&p)?));
            }
        }
    }
    Ok(out)
}

/// Runs `body`, then writes the manifest whatever happened.
fn with_manifest(
    dir: &Path,
    mut manifest: Manifest,
    body: impl FnOnce(&mut Manifest) -> Result<()>,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let outcome = body(&mut manifest);
    let kept = manifest.clone();
    manifest.finish(dir, &outcome)?;
    outcome.map(|_| Manifest::load(dir).unwrap_or(kept))
}

/// Per-frame accuracy and dense scale-invariant error of `net` on every keyframe with
/// ground truth; `None` when no keyframe has any.
pub fn evaluate_frames(
    net: &DepthNet,
    keyframes: &[&Keyframe],
    cfg: &DepthEvalConfig,
) -> Result<Option<(Vec<FrameMetrics>, f64, f64)>> {
    let with_gt: Vec<(usize, &Keyframe)> = keyframes
        .iter()
        .enumerate()
        .filter(|(_, k)| k.gt_depth.is_some())
        .map(|(i, k)| (i, *k))
        .collect();
    if with_gt.is_empty() {
        return Ok(None);
    }
    let preds = with_gt
        .iter()
        .map(|(_, k)| net.predict(&k.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<&Tensor<f32>> = with_gt.iter().map(|(_, k)| k.gt_depth.as_ref().expect("filtered")).collect();
    let acc = percent_correct_frames(&preds.iter().collect::<Vec<_>>(), &gts, cfg)?;
    let mut rows = Vec::new();
    let mut e_sum = 0.0;
    for (j, (i, k)) in with_gt.iter().enumerate() {
        let e = dense_scale_invariant_error(&preds[j], gts[j], cfg).unwrap_or(f64::NAN);
        e_sum += e;
        rows.push(FrameMetrics {
            frame: *i,
            keyframe_id: k.id,
            percent_correct: acc.per_frame[j],
            e_si: e,
        });
    }
    let mean_e = e_sum / rows.len() as f64;
    Ok(Some((rows, acc.overall, mean_e)))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub ba: Vec<BaSummaryRow>,
    pub keyframes: usize,
}

/// The adaptation loop: a producer thread streams keyframes, the calling thread owns
/// the trainer and controller, and BA runs on the scheduler's worker. BA results are
/// merged at the next validation (after waiting for the worker, which keeps runs
/// reproducible) and once more at the end.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let mut ba_rows = Vec::new();
    let mut n_kf = 0;
    let mut manifest = Manifest::new("run");
    manifest.seeds.insert("net".into(), cfg.net_seed);
    manifest.seeds.insert("replay".into(), cfg.trainer.replay_seed);
    if cfg.pretrain.enabled && cfg.pretrain.checkpoint.is_none() {
        manifest.seeds.insert("pretrain".into(), cfg.pretrain.seed);
    }
    if let Some(s) = cfg.source.seed() {
        manifest.seeds.insert("source".into(), s);
    }
    let manifest = with_manifest(&dir, manifest, |m| {
        std::fs::create_dir_all(dir.join("ba"))?;
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

        let net = cfg.initial_network()?;
        net.save(&dir.join("checkpoints/initial.madn"))?;
        let (intrinsics, stream) = cfg.source.open()?;
        let (tx, rx) = mpsc::sync_channel::<Result<Keyframe>>(4);
        let producer = std::thread::Builder::new()
            .name("keyframe-producer".into())
            .spawn(move || {
                for kf in stream {
                    let stop = kf.is_err();
                    if tx.send(kf).is_err() || stop {
                        break;
                    }
                }
            })?;

        let graphs = MessageLog::new(
            BufWriter::new(std::fs::File::create(dir.join("graphs.log"))?),
            &intrinsics,
        )?;
        let mut lp = Loop {
            cfg,
            dir: &dir,
            store: KeyframeStore::new(intrinsics),
            trainer: Trainer::new(net, cfg.trainer.clone())?,
            scheduler: BaScheduler::new(BaJob::run),
            latest: 0,
            t: 0,
            submitted: 0,
            ba_rows: Vec::new(),
            graphs,
        };
        let mut controller = Controller::new(cfg.controller.clone())?;
        let mut result = Ok(());
        for kf in rx.iter() {
            let step = kf.and_then(|kf| {
                let (id, ts) = (kf.id, kf.timestamp);
                lp.store.insert(kf)?;
                lp.latest = id;
                lp.t = controller.state.t;
                let actions = controller.step(&mut lp, ts)?;
                if actions.contains(&Action::TriggerBa) {
                    log::debug!("t={} actions {actions:?}", lp.t);
                }
                Ok(())
            });
            if let Err(e) = step {
                result = Err(e);
                break;
            }
        }
        drop(rx);
        producer.join().map_err(|_| Error::Hook("keyframe producer panicked".into()))?;
        lp.t = controller.state.t;
        let settled = lp.settle();
        controller.write_event_log(std::fs::File::create(dir.join("events.csv"))?)?;
        write_ba_summary(&dir.join("ba/summary.csv"), &lp.ba_rows)?;
        lp.graphs.into_inner()?;
        ba_rows = lp.ba_rows.clone();
        n_kf = lp.store.len();
        m.summary.insert("keyframes".into(), n_kf as f64);
        m.summary.insert("ba_runs".into(), ba_rows.len() as f64);
        result?;
        settled?;

        let mut w = BufWriter::new(std::fs::File::create(dir.join("checkpoints/trainer.madx"))?);
        lp.trainer.write_checkpoint(&mut w)?;
        w.flush()?;
        lp.trainer.net.save(&dir.join("checkpoints/net.madn"))?;
        let traj: Vec<_> = lp.store.keyframes().iter().map(|k| (k.timestamp, k.pose)).collect();
        write_trajectory(&dir.join("trajectory.txt"), &traj)?;

        let kfs: Vec<&Keyframe> = lp.store.keyframes().iter().collect();
        if let Some((rows, pc, e)) = evaluate_frames(&lp.trainer.net, &kfs, &cfg.eval)? {
            write_metrics(&rows, (pc, e), std::fs::File::create(dir.join("metrics.csv"))?)?;
            m.summary.insert("percent_correct".into(), pc);
            m.summary.insert("frame_e_si".into(), e);
        }
        if let Ok(e) = map_depth_error(&lp.store) {
            m.summary.insert("map_e_si".into(), e.e_si);
        }
        Ok(())
    })?;
    Ok(RunOutcome {
        manifest,
        ba: ba_rows,
        keyframes: n_kf,
    })
}

fn write_ba_summary(path: &Path, rows: &[BaSummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "ba", "trigger_t", "merged_t", "keyframes", "landmarks", "residuals", "culled", "recull",
            "kept", "initial_cost", "final_cost", "accepted", "e_si_pre", "e_si_culled",
            "e_si_adjusted", "e_si_post",
            "graph_seq", "graph_sha256",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Source for commands that take a path: a directory is a TUM sequence, a `.toml`
/// file is a run config whose source is used, anything else a keyframe message log.
pub fn source_from_path(path: &Path) -> Result<SourceConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if path.is_dir() {
        return Ok(SourceConfig::Tum(TumSource {
            dir: path.to_path_buf(),
            ..TumSource::default()
        }));
    }
    if path.extension().is_some_and(|e| e == "toml") {
        return Ok(RunConfig::load(path)?.source);
    }
    Ok(SourceConfig::Log(LogSource {
        path: path.to_path_buf(),
    }))
}

/// Depth metrics of a checkpoint on a source.
pub fn eval(checkpoint: &Path, source: &SourceConfig, cfg: &DepthEvalConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let net = load_network(checkpoint)?;
    let (k, kfs) = source.load_all()?;
    if kfs.is_empty() {
        return Err(Error::invalid("source has no keyframes"));
    }
    net.check_input(k.height, k.width)?;
    let mut manifest = Manifest::new("eval");
    if let Some(s) = source.seed() {
        manifest.seeds.insert("source".into(), s);
    }
    with_manifest(out, manifest, |m| {
        let refs: Vec<&Keyframe> = kfs.iter().collect();
        let (rows, pc, e) = evaluate_frames(&net, &refs, cfg)?
            .ok_or_else(|| Error::invalid("source has no ground-truth depth"))?;
        write_metrics(&rows, (pc, e), std::fs::File::create(out.join("metrics.csv"))?)?;
        m.summary.insert("frames".into(), rows.len() as f64);
        m.summary.insert("percent_correct".into(), pc);
        m.summary.insert("frame_e_si".into(), e);
        Ok(())
    })
}

/// Culling and global BA over a whole source with a given network.
pub fn ba(
    checkpoint: &Path,
    source: &SourceConfig,
    cull: &CullConfig,
    options: &BaOptions,
    out: &Path,
) -> Result<Manifest> {
    let net = load_network(checkpoint)?;
    let (k, kfs) = source.load_all()?;
    if kfs.len() < 2 {
        return Err(Error::invalid("BA needs at least two keyframes"));
    }
    let mut store = KeyframeStore::new(k);
    for kf in kfs {
        store.insert(kf)?;
    }
    let mut manifest = Manifest::new("ba");
    if let Some(s) = source.seed() {
        manifest.seeds.insert("source".into(), s);
    }
    with_manifest(out, manifest, |m| {
        let job = BaJob {
            index: 0,
            trigger_t: 0,
            store: store.clone(),
            net,
            cull: cull.clone(),
            options: options.clone(),
        };
        let outcome = job.run()?;
        let graph = merge_outcome(&mut store, &outcome);
        if let Some(r) = &outcome.report {
            r.write_csv(std::fs::File::create(out.join("ba.csv"))?)?;
            m.summary.insert("initial_cost".into(), r.initial_cost);
            m.summary.insert("final_cost".into(), r.final_cost);
        }
        let traj: Vec<_> = store.keyframes().iter().map(|k| (k.timestamp, k.pose)).collect();
        write_trajectory(&out.join("trajectory.txt"), &traj)?;
        let mut log = MessageLog::new(BufWriter::new(std::fs::File::create(out.join("graph.log"))?), &k)?;
        log.graph(&graph)?;
        log.into_inner()?;
        m.summary.insert("culled".into(), outcome.culled.len() as f64);
        m.summary.insert("e_si_pre".into(), outcome.e_si_pre);
        m.summary.insert("e_si_post".into(), outcome.e_si_post);
        Ok(())
    })
}

/// Renders a synthetic sequence as a keyframe message log with TUM-format ground truth.
pub fn synth(spec: &SceneSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mut manifest = Manifest::new("synth");
    manifest.seeds.insert("scene".into(), spec.seed);
    with_manifest(out, manifest, |m| {
        let scene = SyntheticScene::new(spec.clone())?;
        let mut log = MessageLog::new(
            BufWriter::new(std::fs::File::create(out.join("keyframes.log"))?),
            &scene.intrinsics,
        )?;
        let (mut gt, mut est) = (Vec::new(), Vec::new());
        for i in 0..scene.frames() {
            let kf = scene.render(i)?;
            log.keyframe(&kf)?;
            gt.push((kf.timestamp, kf.gt_pose.expect("rendered")));
            est.push((kf.timestamp, kf.pose));
        }
        log.into_inner()?;
        write_trajectory(&out.join("groundtruth.txt"), &gt)?;
        write_trajectory(&out.join("trajectory.txt"), &est)?;
        let text = toml::to_string_pretty(spec).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(out.join("scene.toml"), text)?;
        m.summary.insert("frames".into(), scene.frames() as f64);
        Ok(())
    })
}

/// Running mean `r_i = (a_0 + ... + a_i) / (i + 1)`.
pub fn running_average(xs: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            sum += x;
            sum / (i + 1) as f64
        })
        .collect()
}

fn read_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(csv::Reader::from_path(path)?)
}

fn field(rec: &csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<f64> {
    let s = rec.get(i).unwrap_or("");
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("column {i}: not a number: {s:?}"),
    })
}

/// Writes `val_loss.csv`, `accuracy.csv` and `ba_cost.csv` from a run directory.
pub fn plot_export(run_dir: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let events = run_dir.join("events.csv");
    let metrics = run_dir.join("metrics.csv");
    let summary = run_dir.join("ba/summary.csv");
    let mut ev = read_csv(&events)?;
    let mut mt = read_csv(&metrics)?;

    let mut w = csv::Writer::from_path(out.join("val_loss.csv"))?;
    w.write_record(["t", "timestamp", "l_val", "n_converged"])?;
    for (line, rec) in ev.records().enumerate() {
        let rec = rec?;
        if rec.get(5) == Some("validate") {
            w.write_record([&rec[1], &rec[0], &rec[3], &rec[4]])?;
        }
        let _ = line;
    }
    w.flush()?;

    let mut rows = Vec::new();
    for (line, rec) in mt.records().enumerate() {
        let rec = rec?;
        if rec.get(0) == Some("summary") {
            continue;
        }
        let frame = field(&rec, 0, &metrics, line + 2)? as usize;
        rows.push((frame, rec[1].to_string(), field(&rec, 2, &metrics, line + 2)?));
    }
    let avg = running_average(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let mut w = csv::Writer::from_path(out.join("accuracy.csv"))?;
    w.write_record(["frame", "keyframe_id", "percent_correct", "running_average"])?;
    for ((frame, id, pc), a) in rows.iter().zip(avg) {
        w.write_record([frame.to_string(), id.clone(), format!("{pc:.6}"), format!("{a:.6}")])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("ba_cost.csv"))?;
    w.write_record(["ba", "iter", "pass", "cost", "accepted"])?;
    let mut runs = Vec::new();
    for rec in read_csv(&summary)?.records() {
        runs.push(rec?[0].to_string());
    }
    for ba in runs {
        let path = run_dir.join(format!("ba/ba_{ba}.csv"));
        if !path.exists() {
            continue;
        }
        for rec in read_csv(&path)?.records() {
            let rec = rec?;
            w.write_record([&ba, &rec[0], &rec[1], &rec[2], &rec[4]])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole file, mapping a missing file to [`Error::MissingFile`].
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_average_examples() {
        assert_eq!(running_average(&[0.0, 1.0]), vec![0.0, 0.5]);
        assert_eq!(running_average(&[3.0; 4]), vec![3.0; 4]);
        assert!(running_average(&[]).is_empty());
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "net_seed = 1\n\n[controller]\nm = 5\nbogus = 2\n").unwrap();
        match RunConfig::load(&p) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5, "{msg}");
                assert!(msg.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "[source]\nkind = \"synthetic\"\nframez = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_source_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[source]\nkind = \"tum\"\ndir = \"/nonexistent/seq\"\n").unwrap();
        match RunConfig::load(&p) {
            Err(Error::MissingFile(path)) => assert_eq!(path, PathBuf::from("/nonexistent/seq")),
            other => panic!("{other:?}"),
        }
    }
}
