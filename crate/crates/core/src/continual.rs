//! Online fine-tuning with experience replay and parameter-importance regularization.
//!
//! Importance is consolidated after every batch and anchors the next batch to the
//! parameters it started from.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, ParamVector, Tape, Tensor, Var};
use crate::depth_net::{read_f64, read_u32, read_u64, DepthNet};
use crate::error::{Error, Result};
use crate::keyframe::{Keyframe, KeyframeStore};
use crate::losses::{train_loss, LossBreakdown, LossWeights, TrainItem};

pub const EXTENDED_MAGIC: &[u8; 4] = b"MADX";
pub const EXTENDED_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    Ewc,
    Si,
    Mas,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceBound {
    /// `max(F/j, max_F)`.
    Floor,
    /// `min(F/j, max_F)`.
    Ceiling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub beta: f64,
    pub lambda_si: f64,
    pub lambda_mas: f64,
    pub max_f: f64,
    pub xi: f64,
    pub importance_bound: ImportanceBound,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::Ewc,
            beta: 5e7,
            lambda_si: 1.0,
            lambda_mas: 0.5,
            max_f: 0.001,
            xi: 0.1,
            importance_bound: ImportanceBound::Floor,
        }
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda_si >= 0.0 && self.lambda_mas >= 0.0) {
            return Err(Error::Config("regularizer strengths must be non-negative".into()));
        }
        if !(self.max_f > 0.0 && self.xi > 0.0) {
            return Err(Error::Config("max_f and xi must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier in front of `sum_i Omega_i (theta_i - theta*_i)^2`.
    pub fn coefficient(&self) -> f64 {
        match self.kind {
            RegularizerKind::Ewc => self.beta / 2.0,
            RegularizerKind::Si => self.lambda_si,
            RegularizerKind::Mas => self.lambda_mas,
            RegularizerKind::None => 0.0,
        }
    }
}

/// Running empirical Fisher diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    pub f_accum: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub j: u64,
}

impl ImportanceMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            f_accum: vec![0.0; n],
            f_hat: vec![0.0; n],
            j: 0,
        }
    }

    /// Adds the squared batch gradient and refreshes the bounded average.
    pub fn consolidate(
        &mut self,
        grads: &[f64],
        max_f: f64,
        bound: ImportanceBound,
    ) -> Result<()> {
        if grads.len() != self.f_accum.len() {
            return Err(Error::LayoutMismatch);
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "consolidate_fisher",
            });
        }
        for (f, g) in self.f_accum.iter_mut().zip(grads) {
            *f += g * g;
        }
        self.j += 1;
        let j = self.j as f64;
        for (h, f) in self.f_hat.iter_mut().zip(&self.f_accum) {
            let avg = f / j;
            *h = match bound {
                ImportanceBound::Floor => avg.max(max_f),
                ImportanceBound::Ceiling => avg.min(max_f),
            };
        }
        Ok(())
    }
}

/// Path-integral importance state.
#[derive(Clone, Debug, PartialEq)]
pub struct SiState {
    pub omega: Vec<f64>,
    pub theta_start: Vec<f32>,
}

impl SiState {
    pub fn new(theta: &ParamVector) -> Self {
        Self {
            omega: vec![0.0; theta.len()],
            theta_start: theta.values().to_vec(),
        }
    }

    /// `omega -= grads * (after - before)`.
    pub fn update(&mut self, grads: &[f64], before: &[f32], after: &[f32]) -> Result<()> {
        let n = self.omega.len();
        if grads.len() != n || before.len() != n || after.len() != n {
            return Err(Error::LayoutMismatch);
        }
        for i in 0..n {
            self.omega[i] -= grads[i] * (after[i] as f64 - before[i] as f64);
        }
        Ok(())
    }

    /// `max(0, omega / ((theta - theta_start)^2 + xi))`.
    pub fn importance(&self, theta: &[f32], xi: f64) -> Vec<f64> {
        self.omega
            .iter()
            .zip(theta.iter().zip(&self.theta_start))
            .map(|(w, (t, s))| {
                let d = *t as f64 - *s as f64;
                (w / (d * d + xi)).max(0.0)
            })
            .collect()
    }
}

/// Average of per-batch output-sensitivity importances.
#[derive(Clone, Debug, PartialEq)]
pub struct MasState {
    pub accum: Vec<f64>,
    pub batches: u64,
}

impl MasState {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            batches: 0,
        }
    }

    pub fn add_batch(&mut self, omega: &[f64]) -> Result<()> {
        if omega.len() != self.accum.len() {
            return Err(Error::LayoutMismatch);
        }
        for (a, o) in self.accum.iter_mut().zip(omega) {
            *a += o;
        }
        self.batches += 1;
        Ok(())
    }

    pub fn importance(&self) -> Vec<f64> {
        let n = self.batches.max(1) as f64;
        self.accum.iter().map(|a| a / n).collect()
    }
}

/// `coef * sum_i importance_i (theta_i - anchor_i)^2` over bound parameter nodes.
pub fn importance_penalty<T: Element>(
    tape: &mut Tape<T>,
    params: &[Var],
    anchor: &ParamVector,
    importance: &[f64],
    coef: f64,
) -> Result<Var> {
    let segs = anchor.layout().segments();
    if segs.len() != params.len() || importance.len() != anchor.len() {
        return Err(Error::LayoutMismatch);
    }
    let mut total: Option<Var> = None;
    for (seg, &p) in segs.iter().zip(params) {
        if tape.value(p).len() != seg.len() {
            return Err(Error::LayoutMismatch);
        }
        let range = seg.offset..seg.offset + seg.len();
        let star = Tensor::from_fn(seg.shape.clone(), |i| {
            T::of(anchor.values()[seg.offset + i] as f64)
        });
        let w = Tensor::from_fn(seg.shape.clone(), |i| T::of(importance[range.start + i]));
        let star = tape.constant(star)?;
        let w = tape.constant(w)?;
        let d = tape.sub(p, star)?;
        let d2 = tape.square(d)?;
        let wd = tape.mul(d2, w)?;
        let s = tape.sum(wd)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero()))?,
    };
    tape.scale(total, coef)
}

/// `sum_i (beta/2) F_i (theta_i - theta*_i)^2`.
pub fn ewc_penalty<T: Element>(
    tape: &mut Tape<T>,
    params: &[Var],
    theta_star: &ParamVector,
    f_hat: &[f64],
    beta: f64,
) -> Result<Var> {
    importance_penalty(tape, params, theta_star, f_hat, beta / 2.0)
}

/// Mean over images of `|d ||G||^2 / d theta|` with `G` the pre-sigmoid head output.
pub fn mas_importance(net: &DepthNet, images: &[&Tensor<f32>]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("importance needs at least one sample"));
    }
    let mut acc = vec![0.0f64; net.params.len()];
    for img in images {
        let mut tape = Tape::<f32>::new();
        let vars = net.params.bind(&mut tape)?;
        let out = net.forward(&mut tape, &vars, img)?;
        let sq = tape.square(out.logits)?;
        let s = tape.sum(sq)?;
        let g = tape.backward(s)?;
        for (a, v) in acc.iter_mut().zip(net.params.gather(&g, &vars)) {
            *a += (v as f64).abs();
        }
    }
    let n = images.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LayoutMismatch);
        }
        let c = &self.config;
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] = (params[i] as f64 - c.lr * mh / (vh.sqrt() + c.eps)) as f32;
        }
        Ok(())
    }
}

/// Uniform sampler over previously trained keyframe ids.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    ids: Vec<u64>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(seed: u64) -> Self {
        Self {
            ids: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u64) {
        if !self.ids.contains(&id) {
            self.ids.push(id);
        }
    }

    pub fn sample(&mut self) -> Option<u64> {
        if self.ids.is_empty() {
            None
        } else {
            Some(self.ids[self.rng.gen_range(0..self.ids.len())])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Latest keyframe and its predecessor.
    RecentOnly,
    /// Latest keyframe and one uniformly replayed older keyframe.
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub policy: BatchPolicy,
    pub inner_iters: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub regularizer: RegularizerConfig,
    pub replay_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            policy: BatchPolicy::Replay,
            inner_iters: 1,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            regularizer: RegularizerConfig::default(),
            replay_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub batch: Vec<u64>,
    /// Training loss at the first inner iteration.
    pub loss: LossBreakdown,
    /// Regularizer value at the last inner iteration.
    pub penalty: f64,
    pub skipped: bool,
}

/// Owns the network, optimizer, replay buffer and importance state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: DepthNet,
    pub config: TrainerConfig,
    pub optimizer: Adam,
    pub replay: ReplayBuffer,
    pub fisher: ImportanceMatrix,
    pub si: SiState,
    pub mas: MasState,
    /// Parameters at the start of the current batch.
    pub anchor: ParamVector,
}

/// Immediate neighbors of the keyframe at store index `idx`.
pub fn neighbors_of(store: &KeyframeStore, idx: usize) -> Vec<&Keyframe> {
    let kfs = store.keyframes();
    let mut out = Vec::with_capacity(2);
    if idx > 0 {
        out.push(&kfs[idx - 1]);
    }
    if idx + 1 < kfs.len() {
        out.push(&kfs[idx + 1]);
    }
    out
}

impl Trainer {
    pub fn new(net: DepthNet, config: TrainerConfig) -> Result<Self> {
        config.regularizer.validate()?;
        config.weights.validate()?;
        if config.inner_iters == 0 {
            return Err(Error::Config("inner_iters must be at least 1".into()));
        }
        let n = net.params.len();
        Ok(Self {
            optimizer: Adam::new(config.adam.clone(), n),
            replay: ReplayBuffer::new(config.replay_seed),
            fisher: ImportanceMatrix::new(n),
            si: SiState::new(&net.params),
            mas: MasState::new(n),
            anchor: net.params.clone(),
            net,
            config,
        })
    }

    /// Current per-parameter importance for the configured regularizer.
    pub fn importance(&self) -> Option<Vec<f64>> {
        match self.config.regularizer.kind {
            RegularizerKind::Ewc => Some(self.fisher.f_hat.clone()),
            RegularizerKind::Si => Some(
                self.si
                    .importance(self.net.params.values(), self.config.regularizer.xi),
            ),
            RegularizerKind::Mas => Some(self.mas.importance()),
            RegularizerKind::None => None,
        }
    }

    fn select_batch(&mut self, store: &KeyframeStore, latest: u64) -> Result<Vec<u64>> {
        let idx = store
            .index_of(latest)
            .ok_or_else(|| Error::invalid(format!("keyframe {latest} not in store")))?;
        let mut batch = vec![latest];
        match self.config.policy {
            BatchPolicy::RecentOnly => {
                if idx > 0 {
                    batch.push(store.keyframes()[idx - 1].id);
                }
            }
            BatchPolicy::Replay => {
                if let Some(j) = self.replay.sample() {
                    batch.push(j);
                }
            }
        }
        Ok(batch)
    }

    /// One fine-tuning batch on the latest keyframe.
    pub fn fine_tune_step(&mut self, store: &KeyframeStore, latest: u64) -> Result<StepReport> {
        let batch_ids = self.select_batch(store, latest)?;
        let items: Vec<TrainItem> = batch_ids
            .iter()
            .map(|id| {
                let idx = store.index_of(*id).expect("selected from store");
                TrainItem {
                    kf: &store.keyframes()[idx],
                    neighbors: neighbors_of(store, idx),
                }
            })
            .collect();

        let theta_cpy = self.net.params.clone();
        let opt_cpy = self.optimizer.clone();
        let si_cpy = self.si.clone();
        self.anchor = theta_cpy.clone();
        let k = store.intrinsics;
        let coef = self.config.regularizer.coefficient();
        let importance = if coef > 0.0 { self.importance() } else { None };

        let mut report = StepReport {
            batch: batch_ids.clone(),
            ..StepReport::default()
        };
        let mut first_grads: Option<Vec<f64>> = None;
        for it in 0..self.config.inner_iters {
            let mut tape = Tape::<f32>::new();
            let vars = self.net.params.bind(&mut tape)?;
            let loss = match train_loss(
                &mut tape,
                &vars,
                &self.net,
                &k,
                &items,
                &self.config.weights,
            ) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Ok(self.skip(report, theta_cpy, opt_cpy, si_cpy)),
                Err(e) => return Err(e),
            };
            let mut root = loss.total;
            if let Some(imp) = &importance {
                let pen = importance_penalty(&mut tape, &vars, &self.anchor, imp, coef)?;
                report.penalty = tape.scalar(pen) as f64;
                root = tape.add(root, pen)?;
            }
            let grads = match tape.backward(root) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Ok(self.skip(report, theta_cpy, opt_cpy, si_cpy)),
                Err(e) => return Err(e),
            };
            let g: Vec<f64> = self
                .net
                .params
                .gather(&grads, &vars)
                .into_iter()
                .map(|v| v as f64)
                .collect();
            if it == 0 {
                report.loss = loss.breakdown;
                // At the anchor the penalty gradient is exactly zero, so this is the
                // training-loss gradient.
                first_grads = Some(g.clone());
            }
            let before = self.net.params.values().to_vec();
            self.optimizer.step(self.net.params.values_mut(), &g)?;
            if self.net.params.values().iter().any(|v| !v.is_finite()) {
                return Ok(self.skip(report, theta_cpy, opt_cpy, si_cpy));
            }
            if self.config.regularizer.kind == RegularizerKind::Si {
                self.si.update(&g, &before, self.net.params.values())?;
            }
        }

        let g = first_grads.expect("at least one inner iteration");
        match self.config.regularizer.kind {
            RegularizerKind::Ewc => {
                let rc = &self.config.regularizer;
                self.fisher.consolidate(&g, rc.max_f, rc.importance_bound)?;
            }
            RegularizerKind::Mas => {
                let images: Vec<&Tensor<f32>> = items.iter().map(|i| &i.kf.image).collect();
                let omega = mas_importance(&self.net, &images)?;
                self.mas.add_batch(&omega)?;
            }
            RegularizerKind::Si | RegularizerKind::None => {}
        }
        self.replay.push(latest);
        self.net.step += 1;
        Ok(report)
    }

    fn skip(
        &mut self,
        mut report: StepReport,
        theta: ParamVector,
        opt: Adam,
        si: SiState,
    ) -> StepReport {
        log::warn!("fine-tune batch {:?} skipped: non-finite loss", report.batch);
        self.net.params = theta;
        self.optimizer = opt;
        self.si = si;
        report.skipped = true;
        report
    }

    /// Network, optimizer moments, importance state and replay buffer.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(EXTENDED_MAGIC)?;
        w.write_all(&EXTENDED_VERSION.to_le_bytes())?;
        self.net.write_body(&mut w)?;
        let c = &self.optimizer.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.optimizer.t.to_le_bytes())?;
        put_f64s(&mut w, &self.optimizer.m)?;
        put_f64s(&mut w, &self.optimizer.v)?;
        put_f64s(&mut w, &self.fisher.f_accum)?;
        put_f64s(&mut w, &self.fisher.f_hat)?;
        w.write_all(&self.fisher.j.to_le_bytes())?;
        put_f64s(&mut w, &self.si.omega)?;
        for v in &self.si.theta_start {
            w.write_all(&v.to_le_bytes())?;
        }
        put_f64s(&mut w, &self.mas.accum)?;
        w.write_all(&self.mas.batches.to_le_bytes())?;
        for v in self.anchor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.replay.ids.len() as u32).to_le_bytes())?;
        for id in &self.replay.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.write_all(&self.replay.rng.get_seed())?;
        w.write_all(&self.replay.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.replay.rng.get_word_pos().to_le_bytes())?;
        Ok(())
    }

    /// Restores a trainer; `config` supplies the non-persisted settings.
    pub fn read_checkpoint<R: Read>(mut r: R, config: TrainerConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EXTENDED_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != EXTENDED_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let net = DepthNet::read_body(&mut r)?;
        let n = net.params.len();
        let adam_cfg = AdamConfig {
            lr: read_f64(&mut r)?,
            beta1: read_f64(&mut r)?,
            beta2: read_f64(&mut r)?,
            eps: read_f64(&mut r)?,
        };
        let t = read_u64(&mut r)?;
        let m = get_f64s(&mut r, n)?;
        let v = get_f64s(&mut r, n)?;
        let f_accum = get_f64s(&mut r, n)?;
        let f_hat = get_f64s(&mut r, n)?;
        let j = read_u64(&mut r)?;
        let omega = get_f64s(&mut r, n)?;
        let theta_start = crate::depth_net::read_f32s(&mut r, n)?;
        let accum = get_f64s(&mut r, n)?;
        let batches = read_u64(&mut r)?;
        let anchor_vals = crate::depth_net::read_f32s(&mut r, n)?;
        let n_ids = read_u32(&mut r)? as usize;
        let ids = (0..n_ids)
            .map(|_| read_u64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        r.read_exact(&mut wp)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(wp));
        let anchor = ParamVector::new(net.params.layout().clone(), anchor_vals)?;
        let mut trainer = Trainer::new(net, config)?;
        trainer.optimizer = Adam {
            config: adam_cfg,
            m,
            v,
            t,
        };
        trainer.fisher = ImportanceMatrix { f_accum, f_hat, j };
        trainer.si = SiState { omega, theta_start };
        trainer.mas = MasState { accum, batches };
        trainer.anchor = anchor;
        trainer.replay = ReplayBuffer { ids, rng };
        Ok(trainer)
    }
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}
