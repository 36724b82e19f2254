//! End-to-end training: pooling + head models, Adam with elementwise clipping, a
//! stepwise exponential learning-rate schedule, frame sampling, validation-based
//! model selection, checkpoints and the finite-difference gradient checker.
//!
//! Every step draws its randomness from `rng::stream(seed, step)`, so a run resumed
//! from a checkpoint replays exactly the batches an uninterrupted run would see.
//! Per-example gradients are computed in parallel over fixed-size chunks and summed
//! in a fixed order, which keeps results independent of the worker count.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::binio::{len_u32, Decoder, Encoder};
use crate::classifier::{bce_loss, ClassifierHead, HeadCache, HeadConfig};
use crate::data::Dataset;
use crate::deep_pool::{AssignmentParams, CodeKind, ForwardCache, PoolLayer, PoolSpec, Variant};
use crate::error::{Error, Result};
use crate::gmm::{decode_gmm_from, encode_gmm_into, GmmModel};
use crate::linalg::Matrix;
use crate::metrics::{self, GroundTruth};
use crate::params::Params;
use crate::rng::{self, Rng, RngState};
use crate::stats_pool::{self, SecondOrderKind};

// ---------------------------------------------------------------------------
// models

/// Unsupervised code computed from a fixed background model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrozenCode {
    Sgmm { gamma: f64 },
    Vlad,
    Bow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenPool {
    pub ubm: GmmModel,
    pub code: FrozenCode,
    pub intra_norm: bool,
    pub final_norm: bool,
}

impl FrozenPool {
    pub fn code_len(&self) -> usize {
        match self.code {
            FrozenCode::Bow => self.ubm.k(),
            _ => self.ubm.k() * self.ubm.dim(),
        }
    }

    pub fn encode(&self, frames: &Matrix) -> Result<Matrix> {
        let stats = stats_pool::accumulate_frames(&self.ubm, frames, SecondOrderKind::None)?;
        let code = match self.code {
            FrozenCode::Sgmm { gamma } => stats_pool::sgmm_code(&stats, &self.ubm, gamma)?,
            FrozenCode::Vlad => stats_pool::vlad_code(&stats, &self.ubm)?,
            FrozenCode::Bow => stats_pool::bow_code(&stats),
        };
        Ok(stats_pool::normalize(&code, self.intra_norm, self.final_norm).values)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pooling {
    /// Mean of the frames.
    Average {
        dim: usize,
    },
    Frozen(FrozenPool),
    Trainable(PoolLayer),
}

impl Pooling {
    pub fn code_len(&self) -> usize {
        match self {
            Pooling::Average { dim } => *dim,
            Pooling::Frozen(f) => f.code_len(),
            Pooling::Trainable(l) => l.code_len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Pooling::Average { dim } => *dim,
            Pooling::Frozen(f) => f.ubm.dim(),
            Pooling::Trainable(l) => l.dim(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Pooling::Average { .. } => "avg".into(),
            Pooling::Frozen(f) => match f.code {
                FrozenCode::Sgmm { .. } => "sgmm".into(),
                FrozenCode::Vlad => "vlad".into(),
                FrozenCode::Bow => "bow".into(),
            },
            Pooling::Trainable(l) => format!("{}:{}", l.spec.code_kind.name(), l.variant()),
        }
    }
}

/// Pooling layer followed by the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub pooling: Pooling,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    pool: Option<ForwardCache>,
    head: HeadCache,
}

impl Model {
    pub fn new(pooling: Pooling, num_classes: usize, head: HeadConfig, rng: &mut Rng) -> Result<Self> {
        let head = ClassifierHead::random(pooling.code_len(), num_classes, head, rng)?;
        Ok(Self { pooling, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    /// Flattened pooled code for a set of frames.
    pub fn code(&self, frames: &Matrix) -> Result<Vec<f64>> {
        Ok(self.code_cached(frames)?.0)
    }

    fn code_cached(&self, frames: &Matrix) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        if frames.cols() != self.pooling.dim() {
            return Err(Error::DimensionMismatch { expected: self.pooling.dim(), got: frames.cols() });
        }
        match &self.pooling {
            Pooling::Average { .. } => Ok((stats_pool::avg_pool_frames(frames).into_vec(), None)),
            Pooling::Frozen(f) => Ok((f.encode(frames)?.into_vec(), None)),
            Pooling::Trainable(l) => {
                let (code, cache) = l.forward(frames)?;
                Ok((code.into_vec(), Some(cache)))
            }
        }
    }

    pub fn predict(&self, frames: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(frames)?.0)
    }

    pub fn forward(&self, frames: &Matrix) -> Result<(Vec<f64>, ModelCache)> {
        let (code, pool) = self.code_cached(frames)?;
        let (pred, head) = self.head.forward(&code)?;
        Ok((pred.0, ModelCache { pool, head }))
    }

    /// Parameter gradients (same layout as `self`) and `∂L/∂frames`, given `∂L/∂q`.
    pub fn backward(&self, frames: &Matrix, cache: &ModelCache, d_pred: &[f64]) -> Result<(Model, Matrix)> {
        let (head_grad, d_code) = self.head.backward(&cache.head, d_pred)?;
        let (pooling, d_frames) = match &self.pooling {
            Pooling::Trainable(l) => {
                let upstream = Matrix::from_vec(l.k(), l.dim(), d_code)?;
                let g = l.backward(frames, cache.pool.as_ref(), &upstream)?;
                (Pooling::Trainable(g.params), g.frames)
            }
            Pooling::Average { dim } => {
                let t = frames.rows() as f64;
                let mut d = Matrix::zeros(frames.rows(), *dim);
                for r in 0..frames.rows() {
                    for (o, g) in d.row_mut(r).iter_mut().zip(&d_code) {
                        *o = g / t;
                    }
                }
                (self.pooling.clone(), d)
            }
            // the frozen codes are not differentiated w.r.t. frames
            Pooling::Frozen(_) => (self.pooling.clone(), Matrix::zeros(frames.rows(), frames.cols())),
        };
        Ok((Model { pooling, head: head_grad }, d_frames))
    }

    /// Loss and parameter gradients for one labelled example.
    pub fn loss_and_grad(&self, frames: &Matrix, labels: &[u32]) -> Result<(f64, Model)> {
        let (pred, cache) = self.forward(frames)?;
        let (loss, d_pred) = bce_loss(&pred, labels);
        let (grad, _) = self.backward(frames, &cache, &d_pred)?;
        Ok((loss, grad))
    }

    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Params for Model {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut b = match &self.pooling {
            Pooling::Trainable(l) => l.blocks(),
            _ => Vec::new(),
        };
        b.extend(self.head.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut b = match &mut self.pooling {
            Pooling::Trainable(l) => l.blocks_mut(),
            _ => Vec::new(),
        };
        b.extend(self.head.blocks_mut());
        b
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Raw gradients are clipped elementwise to `[-clip, clip]`.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self { t: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }
}

pub fn clip(g: f64, bound: f64) -> f64 {
    g.clamp(-bound, bound)
}

/// One bias-corrected Adam update of `params` from `grads`.
pub fn adam_step<P: Params>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.num_params();
    if grads.num_params() != n || state.m.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: grads.num_params() });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut idx = 0;
    let grad_blocks = grads.blocks();
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grad_blocks) {
        for (pi, &gi) in p.iter_mut().zip(g) {
            let g = clip(gi, cfg.clip);
            let m = cfg.beta1 * state.m[idx] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * state.v[idx] + (1.0 - cfg.beta2) * g * g;
            state.m[idx] = m;
            state.v[idx] = v;
            *pi -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            idx += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// configuration and sampling

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub frames_per_video: usize,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            decay_factor: 0.8,
            decay_every: 2000,
            frames_per_video: 30,
            batch_size: 64,
            max_steps: 1000,
            eval_every: 100,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1]"));
        }
        if self.decay_every == 0 || self.eval_every == 0 {
            return Err(Error::config("decay_every and eval_every must be positive"));
        }
        if self.frames_per_video == 0 || self.batch_size == 0 {
            return Err(Error::config("frames_per_video and batch_size must be positive"));
        }
        if !(self.adam.clip > 0.0) {
            return Err(Error::config("clip bound must be positive"));
        }
        Ok(())
    }

    /// `lr0 · decay^⌊step / decay_every⌋`
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

/// `count` frames drawn uniformly with replacement.
pub fn sample_frames(frames: &Matrix, count: usize, rng: &mut Rng) -> Matrix {
    let t = frames.rows();
    let mut out = Matrix::zeros(count, frames.cols());
    for r in 0..count {
        let i = rng.random_range(0..t);
        out.row_mut(r).copy_from_slice(frames.row(i));
    }
    out
}

pub fn sample_frames_seeded(frames: &Matrix, count: usize, seed: u64) -> Matrix {
    sample_frames(frames, count, &mut rng::seeded(seed))
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub gap: f64,
    pub hit1: f64,
    pub n_videos: usize,
    /// Per-video label probabilities, aligned with the dataset records.
    pub scores: Vec<Vec<f64>>,
}

/// Scores every video on all of its frames.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let scored: Vec<(f64, Vec<f64>)> = data
        .records
        .par_iter()
        .map(|r| {
            let p = model.predict(&r.frames)?;
            Ok((bce_loss(&p, &r.labels).0, p))
        })
        .collect::<Result<_>>()?;
    let loss = scored.iter().map(|(l, _)| l).sum::<f64>() / data.len() as f64;
    let scores: Vec<Vec<f64>> = scored.into_iter().map(|(_, p)| p).collect();
    let (gap, hit1) = ranking_metrics(data, &scores)?;
    Ok(EvalResult { loss, gap, hit1, n_videos: data.len(), scores })
}

/// GAP@20 and Hit@1 of a dense score table.
pub fn ranking_metrics(data: &Dataset, scores: &[Vec<f64>]) -> Result<(f64, f64)> {
    let ids: Vec<String> = data.records.iter().map(|r| r.id.clone()).collect();
    let preds = metrics::predictions_from_scores(&ids, scores);
    let truth: GroundTruth = data
        .records
        .iter()
        .filter(|r| !r.labels.is_empty())
        .map(|r| (r.id.clone(), r.labels.iter().copied().collect()))
        .collect();
    Ok((metrics::gap(&preds, &truth, metrics::GAP_TOP_N)?, metrics::hit_at_1(&preds, &truth)?))
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub gap: f64,
    pub hit1: f64,
}

pub const LOG_HEADER: &str = "step,train_loss,val_loss,gap,hit1";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.train_loss, r.val_loss, r.gap, r.hit1));
    }
    s
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(log_csv(rows).as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub model: Model,
    pub adam: AdamState,
    /// Generator position for the next step.
    pub rng: RngState,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss seen at an evaluation point.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

const CHUNK: usize = 8;

/// Mean loss and mean gradient over a batch of `(frames, labels)` examples.
pub fn batch_gradient(model: &Model, batch: &[(Matrix, &[u32])]) -> Result<(f64, Model)> {
    let partial: Vec<(f64, Model)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = model.zeros_like();
            let mut loss = 0.0;
            for (frames, labels) in chunk {
                let (l, g) = model.loss_and_grad(frames, labels)?;
                loss += l;
                acc.add_assign_from(&g);
            }
            Ok((loss, acc))
        })
        .collect::<Result<_>>()?;
    let mut total = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &partial {
        loss += l;
        total.add_assign_from(g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

pub fn train(train_set: &Dataset, val_set: &Dataset, model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let adam = AdamState::new(model.num_params());
    let start = Checkpoint {
        step: 0,
        model,
        adam,
        rng: RngState::capture(cfg.seed, &rng::stream(cfg.seed, 0)),
        val_loss: f64::INFINITY,
    };
    run(train_set, val_set, start, None, Vec::new(), cfg)
}

/// Continues from `last`; `best` and `log` carry over the earlier part of the run.
pub fn resume(
    train_set: &Dataset,
    val_set: &Dataset,
    last: Checkpoint,
    best: Option<Checkpoint>,
    log: Vec<LogRow>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if last.rng.seed != cfg.seed {
        return Err(Error::config("resume seed differs from the checkpoint seed"));
    }
    run(train_set, val_set, last, best, log, cfg)
}

fn run(
    train_set: &Dataset,
    val_set: &Dataset,
    state: Checkpoint,
    mut best: Option<Checkpoint>,
    mut log: Vec<LogRow>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    let Checkpoint { mut step, mut model, mut adam, .. } = state;
    let mut loss_sum = 0.0;
    let mut loss_steps = 0u64;
    let mut last_val = f64::INFINITY;
    while step < cfg.max_steps {
        let mut rng = rng::stream(cfg.seed, step);
        let batch: Vec<(Matrix, &[u32])> = (0..cfg.batch_size)
            .map(|_| {
                let rec = &train_set.records[rng.random_range(0..train_set.len())];
                (sample_frames(&rec.frames, cfg.frames_per_video, &mut rng), rec.labels.as_slice())
            })
            .collect();
        let (loss, grad) = batch_gradient(&model, &batch)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteInput(format!("loss or gradient at step {step}")));
        }
        adam_step(&mut model, &grad, &mut adam, cfg.lr_at(step), &cfg.adam)?;
        step += 1;
        loss_sum += loss;
        loss_steps += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let ev = evaluate(&model, val_set)?;
            log.push(LogRow {
                step,
                train_loss: loss_sum / loss_steps as f64,
                val_loss: ev.loss,
                gap: ev.gap,
                hit1: ev.hit1,
            });
            loss_sum = 0.0;
            loss_steps = 0;
            last_val = ev.loss;
            if best.as_ref().is_none_or(|b| ev.loss < b.val_loss) {
                best = Some(Checkpoint {
                    step,
                    model: model.clone(),
                    adam: adam.clone(),
                    rng: RngState::capture(cfg.seed, &rng::stream(cfg.seed, step)),
                    val_loss: ev.loss,
                });
            }
        }
    }
    let last = Checkpoint {
        step,
        model,
        adam,
        rng: RngState::capture(cfg.seed, &rng::stream(cfg.seed, step)),
        val_loss: last_val,
    };
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, log })
}

// ---------------------------------------------------------------------------
// checkpoint format

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

fn bool_byte(d: &mut Decoder<'_>, what: &str) -> Result<bool> {
    let at = d.offset();
    match d.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Malformed { offset: at, what: format!("{what} is not a boolean") }),
    }
}

fn encode_blocks<P: Params>(p: &P, e: &mut Encoder) -> Result<()> {
    let blocks = p.blocks();
    e.u32(len_u32(blocks.len(), "block count")?);
    for (name, values) in blocks {
        e.str32(name)?.f64_slice(values)?;
    }
    Ok(())
}

fn decode_blocks_into<P: Params>(p: &mut P, d: &mut Decoder<'_>) -> Result<()> {
    let at = d.offset();
    let count = d.u32("block count")? as usize;
    let n_blocks = p.blocks().len();
    if count != n_blocks {
        return Err(Error::Malformed {
            offset: at,
            what: format!("expected {n_blocks} parameter blocks, found {count}"),
        });
    }
    for (name, dst) in p.blocks_mut() {
        let at = d.offset();
        let found = d.str32("block name")?;
        if found != name {
            return Err(Error::Malformed { offset: at, what: format!("expected block {name:?}, found {found:?}") });
        }
        let at = d.offset();
        let values = d.f64_vec(name)?;
        if values.len() != dst.len() {
            return Err(Error::Malformed {
                offset: at,
                what: format!("block {name} has {} values, expected {}", values.len(), dst.len()),
            });
        }
        dst.copy_from_slice(&values);
    }
    Ok(())
}

fn encode_layout(model: &Model, e: &mut Encoder) -> Result<()> {
    match &model.pooling {
        Pooling::Average { dim } => {
            e.u8(0).u32(len_u32(*dim, "dim")?);
        }
        Pooling::Frozen(f) => {
            e.u8(1);
            encode_gmm_into(&f.ubm, e)?;
            let (tag, gamma) = match f.code {
                FrozenCode::Sgmm { gamma } => (0, gamma),
                FrozenCode::Vlad => (1, 0.0),
                FrozenCode::Bow => (2, 0.0),
            };
            e.u8(tag).f64(gamma).u8(f.intra_norm as u8).u8(f.final_norm as u8);
        }
        Pooling::Trainable(l) => {
            let kind = match l.spec.code_kind {
                CodeKind::Vlad => 0,
                CodeKind::Dsgmm => 1,
            };
            e.u8(2)
                .u8(l.variant().tag())
                .u8(kind)
                .f64(l.spec.gamma)
                .u8(l.spec.intra_norm as u8)
                .u8(l.spec.final_norm as u8)
                .u8(l.anchors.is_none() as u8)
                .u32(len_u32(l.k(), "K")?)
                .u32(len_u32(l.dim(), "D")?);
        }
    }
    let h = &model.head;
    e.u32(len_u32(h.input_dim, "head input")?)
        .u32(len_u32(h.num_classes, "classes")?)
        .u32(len_u32(h.config.experts, "experts")?)
        .u8(h.config.input_gating as u8)
        .u8(h.config.output_gating as u8);
    Ok(())
}

fn decode_layout(d: &mut Decoder<'_>) -> Result<Model> {
    let at = d.offset();
    let pooling = match d.u8("pooling tag")? {
        0 => Pooling::Average { dim: d.u32("dim")? as usize },
        1 => {
            let ubm = decode_gmm_from(d)?;
            let at = d.offset();
            let tag = d.u8("frozen code")?;
            let gamma = d.f64("gamma")?;
            let code = match tag {
                0 => FrozenCode::Sgmm { gamma },
                1 => FrozenCode::Vlad,
                2 => FrozenCode::Bow,
                _ => return Err(Error::Malformed { offset: at, what: "unknown frozen code".into() }),
            };
            Pooling::Frozen(FrozenPool {
                ubm,
                code,
                intra_norm: bool_byte(d, "intra_norm")?,
                final_norm: bool_byte(d, "final_norm")?,
            })
        }
        2 => {
            let at = d.offset();
            let variant = Variant::from_tag(d.u8("variant")?)
                .ok_or_else(|| Error::Malformed { offset: at, what: "unknown variant".into() })?;
            let at = d.offset();
            let code_kind = match d.u8("code kind")? {
                0 => CodeKind::Vlad,
                1 => CodeKind::Dsgmm,
                _ => return Err(Error::Malformed { offset: at, what: "unknown code kind".into() }),
            };
            let gamma = d.f64("gamma")?;
            let intra_norm = bool_byte(d, "intra_norm")?;
            let final_norm = bool_byte(d, "final_norm")?;
            let share_anchors = bool_byte(d, "shared anchors")?;
            let k = d.u32("K")? as usize;
            let dim = d.u32("D")? as usize;
            let spec = PoolSpec { code_kind, gamma, intra_norm, final_norm, share_anchors };
            let anchors = if share_anchors { None } else { Some(Matrix::zeros(k, dim)) };
            Pooling::Trainable(PoolLayer::new(spec, AssignmentParams::zeros(variant, k, dim), anchors)?)
        }
        _ => return Err(Error::Malformed { offset: at, what: "unknown pooling tag".into() }),
    };
    let input = d.u32("head input")? as usize;
    let classes = d.u32("classes")? as usize;
    let experts = d.u32("experts")? as usize;
    let cfg = HeadConfig {
        experts,
        input_gating: bool_byte(d, "input gating")?,
        output_gating: bool_byte(d, "output gating")?,
    };
    if input != pooling.code_len() {
        return Err(Error::DimensionMismatch { expected: pooling.code_len(), got: input });
    }
    Ok(Model { pooling, head: ClassifierHead::zeros(input, classes, cfg)? })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut e = Encoder::new();
    e.magic(CKPT_MAGIC).u32(CKPT_VERSION).u64(ck.step).f64(ck.val_loss);
    e.u64(ck.rng.seed).u64(ck.rng.stream).u64(ck.rng.word_pos as u64).u64((ck.rng.word_pos >> 64) as u64);
    encode_layout(&ck.model, &mut e)?;
    encode_blocks(&ck.model, &mut e)?;
    e.u64(ck.adam.t).f64_slice(&ck.adam.m)?.f64_slice(&ck.adam.v)?;
    Ok(e.into_bytes())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Decoder::new(bytes);
    d.expect_magic(CKPT_MAGIC)?;
    let version = d.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion { format: "CKPT", version });
    }
    let step = d.u64("step")?;
    let val_loss = d.f64("val_loss")?;
    let seed = d.u64("rng seed")?;
    let stream = d.u64("rng stream")?;
    let lo = d.u64("rng position")? as u128;
    let hi = d.u64("rng position")? as u128;
    let mut model = decode_layout(&mut d)?;
    decode_blocks_into(&mut model, &mut d)?;
    let t = d.u64("adam step")?;
    let at = d.offset();
    let m = d.f64_vec("adam m")?;
    let v = d.f64_vec("adam v")?;
    if m.len() != model.num_params() || v.len() != model.num_params() {
        return Err(Error::Malformed { offset: at, what: "optimizer moments do not match the model".into() });
    }
    if !d.is_at_end() {
        return Err(Error::Malformed { offset: d.offset(), what: "trailing bytes after checkpoint".into() });
    }
    Ok(Checkpoint {
        step,
        model,
        adam: AdamState { t, m, v },
        rng: RngState { seed, stream, word_pos: lo | (hi << 64) },
        val_loss,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// gradient check

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSpec {
    pub variant: Variant,
    pub code_kind: CodeKind,
    pub intra_norm: bool,
    pub final_norm: bool,
    pub share_anchors: bool,
    pub gamma: f64,
    pub k: usize,
    pub dim: usize,
    pub frames: usize,
    pub classes: usize,
    pub coords_per_block: usize,
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Diagonal,
            code_kind: CodeKind::Dsgmm,
            intra_norm: true,
            final_norm: false,
            share_anchors: true,
            gamma: 0.125,
            k: 3,
            dim: 4,
            frames: 2,
            classes: 3,
            coords_per_block: 20,
            step: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of the full pooling + head gradient, including the
/// gradient w.r.t. the input frames.
pub fn gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let mut rng = rng::seeded(spec.seed);
    let pool_spec = PoolSpec {
        code_kind: spec.code_kind,
        gamma: spec.gamma,
        intra_norm: spec.intra_norm,
        final_norm: spec.final_norm,
        share_anchors: spec.share_anchors,
    };
    pool_spec.validate()?;
    let layer = PoolLayer::random(pool_spec, spec.variant, spec.k, spec.dim, &mut rng);
    let model = Model::new(Pooling::Trainable(layer), spec.classes, HeadConfig::default(), &mut rng)?;
    let frames = Matrix::from_vec(spec.frames, spec.dim, rng::normal_vec(&mut rng, spec.frames * spec.dim, 1.0))?;
    let n_labels = rng.random_range(1..=spec.classes);
    let labels: Vec<u32> =
        rand::seq::index::sample(&mut rng, spec.classes, n_labels).into_iter().map(|l| l as u32).collect();

    let loss = |m: &Model, x: &Matrix| -> Result<f64> { Ok(bce_loss(&m.predict(x)?, &labels).0) };
    let (pred, cache) = model.forward(&frames)?;
    let (_, d_pred) = bce_loss(&pred, &labels);
    let (grad, d_frames) = model.backward(&frames, &cache, &d_pred)?;

    let mut blocks = Vec::new();
    let grad_blocks = grad.blocks();
    for (bi, (name, values)) in model.blocks().iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let coords = pick_coords(values.len(), spec.coords_per_block, &mut rng);
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let mut plus = model.clone();
            plus.blocks_mut()[bi].1[i] += spec.step;
            let mut minus = model.clone();
            minus.blocks_mut()[bi].1[i] -= spec.step;
            let numeric = (loss(&plus, &frames)? - loss(&minus, &frames)?) / (2.0 * spec.step);
            worst = worst.max(relative_error(grad_blocks[bi].1[i], numeric));
        }
        blocks.push(BlockReport { name: name.to_string(), checked: coords.len(), max_rel_err: worst });
    }
    let coords = pick_coords(frames.as_slice().len(), spec.coords_per_block, &mut rng);
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let mut plus = frames.clone();
        plus.as_mut_slice()[i] += spec.step;
        let mut minus = frames.clone();
        minus.as_mut_slice()[i] -= spec.step;
        let numeric = (loss(&model, &plus)? - loss(&model, &minus)?) / (2.0 * spec.step);
        worst = worst.max(relative_error(d_frames.as_slice()[i], numeric));
    }
    blocks.push(BlockReport { name: "frames".into(), checked: coords.len(), max_rel_err: worst });
    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { blocks, max_rel_err, threshold: spec.threshold })
}

/// Every index when the block is small, otherwise `count` distinct random ones.
fn pick_coords(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, len, count).into_vec();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Vec<f64>);

    impl Params for Scalar {
        fn blocks(&self) -> Vec<(&'static str, &[f64])> {
            vec![("x", &self.0)]
        }
        fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("x", &mut self.0)]
        }
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = Scalar(vec![0.0]);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &Scalar(vec![1.0]), &mut s, 0.1, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((p.0[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Scalar(vec![1.5]);
        let mut s = AdamState { t: 3, m: vec![0.4], v: vec![0.2] };
        adam_step(&mut p, &Scalar(vec![0.0]), &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert!((s.m[0] - 0.36).abs() < 1e-15);
        assert!((s.v[0] - 0.1998).abs() < 1e-15);
        assert!(p.0[0] < 1.5);

        let mut p = Scalar(vec![1.5]);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &Scalar(vec![0.0]), &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.0[0], 1.5);
    }

    #[test]
    fn gradients_are_clipped_before_moments() {
        let mut a = Scalar(vec![0.0]);
        let mut b = Scalar(vec![0.0]);
        let mut sa = AdamState::new(1);
        let mut sb = AdamState::new(1);
        adam_step(&mut a, &Scalar(vec![5.0]), &mut sa, 0.1, &AdamConfig::default()).unwrap();
        adam_step(&mut b, &Scalar(vec![1.0]), &mut sb, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn lr_schedule_is_stepwise() {
        let cfg = TrainConfig { lr: 0.5, decay_factor: 0.8, decay_every: 10, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(9), 0.5);
        assert_eq!(cfg.lr_at(10), 0.5 * 0.8);
        assert_eq!(cfg.lr_at(25), 0.5 * 0.8f64.powi(2));
    }

    #[test]
    fn sampling_single_frame_repeats_it() {
        let f = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let s = sample_frames_seeded(&f, 30, 4);
        assert_eq!(s.rows(), 30);
        assert!(s.iter_rows().all(|r| r == [1.0, 2.0]));
        let g = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(sample_frames_seeded(&g, 10, 7), sample_frames_seeded(&g, 10, 7));
    }

    #[test]
    fn default_gradcheck_passes() {
        let r = gradcheck(&GradcheckSpec::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.blocks.iter().all(|b| b.checked > 0));
    }
}
