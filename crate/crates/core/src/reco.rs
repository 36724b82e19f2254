//! Co-watch video embeddings and watch prediction.
//!
//! A video is embedded as `f(g(v))`: the trainable pooling layer `g` followed by a
//! two-layer network whose output is L2-normalized. The pair is trained with a
//! triplet hinge on co-watched (anchor, positive) versus skipped (negative) videos.
//! Watch prediction scores a candidate either by its average / maximum cosine
//! similarity to the user's watch history, or with a GLMix logistic model
//! `logit p = β₀ + β_{U,0} + f(g(v))ᵀ β_U` fitted by block coordinate Newton steps.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng as _;
use rayon::prelude::*;

use crate::binio::{len_u32, Decoder, Encoder};
use crate::data::{Dataset, Interaction, Triplet};
use crate::deep_pool::{AssignmentParams, CodeKind, ForwardCache, PoolLayer, PoolSpec, Variant};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm2, sigmoid, spd_solve, Matrix};
use crate::metrics;
use crate::params::Params;
use crate::rng::{self, Rng};
use crate::trainer::{adam_step, AdamConfig, AdamState};

pub const DEFAULT_MARGIN: f64 = 0.2;

// ---------------------------------------------------------------------------
// embedding network

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { embed_dim: 64, hidden: 256 }
    }
}

/// `f(x) = normalize(W₂ tanh(W₁ x + b₁) + b₂)`; a zero pre-norm vector maps to e₁.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNet {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EmbedCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
    norm: f64,
}

impl EmbedNet {
    pub fn zeros(input: usize, cfg: EmbedConfig) -> Self {
        Self {
            w1: Matrix::zeros(cfg.hidden, input),
            b1: vec![0.0; cfg.hidden],
            w2: Matrix::zeros(cfg.embed_dim, cfg.hidden),
            b2: vec![0.0; cfg.embed_dim],
        }
    }

    pub fn random(input: usize, cfg: EmbedConfig, rng: &mut Rng) -> Result<Self> {
        if input == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::config("embedding dimensions must be positive"));
        }
        let mut n = Self::zeros(input, cfg);
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (cfg.hidden as f64).sqrt();
        n.w1 = Matrix::from_vec(cfg.hidden, input, rng::normal_vec(rng, cfg.hidden * input, s1))?;
        n.w2 = Matrix::from_vec(cfg.embed_dim, cfg.hidden, rng::normal_vec(rng, cfg.embed_dim * cfg.hidden, s2))?;
        Ok(n)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, EmbedCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let hidden: Vec<f64> = (0..self.w1.rows()).map(|i| (dot(self.w1.row(i), x) + self.b1[i]).tanh()).collect();
        let pre: Vec<f64> = (0..self.w2.rows()).map(|i| dot(self.w2.row(i), &hidden) + self.b2[i]).collect();
        let norm = norm2(&pre);
        let out = if norm > 0.0 {
            pre.iter().map(|v| v / norm).collect()
        } else {
            let mut e1 = vec![0.0; pre.len()];
            e1[0] = 1.0;
            e1
        };
        Ok((out.clone(), EmbedCache { input: x.to_vec(), hidden, out, norm }))
    }

    pub fn backward(&self, cache: &EmbedCache, d_out: &[f64]) -> (EmbedNet, Vec<f64>) {
        let mut g =
            EmbedNet::zeros(self.input_dim(), EmbedConfig { embed_dim: self.embed_dim(), hidden: self.w1.rows() });
        let mut d_x = vec![0.0; self.input_dim()];
        if cache.norm == 0.0 {
            return (g, d_x);
        }
        let yg = dot(&cache.out, d_out);
        let d_pre: Vec<f64> = d_out.iter().zip(&cache.out).map(|(d, y)| (d - y * yg) / cache.norm).collect();
        let mut d_hidden = vec![0.0; self.w1.rows()];
        for (i, &dp) in d_pre.iter().enumerate() {
            g.b2[i] = dp;
            axpy(dp, &cache.hidden, g.w2.row_mut(i));
            axpy(dp, self.w2.row(i), &mut d_hidden);
        }
        for (i, dh) in d_hidden.iter().enumerate() {
            let h = cache.hidden[i];
            let da = dh * (1.0 - h * h);
            g.b1[i] = da;
            axpy(da, &cache.input, g.w1.row_mut(i));
            axpy(da, self.w1.row(i), &mut d_x);
        }
        (g, d_x)
    }
}

impl Params for EmbedNet {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("embed.w1", self.w1.as_slice()),
            ("embed.b1", &self.b1),
            ("embed.w2", self.w2.as_slice()),
            ("embed.b2", &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("embed.w1", self.w1.as_mut_slice()),
            ("embed.b1", &mut self.b1),
            ("embed.w2", self.w2.as_mut_slice()),
            ("embed.b2", &mut self.b2),
        ]
    }
}

/// Pooling layer composed with the embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoModel {
    pub pool: PoolLayer,
    pub net: EmbedNet,
}

struct EmbedTrace {
    pool: ForwardCache,
    net: EmbedCache,
}

impl RecoModel {
    pub fn new(pool: PoolLayer, cfg: EmbedConfig, rng: &mut Rng) -> Result<Self> {
        let net = EmbedNet::random(pool.code_len(), cfg, rng)?;
        Ok(Self { pool, net })
    }

    pub fn embed(&self, frames: &Matrix) -> Result<Vec<f64>> {
        Ok(self.embed_traced(frames)?.0)
    }

    fn embed_traced(&self, frames: &Matrix) -> Result<(Vec<f64>, EmbedTrace)> {
        let (code, pool) = self.pool.forward(frames)?;
        let (out, net) = self.net.forward(code.as_slice())?;
        Ok((out, EmbedTrace { pool, net }))
    }

    fn backward(&self, frames: &Matrix, trace: &EmbedTrace, d_out: &[f64]) -> Result<RecoModel> {
        let (net, d_code) = self.net.backward(&trace.net, d_out);
        let upstream = Matrix::from_vec(self.pool.k(), self.pool.dim(), d_code)?;
        let pool = self.pool.backward(frames, Some(&trace.pool), &upstream)?.params;
        Ok(RecoModel { pool, net })
    }

    pub fn zeros_like(&self) -> RecoModel {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Params for RecoModel {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut b = self.pool.blocks();
        b.extend(self.net.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut b = self.pool.blocks_mut();
        b.extend(self.net.blocks_mut());
        b
    }
}

// ---------------------------------------------------------------------------
// triplet loss

/// One hinge term from squared distances.
pub fn triplet_term(d_ap: f64, d_an: f64, alpha: f64) -> f64 {
    (d_ap - d_an + alpha).max(0.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Video id → frames lookup over a dataset.
pub fn frame_index(data: &Dataset) -> HashMap<&str, &Matrix> {
    data.records.iter().map(|r| (r.id.as_str(), &r.frames)).collect()
}

/// Summed triplet hinge loss and its gradient through the network and the pooling.
pub fn triplet_loss(
    model: &RecoModel,
    frames: &HashMap<&str, &Matrix>,
    triplets: &[Triplet],
    alpha: f64,
) -> Result<(f64, RecoModel)> {
    if !(alpha >= 0.0) {
        return Err(Error::config("margin must be non-negative"));
    }
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for t in triplets {
        for id in [&t.anchor, &t.positive, &t.negative] {
            if !frames.contains_key(id.as_str()) {
                return Err(Error::data(format!("triplet references unknown video {id:?}")));
            }
            ids.insert(id.as_str());
        }
    }
    let ids: Vec<&str> = ids.into_iter().collect();
    let traced: Vec<(Vec<f64>, EmbedTrace)> =
        ids.par_iter().map(|id| model.embed_traced(frames[id])).collect::<Result<_>>()?;
    let slot: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let e_dim = model.net.embed_dim();
    let mut d_emb = vec![vec![0.0; e_dim]; ids.len()];
    let mut loss = 0.0;
    for t in triplets {
        let (a, p, n) = (slot[t.anchor.as_str()], slot[t.positive.as_str()], slot[t.negative.as_str()]);
        let (fa, fp, fnn) = (&traced[a].0, &traced[p].0, &traced[n].0);
        let term = triplet_term(sq_dist(fa, fp), sq_dist(fa, fnn), alpha);
        if term <= 0.0 {
            continue;
        }
        loss += term;
        for i in 0..e_dim {
            d_emb[a][i] += 2.0 * (fnn[i] - fp[i]);
            d_emb[p][i] -= 2.0 * (fa[i] - fp[i]);
            d_emb[n][i] += 2.0 * (fa[i] - fnn[i]);
        }
    }
    let grads: Vec<Option<RecoModel>> = ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            if d_emb[i].iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            model.backward(frames[id], &traced[i].1, &d_emb[i]).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut total = model.zeros_like();
    for g in grads.iter().flatten() {
        total.add_assign_from(g);
    }
    Ok((loss, total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedTrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_MARGIN, lr: 1e-3, steps: 300, batch_size: 32, adam: AdamConfig::default(), seed: 0 }
    }
}

/// Adam on the mean triplet loss over random mini-batches; returns the model and the
/// per-step batch losses.
pub fn train_embedding(
    mut model: RecoModel,
    data: &Dataset,
    triplets: &[Triplet],
    cfg: &EmbedTrainConfig,
) -> Result<(RecoModel, Vec<f64>)> {
    if triplets.is_empty() {
        return Err(Error::data("no triplets to train on"));
    }
    let frames = frame_index(data);
    let mut adam = AdamState::new(model.num_params());
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = rng::stream(cfg.seed, step);
        let batch: Vec<Triplet> =
            (0..cfg.batch_size).map(|_| triplets[rng.random_range(0..triplets.len())].clone()).collect();
        let (loss, mut grad) = triplet_loss(&model, &frames, &batch, cfg.alpha)?;
        grad.scale(1.0 / batch.len() as f64);
        adam_step(&mut model, &grad, &mut adam, cfg.lr, &cfg.adam)?;
        history.push(loss / batch.len() as f64);
    }
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// similarity scores

/// Average and maximum cosine similarity of a unit-norm candidate to a unit-norm history.
pub fn sim_scores(history: &[Vec<f64>], candidate: &[f64]) -> Result<(f64, f64)> {
    if history.is_empty() {
        return Err(Error::data("similarity needs a non-empty watch history"));
    }
    let sims: Vec<f64> = history.iter().map(|h| dot(h, candidate)).collect();
    let avg = sims.iter().sum::<f64>() / sims.len() as f64;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((avg, max))
}

// ---------------------------------------------------------------------------
// GLMix

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlmixConfig {
    /// L2 prior strength on the per-user effects.
    pub prior: f64,
    pub max_rounds: usize,
    /// Relative change of the penalized loss that ends the fit.
    pub tol: f64,
}

impl Default for GlmixConfig {
    fn default() -> Self {
        Self { prior: 1.0, max_rounds: 50, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub user: String,
    pub features: Vec<f64>,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserEffect {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmixModel {
    pub beta0: f64,
    pub users: BTreeMap<String, UserEffect>,
    pub prior: f64,
    pub dim: usize,
}

impl GlmixModel {
    pub fn zeros(dim: usize, prior: f64) -> Self {
        Self { beta0: 0.0, users: BTreeMap::new(), prior, dim }
    }

    /// Unseen users contribute no effect.
    pub fn logit(&self, user: &str, features: &[f64]) -> f64 {
        match self.users.get(user) {
            Some(u) => self.beta0 + u.intercept + dot(&u.coef, features),
            None => self.beta0,
        }
    }

    pub fn predict(&self, user: &str, features: &[f64]) -> f64 {
        sigmoid(self.logit(user, features))
    }

    pub fn penalty(&self) -> f64 {
        0.5 * self.prior * self.users.values().map(|u| u.intercept * u.intercept + dot(&u.coef, &u.coef)).sum::<f64>()
    }
}

/// `log(1 + e^η) - y η`, stable for large |η|.
fn log_loss(eta: f64, y: bool) -> f64 {
    let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
    softplus - if y { eta } else { 0.0 }
}

/// Negative log-likelihood plus the L2 penalty on user effects.
pub fn penalized_loss(model: &GlmixModel, obs: &[Observation]) -> f64 {
    obs.iter().map(|o| log_loss(model.logit(&o.user, &o.features), o.label)).sum::<f64>() + model.penalty()
}

#[derive(Clone, Debug)]
pub struct GlmixFit {
    pub model: GlmixModel,
    /// Penalized loss at the start and after every round.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

const MAX_HALVINGS: usize = 40;

pub fn glmix_fit(obs: &[Observation], cfg: &GlmixConfig) -> Result<GlmixFit> {
    if obs.is_empty() {
        return Err(Error::data("GLMix needs at least one observation"));
    }
    if !(cfg.prior > 0.0) {
        return Err(Error::config("GLMix prior strength must be positive"));
    }
    let dim = obs[0].features.len();
    if let Some(o) = obs.iter().find(|o| o.features.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: o.features.len() });
    }
    if obs.iter().any(|o| o.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteInput("GLMix features".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in obs {
        by_user.entry(o.user.as_str()).or_default().push(o);
    }
    let mut model = GlmixModel::zeros(dim, cfg.prior);
    for u in by_user.keys() {
        model.users.insert(u.to_string(), UserEffect { intercept: 0.0, coef: vec![0.0; dim] });
    }
    let groups: Vec<(&str, Vec<&Observation>)> = by_user.into_iter().collect();
    let mut history = vec![penalized_loss(&model, obs)];
    let mut converged = false;
    for _ in 0..cfg.max_rounds {
        global_step(&mut model, obs);
        let updated: Vec<UserEffect> =
            groups.par_iter().map(|(u, rows)| user_step(&model, &model.users[*u], rows)).collect();
        for ((u, _), eff) in groups.iter().zip(updated) {
            *model.users.get_mut(*u).expect("user present") = eff;
        }
        center_intercepts(&mut model, obs);
        let loss = penalized_loss(&model, obs);
        let prev = *history.last().expect("non-empty");
        history.push(loss);
        if (prev - loss).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(GlmixFit { model, loss_history: history, converged })
}

/// Newton step on the global intercept, halved until the loss does not increase.
fn global_step(model: &mut GlmixModel, obs: &[Observation]) {
    let (mut g, mut h) = (0.0, 0.0);
    for o in obs {
        let p = model.predict(&o.user, &o.features);
        g += p - f64::from(u8::from(o.label));
        h += p * (1.0 - p);
    }
    if h <= 0.0 || g == 0.0 {
        return;
    }
    let before = penalized_loss(model, obs);
    let start = model.beta0;
    let mut step = g / h;
    for _ in 0..MAX_HALVINGS {
        model.beta0 = start - step;
        if penalized_loss(model, obs) <= before {
            return;
        }
        step *= 0.5;
    }
    model.beta0 = start;
}

/// Moves the mean user intercept into β₀. The data term is unchanged and the penalty
/// cannot grow; at the optimum the user intercepts sum to zero.
fn center_intercepts(model: &mut GlmixModel, obs: &[Observation]) {
    if model.users.is_empty() {
        return;
    }
    let before = penalized_loss(model, obs);
    let saved = model.clone();
    let mean = model.users.values().map(|u| u.intercept).sum::<f64>() / model.users.len() as f64;
    model.beta0 += mean;
    for u in model.users.values_mut() {
        u.intercept -= mean;
    }
    // guard against round-off making things worse
    if penalized_loss(model, obs) > before {
        *model = saved;
    }
}

fn user_loss(model: &GlmixModel, eff: &UserEffect, rows: &[&Observation]) -> f64 {
    let data: f64 =
        rows.iter().map(|o| log_loss(model.beta0 + eff.intercept + dot(&eff.coef, &o.features), o.label)).sum();
    data + 0.5 * model.prior * (eff.intercept * eff.intercept + dot(&eff.coef, &eff.coef))
}

/// Damped Newton step on one user's `(β_{U,0}, β_U)` block.
fn user_step(model: &GlmixModel, eff: &UserEffect, rows: &[&Observation]) -> UserEffect {
    let n = model.dim + 1;
    let theta: Vec<f64> = std::iter::once(eff.intercept).chain(eff.coef.iter().copied()).collect();
    let mut grad: Vec<f64> = theta.iter().map(|t| model.prior * t).collect();
    let mut hess = Matrix::zeros(n, n);
    for i in 0..n {
        hess[(i, i)] = model.prior;
    }
    let mut z = vec![1.0; n];
    for o in rows {
        z[1..].copy_from_slice(&o.features);
        let p = sigmoid(model.beta0 + dot(&theta, &z));
        let r = p - f64::from(u8::from(o.label));
        let w = p * (1.0 - p);
        axpy(r, &z, &mut grad);
        for i in 0..n {
            let wi = w * z[i];
            for j in 0..n {
                hess[(i, j)] += wi * z[j];
            }
        }
    }
    let Ok(step) = spd_solve(&hess, &grad) else {
        return eff.clone();
    };
    let before = user_loss(model, eff, rows);
    let mut scale = 1.0;
    for _ in 0..MAX_HALVINGS {
        let cand = UserEffect {
            intercept: theta[0] - scale * step[0],
            coef: (1..n).map(|i| theta[i] - scale * step[i]).collect(),
        };
        if user_loss(model, &cand, rows) <= before {
            return cand;
        }
        scale *= 0.5;
    }
    eff.clone()
}

// ---------------------------------------------------------------------------
// co-watch evaluation

/// Splits each user's sessions chronologically: the first `train_fraction` of the
/// sessions (rounded down, at least one when the user has two or more) go to training.
pub fn split_sessions(interactions: &[Interaction], train_fraction: f64) -> (Vec<Interaction>, Vec<Interaction>) {
    let mut sessions: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for i in interactions {
        sessions.entry(i.user.as_str()).or_default().insert(i.session);
    }
    let cutoff: BTreeMap<&str, u32> = sessions
        .iter()
        .map(|(u, s)| {
            let ordered: Vec<u32> = s.iter().copied().collect();
            let mut n_train = (ordered.len() as f64 * train_fraction).floor() as usize;
            if ordered.len() >= 2 {
                n_train = n_train.clamp(1, ordered.len() - 1);
            }
            let cut = ordered.get(n_train).copied().unwrap_or(u32::MAX);
            (*u, cut)
        })
        .collect();
    interactions.iter().cloned().partition(|i| i.session < cutoff[i.user.as_str()])
}

/// Watched and skipped videos of one `(user, session)`.
type SessionVideos<'a> = BTreeMap<(&'a str, u32), (Vec<&'a str>, Vec<&'a str>)>;

/// Triplets from co-watched pairs and skipped videos within each session, capped per
/// session by a seeded subsample.
pub fn triplets_from_interactions(interactions: &[Interaction], max_per_session: usize, seed: u64) -> Vec<Triplet> {
    let mut sessions: SessionVideos = BTreeMap::new();
    for i in interactions {
        let e = sessions.entry((i.user.as_str(), i.session)).or_default();
        if i.watched {
            e.0.push(i.video.as_str());
        } else {
            e.1.push(i.video.as_str());
        }
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::new();
    for (watched, skipped) in sessions.values() {
        let mut all = Vec::new();
        for (i, a) in watched.iter().enumerate() {
            for b in &watched[i + 1..] {
                for n in skipped {
                    if a != b && a != n && b != n {
                        all.push(Triplet { anchor: a.to_string(), positive: b.to_string(), negative: n.to_string() });
                        all.push(Triplet { anchor: b.to_string(), positive: a.to_string(), negative: n.to_string() });
                    }
                }
            }
        }
        if all.len() > max_per_session {
            let mut keep = rand::seq::index::sample(&mut rng, all.len(), max_per_session).into_vec();
            keep.sort_unstable();
            all = keep.into_iter().map(|i| all[i].clone()).collect();
        }
        out.extend(all);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoEvalConfig {
    pub train_fraction: f64,
    pub glmix: GlmixConfig,
}

impl Default for RecoEvalConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, glmix: GlmixConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RecoEvalReport {
    pub auc_avg_sim: f64,
    pub auc_max_sim: f64,
    pub auc_glmix: f64,
    /// `None` when the cold-start subset lacks positives or negatives.
    pub auc_glmix_coldstart: Option<f64>,
    /// GLMix with intercepts only, no video features.
    pub auc_glmix_no_video: f64,
    pub n_test: usize,
    pub n_coldstart: usize,
}

/// Scores held-out interactions with similarity aggregation and GLMix.
///
/// Test interactions of users without any training watch are skipped, so every
/// method is scored on the same rows.
pub fn evaluate_cowatch(
    embeddings: &HashMap<String, Vec<f64>>,
    interactions: &[Interaction],
    cfg: &RecoEvalConfig,
) -> Result<RecoEvalReport> {
    let (train, test) = split_sessions(interactions, cfg.train_fraction);
    let embedding = |v: &str| -> Result<&Vec<f64>> {
        embeddings.get(v).ok_or_else(|| Error::data(format!("no embedding for video {v:?}")))
    };
    let mut history: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for i in train.iter().filter(|i| i.watched) {
        history.entry(i.user.as_str()).or_default().push(i.video.as_str());
        seen.insert(i.video.as_str());
    }
    let to_obs = |i: &Interaction, with_video: bool| -> Result<Observation> {
        let features = if with_video { embedding(&i.video)?.clone() } else { Vec::new() };
        Ok(Observation { user: i.user.clone(), features, label: i.watched })
    };
    let train_obs: Vec<Observation> = train.iter().map(|i| to_obs(i, true)).collect::<Result<_>>()?;
    let train_obs_plain: Vec<Observation> = train.iter().map(|i| to_obs(i, false)).collect::<Result<_>>()?;
    if train_obs.is_empty() {
        return Err(Error::data("no training interactions"));
    }
    let glmix = glmix_fit(&train_obs, &cfg.glmix)?.model;
    let plain = glmix_fit(&train_obs_plain, &cfg.glmix)?.model;

    let mut labels = Vec::new();
    let mut avg = Vec::new();
    let mut max = Vec::new();
    let mut glm = Vec::new();
    let mut glm_plain = Vec::new();
    let mut cold_labels = Vec::new();
    let mut cold_scores = Vec::new();
    for i in &test {
        let Some(h) = history.get(i.user.as_str()) else { continue };
        let cand = embedding(&i.video)?;
        let hist: Vec<Vec<f64>> = h.iter().map(|v| embedding(v).cloned()).collect::<Result<_>>()?;
        let (a, m) = sim_scores(&hist, cand)?;
        let p = glmix.predict(&i.user, cand);
        labels.push(i.watched);
        avg.push(a);
        max.push(m);
        glm.push(p);
        glm_plain.push(plain.predict(&i.user, &[]));
        if !seen.contains(i.video.as_str()) {
            cold_labels.push(i.watched);
            cold_scores.push(p);
        }
    }
    let cold = metrics::auc(&cold_scores, &cold_labels).ok();
    Ok(RecoEvalReport {
        auc_avg_sim: metrics::auc(&avg, &labels)?,
        auc_max_sim: metrics::auc(&max, &labels)?,
        auc_glmix: metrics::auc(&glm, &labels)?,
        auc_glmix_coldstart: cold,
        auc_glmix_no_video: metrics::auc(&glm_plain, &labels)?,
        n_test: labels.len(),
        n_coldstart: cold_labels.len(),
    })
}

/// Embeds every video of a dataset.
pub fn embed_all(model: &RecoModel, data: &Dataset) -> Result<HashMap<String, Vec<f64>>> {
    let out: Vec<(String, Vec<f64>)> =
        data.records.par_iter().map(|r| Ok((r.id.clone(), model.embed(&r.frames)?))).collect::<Result<_>>()?;
    Ok(out.into_iter().collect())
}

// ---------------------------------------------------------------------------
// model file

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;

pub fn encode_reco_model(model: &RecoModel) -> Result<Vec<u8>> {
    let mut e = Encoder::new();
    let p = &model.pool;
    e.magic(EMBD_MAGIC)
        .u32(EMBD_VERSION)
        .u8(p.variant().tag())
        .u8(matches!(p.spec.code_kind, CodeKind::Dsgmm) as u8)
        .f64(p.spec.gamma)
        .u8(p.spec.intra_norm as u8)
        .u8(p.spec.final_norm as u8)
        .u8(p.anchors.is_none() as u8)
        .u32(len_u32(p.k(), "K")?)
        .u32(len_u32(p.dim(), "D")?)
        .u32(len_u32(model.net.w1.rows(), "hidden")?)
        .u32(len_u32(model.net.embed_dim(), "embedding")?);
    for (name, values) in model.blocks() {
        e.str32(name)?.f64_slice(values)?;
    }
    Ok(e.into_bytes())
}

pub fn decode_reco_model(bytes: &[u8]) -> Result<RecoModel> {
    let mut d = Decoder::new(bytes);
    d.expect_magic(EMBD_MAGIC)?;
    let version = d.u32("version")?;
    if version != EMBD_VERSION {
        return Err(Error::UnsupportedVersion { format: "EMBD", version });
    }
    let at = d.offset();
    let variant = Variant::from_tag(d.u8("variant")?)
        .ok_or_else(|| Error::Malformed { offset: at, what: "unknown variant".into() })?;
    let code_kind = if d.u8("code kind")? == 1 { CodeKind::Dsgmm } else { CodeKind::Vlad };
    let gamma = d.f64("gamma")?;
    let intra_norm = d.u8("intra_norm")? == 1;
    let final_norm = d.u8("final_norm")? == 1;
    let share_anchors = d.u8("shared anchors")? == 1;
    let k = d.u32("K")? as usize;
    let dim = d.u32("D")? as usize;
    let hidden = d.u32("hidden")? as usize;
    let embed_dim = d.u32("embedding")? as usize;
    let spec = PoolSpec { code_kind, gamma, intra_norm, final_norm, share_anchors };
    let anchors = if share_anchors { None } else { Some(Matrix::zeros(k, dim)) };
    let pool = PoolLayer::new(spec, AssignmentParams::zeros(variant, k, dim), anchors)?;
    let net = EmbedNet::zeros(pool.code_len(), EmbedConfig { embed_dim, hidden });
    let mut model = RecoModel { pool, net };
    for (name, dst) in model.blocks_mut() {
        let at = d.offset();
        let found = d.str32("block name")?;
        let values = d.f64_vec(name)?;
        if found != name || values.len() != dst.len() {
            return Err(Error::Malformed { offset: at, what: format!("bad parameter block {found:?}") });
        }
        dst.copy_from_slice(&values);
    }
    if !d.is_at_end() {
        return Err(Error::Malformed { offset: d.offset(), what: "trailing bytes after model".into() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_arithmetic() {
        assert_eq!(triplet_term(0.01, 0.81, 0.2), 0.0);
        assert!((triplet_term(0.5, 0.4, 0.2) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn embedding_is_unit_norm_and_zero_maps_to_e1() {
        let mut rng = rng::seeded(1);
        let net = EmbedNet::random(5, EmbedConfig { embed_dim: 3, hidden: 4 }, &mut rng).unwrap();
        let (y, _) = net.forward(&rng::normal_vec(&mut rng, 5, 1.0)).unwrap();
        assert!((norm2(&y) - 1.0).abs() < 1e-12);
        let zero = EmbedNet::zeros(5, EmbedConfig { embed_dim: 3, hidden: 4 });
        assert_eq!(zero.forward(&[1.0; 5]).unwrap().0, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn sim_score_cases() {
        let c = vec![1.0, 0.0];
        assert_eq!(sim_scores(std::slice::from_ref(&c), &c).unwrap(), (1.0, 1.0));
        assert_eq!(sim_scores(&[vec![0.0, 1.0], vec![0.0, -1.0]], &c).unwrap(), (0.0, 0.0));
        assert!(sim_scores(&[], &c).is_err());
    }

    #[test]
    fn glmix_prediction_contract() {
        let mut m = GlmixModel::zeros(1, 1.0);
        assert_eq!(m.predict("anyone", &[3.0]), 0.5);
        m.beta0 = 0.3;
        assert_eq!(m.predict("unseen", &[3.0]), sigmoid(0.3));
        m.beta0 = 0.0;
        m.users.insert("u".into(), UserEffect { intercept: 1.0, coef: vec![0.5] });
        assert!((m.predict("u", &[2.0]) - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn glmix_all_positive_labels() {
        let obs: Vec<Observation> = (0..20)
            .map(|i| Observation { user: format!("u{}", i % 2), features: vec![i as f64 * 0.1], label: true })
            .collect();
        let fit = glmix_fit(&obs, &GlmixConfig::default()).unwrap();
        assert!(fit.model.predict("u0", &[0.5]) > 0.9);
        assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn glmix_coefficient_sign_follows_correlation() {
        let obs: Vec<Observation> = (0..40)
            .map(|i| {
                let x = (i as f64 - 20.0) / 10.0;
                Observation { user: "u".into(), features: vec![x], label: (i * 7) % 10 < 3 + (x > 0.0) as usize * 5 }
            })
            .collect();
        let fit = glmix_fit(&obs, &GlmixConfig::default()).unwrap();
        assert!(fit.model.users["u"].coef[0] > 0.0);
        let flipped: Vec<Observation> =
            obs.iter().map(|o| Observation { features: vec![-o.features[0]], ..o.clone() }).collect();
        assert!(glmix_fit(&flipped, &GlmixConfig::default()).unwrap().model.users["u"].coef[0] < 0.0);
    }

    #[test]
    fn session_split_keeps_order() {
        let mk = |s: u32| Interaction { user: "u".into(), video: format!("v{s}"), session: s, watched: true };
        let all: Vec<Interaction> = (0..10).map(mk).collect();
        let (train, test) = split_sessions(&all, 0.8);
        assert_eq!(train.len(), 8);
        assert!(test.iter().all(|i| i.session >= 8));
    }
}
