//! Trainable cluster-and-aggregate pooling.
//!
//! Frames are soft-assigned to K clusters either by an independent softmax
//! (`Decoupled`, the NetVLAD parameterization) or by the posterior of a GMM whose
//! parameters are trained directly (five `Coupled` variants). The assignments are then
//! aggregated into a K×D code, either VLAD residuals or DSGMM smoothed means:
//!
//! ```text
//! VLAD_k  = S_k - n_k c_k
//! DSGMM_k = (S_k + γ a_k) / (n_k + γ)  =  λ_k S_k / n_k + (1 - λ_k) a_k,   λ_k = n_k / (n_k + γ)
//! ```
//!
//! where `n_k = Σ_t r_tk`, `S_k = Σ_t r_tk x_t` and `c_k`/`a_k` are trainable anchors.
//! Coupled mixture weights are `softmax(w̃)` and scales are `exp(σ̃)`, so any real raw
//! parameters describe a valid GMM. [`PoolLayer::backward`] is the exact gradient of
//! the forward pass, including the dependence of λ on the soft counts.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmm::{CovarianceSpec, GmmModel};
use crate::linalg::{dot, norm2, spd_inverse, Matrix};
use crate::params::Params;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Decoupled,
    UniformPriors,
    SharedSpherical,
    Spherical,
    SharedDiagonal,
    Diagonal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Decoupled,
        Variant::UniformPriors,
        Variant::SharedSpherical,
        Variant::Spherical,
        Variant::SharedDiagonal,
        Variant::Diagonal,
    ];

    pub fn is_coupled(self) -> bool {
        self != Variant::Decoupled
    }

    /// Number of log-scale parameters for K clusters in D dimensions.
    pub fn scale_len(self, k: usize, d: usize) -> usize {
        match self {
            Variant::Decoupled => 0,
            Variant::UniformPriors | Variant::SharedSpherical => 1,
            Variant::Spherical => k,
            Variant::SharedDiagonal => d,
            Variant::Diagonal => k * d,
        }
    }

    #[inline]
    fn scale_index(self, k: usize, i: usize, d: usize) -> usize {
        match self {
            Variant::Decoupled | Variant::UniformPriors | Variant::SharedSpherical => 0,
            Variant::Spherical => k,
            Variant::SharedDiagonal => i,
            Variant::Diagonal => k * d + i,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        Variant::ALL.iter().position(|v| *v == self).unwrap() as u8
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Decoupled => "decoupled",
            Variant::UniformPriors => "uniform-priors",
            Variant::SharedSpherical => "shared-spherical",
            Variant::Spherical => "spherical",
            Variant::SharedDiagonal => "shared-diagonal",
            Variant::Diagonal => "diagonal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodeKind {
    Vlad,
    Dsgmm,
}

impl CodeKind {
    pub fn name(self) -> &'static str {
        match self {
            CodeKind::Vlad => "netvlad",
            CodeKind::Dsgmm => "dsgmm",
        }
    }
}

impl FromStr for CodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "netvlad" | "vlad" => Ok(CodeKind::Vlad),
            "dsgmm" => Ok(CodeKind::Dsgmm),
            other => Err(Error::config(format!("unknown code kind {other:?}"))),
        }
    }
}

/// Raw (unconstrained) assignment parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum AssignmentParams {
    Decoupled {
        /// K×D
        u: Matrix,
        b: Vec<f64>,
    },
    Coupled {
        variant: Variant,
        /// Mixture logits w̃; empty for `UniformPriors`.
        logits: Vec<f64>,
        /// K×D
        means: Matrix,
        /// log σ, laid out per [`Variant::scale_len`].
        log_scales: Vec<f64>,
    },
}

impl AssignmentParams {
    pub fn variant(&self) -> Variant {
        match self {
            AssignmentParams::Decoupled { .. } => Variant::Decoupled,
            AssignmentParams::Coupled { variant, .. } => *variant,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            AssignmentParams::Decoupled { u, .. } => u.rows(),
            AssignmentParams::Coupled { means, .. } => means.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AssignmentParams::Decoupled { u, .. } => u.cols(),
            AssignmentParams::Coupled { means, .. } => means.cols(),
        }
    }

    pub fn zeros(variant: Variant, k: usize, d: usize) -> Self {
        match variant {
            Variant::Decoupled => AssignmentParams::Decoupled { u: Matrix::zeros(k, d), b: vec![0.0; k] },
            v => AssignmentParams::Coupled {
                variant: v,
                logits: if v == Variant::UniformPriors { Vec::new() } else { vec![0.0; k] },
                means: Matrix::zeros(k, d),
                log_scales: vec![0.0; v.scale_len(k, d)],
            },
        }
    }

    /// Mixture weights after the softmax transform (uniform for `UniformPriors`).
    pub fn weights(&self) -> Option<Vec<f64>> {
        match self {
            AssignmentParams::Decoupled { .. } => None,
            AssignmentParams::Coupled { logits, means, .. } => {
                if logits.is_empty() {
                    Some(vec![1.0 / means.rows() as f64; means.rows()])
                } else {
                    Some(crate::linalg::softmax(logits))
                }
            }
        }
    }

    /// Standard deviations after the exp transform.
    pub fn scales(&self) -> Option<Vec<f64>> {
        match self {
            AssignmentParams::Decoupled { .. } => None,
            AssignmentParams::Coupled { log_scales, .. } => Some(log_scales.iter().map(|s| s.exp()).collect()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AssignmentParams::Decoupled { u, b } => {
                if b.len() != u.rows() {
                    return Err(Error::DimensionMismatch { expected: u.rows(), got: b.len() });
                }
            }
            AssignmentParams::Coupled { variant, logits, means, log_scales } => {
                let (k, d) = (means.rows(), means.cols());
                let want_logits = if *variant == Variant::UniformPriors { 0 } else { k };
                if logits.len() != want_logits {
                    return Err(Error::DimensionMismatch { expected: want_logits, got: logits.len() });
                }
                if log_scales.len() != variant.scale_len(k, d) {
                    return Err(Error::DimensionMismatch { expected: variant.scale_len(k, d), got: log_scales.len() });
                }
                if *variant == Variant::Decoupled {
                    return Err(Error::config("coupled parameters tagged as decoupled"));
                }
            }
        }
        Ok(())
    }

    /// Unnormalized assignment logits ℓ_tk for one frame.
    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            AssignmentParams::Decoupled { u, b } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = dot(u.row(k), x) + b[k];
                }
            }
            AssignmentParams::Coupled { variant, logits, means, log_scales } => {
                let kk = means.rows();
                let d = means.cols();
                let log_norm = if logits.is_empty() { 0.0 } else { crate::linalg::log_sum_exp(logits) };
                for (k, o) in out.iter_mut().enumerate() {
                    let log_w = if logits.is_empty() { -(kk as f64).ln() } else { logits[k] - log_norm };
                    let mu = means.row(k);
                    let mut acc = 0.0;
                    for i in 0..d {
                        let s = log_scales[variant.scale_index(k, i, d)];
                        let z = (x[i] - mu[i]) * (-s).exp();
                        acc += s + 0.5 * z * z;
                    }
                    *o = log_w - acc;
                }
            }
        }
    }

    /// T×K assignment probabilities, computed in log space.
    pub fn assign(&self, frames: &Matrix) -> Matrix {
        let mut post = Matrix::zeros(frames.rows(), self.k());
        for (t, x) in frames.iter_rows().enumerate() {
            let row = post.row_mut(t);
            self.logits_into(x, row);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        post
    }
}

impl Params for AssignmentParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            AssignmentParams::Decoupled { u, b } => vec![("assign.u", u.as_slice()), ("assign.b", b.as_slice())],
            AssignmentParams::Coupled { logits, means, log_scales, .. } => vec![
                ("assign.logits", logits.as_slice()),
                ("assign.means", means.as_slice()),
                ("assign.log_scales", log_scales.as_slice()),
            ],
        }
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            AssignmentParams::Decoupled { u, b } => {
                vec![("assign.u", u.as_mut_slice()), ("assign.b", b.as_mut_slice())]
            }
            AssignmentParams::Coupled { logits, means, log_scales, .. } => vec![
                ("assign.logits", logits.as_mut_slice()),
                ("assign.means", means.as_mut_slice()),
                ("assign.log_scales", log_scales.as_mut_slice()),
            ],
        }
    }
}

/// Non-trainable configuration of a pooling layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolSpec {
    pub code_kind: CodeKind,
    /// Relevance factor, used by DSGMM codes only.
    pub gamma: f64,
    pub intra_norm: bool,
    pub final_norm: bool,
    /// Coupled variants only: use the assignment means as the aggregation anchors
    /// instead of a separate trainable copy.
    pub share_anchors: bool,
}

impl PoolSpec {
    pub fn new(code_kind: CodeKind) -> Self {
        Self {
            code_kind,
            gamma: crate::stats_pool::DEFAULT_GAMMA,
            intra_norm: true,
            final_norm: false,
            share_anchors: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || self.gamma.is_nan() {
            return Err(Error::config("gamma must be non-negative"));
        }
        Ok(())
    }
}

/// Assignment parameters plus aggregation anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolLayer {
    pub spec: PoolSpec,
    pub assign: AssignmentParams,
    /// K×D anchors (VLAD centroids / DSGMM prior means); `None` when shared with the
    /// coupled assignment means.
    pub anchors: Option<Matrix>,
}

/// Intermediate values of a forward pass, needed by [`PoolLayer::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub posteriors: Matrix,
    pub counts: Vec<f64>,
    pub sums: Matrix,
    /// Code before normalization.
    pub raw: Matrix,
    /// Code after intra-normalization (equal to `raw` when disabled).
    pub intra: Matrix,
    pub row_norms: Vec<f64>,
    pub final_scale: f64,
}

/// Gradients of a scalar loss w.r.t. every trainable field and the input frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub params: PoolLayer,
    pub frames: Matrix,
}

impl PoolLayer {
    pub fn new(spec: PoolSpec, assign: AssignmentParams, anchors: Option<Matrix>) -> Result<Self> {
        spec.validate()?;
        assign.validate()?;
        match (&assign, &anchors) {
            (AssignmentParams::Decoupled { .. }, None) => {
                return Err(Error::config("decoupled assignment needs separate anchors"))
            }
            (_, Some(a)) if a.rows() != assign.k() || a.cols() != assign.dim() => {
                return Err(Error::DimensionMismatch { expected: assign.k() * assign.dim(), got: a.rows() * a.cols() })
            }
            _ => {}
        }
        let mut spec = spec;
        spec.share_anchors = anchors.is_none();
        Ok(Self { spec, assign, anchors })
    }

    /// Random layer for tests and gradient checks.
    pub fn random(spec: PoolSpec, variant: Variant, k: usize, d: usize, rng: &mut Rng) -> Self {
        let assign = match variant {
            Variant::Decoupled => AssignmentParams::Decoupled {
                u: Matrix::from_vec(k, d, rng::normal_vec(rng, k * d, 0.5)).unwrap(),
                b: rng::normal_vec(rng, k, 0.5),
            },
            v => AssignmentParams::Coupled {
                variant: v,
                logits: if v == Variant::UniformPriors { Vec::new() } else { rng::normal_vec(rng, k, 0.5) },
                means: Matrix::from_vec(k, d, rng::normal_vec(rng, k * d, 1.0)).unwrap(),
                log_scales: rng::uniform_vec(rng, v.scale_len(k, d), -0.2, 0.4),
            },
        };
        let anchors = if variant == Variant::Decoupled || !spec.share_anchors {
            Some(Matrix::from_vec(k, d, rng::normal_vec(rng, k * d, 1.0)).unwrap())
        } else {
            None
        };
        Self::new(spec, assign, anchors).expect("consistent random layer")
    }

    pub fn k(&self) -> usize {
        self.assign.k()
    }

    pub fn dim(&self) -> usize {
        self.assign.dim()
    }

    pub fn code_len(&self) -> usize {
        self.k() * self.dim()
    }

    pub fn variant(&self) -> Variant {
        self.assign.variant()
    }

    pub fn anchor_means(&self) -> &Matrix {
        match (&self.anchors, &self.assign) {
            (Some(a), _) => a,
            (None, AssignmentParams::Coupled { means, .. }) => means,
            (None, AssignmentParams::Decoupled { .. }) => unreachable!("checked in constructor"),
        }
    }

    /// Same layout, all parameters zero.
    pub fn zeros_like(&self) -> PoolLayer {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn assign(&self, frames: &Matrix) -> Matrix {
        self.assign.assign(frames)
    }

    pub fn forward(&self, frames: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if frames.cols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: frames.cols() });
        }
        let k = self.k();
        let d = self.dim();
        let posteriors = self.assign.assign(frames);
        let mut counts = vec![0.0; k];
        let mut sums = Matrix::zeros(k, d);
        for (t, x) in frames.iter_rows().enumerate() {
            for j in 0..k {
                let r = posteriors[(t, j)];
                counts[j] += r;
                crate::linalg::axpy(r, x, sums.row_mut(j));
            }
        }
        let anchors = self.anchor_means();
        let gamma = self.spec.gamma;
        let mut raw = Matrix::zeros(k, d);
        for j in 0..k {
            let a = anchors.row(j);
            let s = sums.row(j);
            let n = counts[j];
            let out = raw.row_mut(j);
            match self.spec.code_kind {
                CodeKind::Vlad => {
                    for i in 0..d {
                        out[i] = s[i] - n * a[i];
                    }
                }
                CodeKind::Dsgmm => {
                    let denom = n + gamma;
                    if denom > 0.0 {
                        for i in 0..d {
                            out[i] = (s[i] + gamma * a[i]) / denom;
                        }
                    } else {
                        out.copy_from_slice(a);
                    }
                }
            }
        }
        let mut intra = raw.clone();
        let mut row_norms = vec![0.0; k];
        if self.spec.intra_norm {
            for j in 0..k {
                let row = intra.row_mut(j);
                let n = norm2(row);
                row_norms[j] = n;
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        let mut out = intra.clone();
        let mut final_scale = 0.0;
        if self.spec.final_norm {
            final_scale = norm2(out.as_slice());
            if final_scale > 0.0 {
                out.as_mut_slice().iter_mut().for_each(|v| *v /= final_scale);
            }
        }
        Ok((out, ForwardCache { posteriors, counts, sums, raw, intra, row_norms, final_scale }))
    }

    pub fn backward(&self, frames: &Matrix, cache: Option<&ForwardCache>, upstream: &Matrix) -> Result<LayerGradients> {
        let cache = cache.ok_or(Error::MissingCache)?;
        let k = self.k();
        let d = self.dim();
        if upstream.rows() != k || upstream.cols() != d {
            return Err(Error::DimensionMismatch { expected: k * d, got: upstream.rows() * upstream.cols() });
        }
        if frames.rows() != cache.posteriors.rows() || frames.cols() != d {
            return Err(Error::DimensionMismatch { expected: cache.posteriors.rows(), got: frames.rows() });
        }

        // through final normalization: y = z / |z|
        let mut g = upstream.clone();
        if self.spec.final_norm && cache.final_scale > 0.0 {
            let y_dot_g: f64 =
                cache.intra.as_slice().iter().zip(g.as_slice()).map(|(z, g)| z * g).sum::<f64>() / cache.final_scale;
            let inv = 1.0 / cache.final_scale;
            for (gv, zv) in g.as_mut_slice().iter_mut().zip(cache.intra.as_slice()) {
                *gv = (*gv - zv * inv * y_dot_g) * inv;
            }
        } else if self.spec.final_norm {
            g.fill_zero_matrix();
        }
        // through intra normalization, row by row; zero rows get zero gradient
        if self.spec.intra_norm {
            for j in 0..k {
                let n = cache.row_norms[j];
                let row = g.row_mut(j);
                if n > 0.0 {
                    let y = cache.intra.row(j);
                    let yg = dot(y, row);
                    for i in 0..d {
                        row[i] = (row[i] - y[i] * yg) / n;
                    }
                } else {
                    row.fill(0.0);
                }
            }
        }

        // through aggregation: dS, dn, d(anchor)
        let anchors = self.anchor_means();
        let gamma = self.spec.gamma;
        let mut d_sums = Matrix::zeros(k, d);
        let mut d_counts = vec![0.0; k];
        let mut d_anchor = Matrix::zeros(k, d);
        for j in 0..k {
            let gv = g.row(j);
            match self.spec.code_kind {
                CodeKind::Vlad => {
                    d_sums.row_mut(j).copy_from_slice(gv);
                    d_counts[j] = -dot(gv, anchors.row(j));
                    let n = cache.counts[j];
                    for (da, gi) in d_anchor.row_mut(j).iter_mut().zip(gv) {
                        *da = -n * gi;
                    }
                }
                CodeKind::Dsgmm => {
                    let denom = cache.counts[j] + gamma;
                    if denom > 0.0 {
                        let inv = 1.0 / denom;
                        for (ds, gi) in d_sums.row_mut(j).iter_mut().zip(gv) {
                            *ds = gi * inv;
                        }
                        d_counts[j] = -dot(gv, cache.raw.row(j)) * inv;
                        for (da, gi) in d_anchor.row_mut(j).iter_mut().zip(gv) {
                            *da = gamma * gi * inv;
                        }
                    } else {
                        d_anchor.row_mut(j).copy_from_slice(gv);
                    }
                }
            }
        }

        // through soft counts and sums into posteriors, then through the softmax
        let t_len = frames.rows();
        let mut d_frames = Matrix::zeros(t_len, d);
        let mut d_logits = Matrix::zeros(t_len, k);
        for (t, x) in frames.iter_rows().enumerate() {
            let r = cache.posteriors.row(t);
            let mut dr = vec![0.0; k];
            for j in 0..k {
                dr[j] = d_counts[j] + dot(d_sums.row(j), x);
            }
            let mean_dr: f64 = r.iter().zip(&dr).map(|(a, b)| a * b).sum();
            let dl = d_logits.row_mut(t);
            for j in 0..k {
                dl[j] = r[j] * (dr[j] - mean_dr);
            }
            let dx = d_frames.row_mut(t);
            for j in 0..k {
                crate::linalg::axpy(r[j], d_sums.row(j), dx);
            }
        }

        let mut grads = self.zeros_like();
        match (&self.assign, &mut grads.assign) {
            (AssignmentParams::Decoupled { u, .. }, AssignmentParams::Decoupled { u: gu, b: gb }) => {
                for (t, x) in frames.iter_rows().enumerate() {
                    let dl = d_logits.row(t);
                    let dx = d_frames.row_mut(t);
                    for j in 0..k {
                        let a = dl[j];
                        if a == 0.0 {
                            continue;
                        }
                        crate::linalg::axpy(a, x, gu.row_mut(j));
                        gb[j] += a;
                        crate::linalg::axpy(a, u.row(j), dx);
                    }
                }
            }
            (
                AssignmentParams::Coupled { variant, logits, means, log_scales },
                AssignmentParams::Coupled { logits: g_logits, means: g_means, log_scales: g_scales, .. },
            ) => {
                let variant = *variant;
                let mut d_logw = vec![0.0; k];
                for (t, x) in frames.iter_rows().enumerate() {
                    let dl = d_logits.row(t);
                    for j in 0..k {
                        let a = dl[j];
                        d_logw[j] += a;
                        let mu = means.row(j);
                        for i in 0..d {
                            let si = variant.scale_index(j, i, d);
                            let inv_var = (-2.0 * log_scales[si]).exp();
                            let diff = x[i] - mu[i];
                            // ℓ = log w - Σ_i [s + ½ (x-μ)² e^{-2s}]
                            let dmu = a * diff * inv_var;
                            g_means[(j, i)] += dmu;
                            d_frames[(t, i)] -= dmu;
                            g_scales[si] += a * (diff * diff * inv_var - 1.0);
                        }
                    }
                }
                if !logits.is_empty() {
                    // log w_j = w̃_j - lse(w̃)  =>  ∂/∂w̃_m = g_m - w_m Σ_j g_j
                    let w = crate::linalg::softmax(logits);
                    let total: f64 = d_logw.iter().sum();
                    for m in 0..k {
                        g_logits[m] = d_logw[m] - w[m] * total;
                    }
                }
            }
            _ => unreachable!("gradient layout mirrors parameters"),
        }
        match &mut grads.anchors {
            Some(a) => *a = d_anchor,
            None => {
                if let AssignmentParams::Coupled { means, .. } = &mut grads.assign {
                    for (m, da) in means.as_mut_slice().iter_mut().zip(d_anchor.as_slice()) {
                        *m += da;
                    }
                }
            }
        }
        Ok(LayerGradients { params: grads, frames: d_frames })
    }
}

impl Params for PoolLayer {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut b = self.assign.blocks();
        if let Some(a) = &self.anchors {
            b.push(("anchors", a.as_slice()));
        }
        b
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut b = self.assign.blocks_mut();
        if let Some(a) = &mut self.anchors {
            b.push(("anchors", a.as_mut_slice()));
        }
        b
    }
}

trait FillZero {
    fn fill_zero_matrix(&mut self);
}

impl FillZero for Matrix {
    fn fill_zero_matrix(&mut self) {
        self.as_mut_slice().fill(0.0);
    }
}

/// Builds a layer whose assignments reproduce the posteriors of a trained GMM.
///
/// `Decoupled` accepts any shared covariance and uses `u_k = Σ⁻¹μ_k`,
/// `b_k = ln w_k - ½ μ_kᵀΣ⁻¹μ_k`; the dropped `xᵀΣ⁻¹x` term is the same for every
/// cluster and cancels in the softmax. Coupled variants need the matching covariance
/// kind (`UniformPriors` reads a shared spherical model and ignores its weights).
/// Anchors start at the GMM means.
pub fn init_from_ubm(ubm: &GmmModel, variant: Variant, spec: PoolSpec) -> Result<PoolLayer> {
    let k = ubm.k();
    let d = ubm.dim();
    let means = ubm.means().clone();
    let incompatible = || {
        Error::IncompatibleCovariance(format!("{:?} covariance cannot initialize the {variant} variant", ubm.kind()))
    };
    let assign = match variant {
        Variant::Decoupled => {
            if !ubm.kind().is_shared() {
                return Err(incompatible());
            }
            let precision = spd_inverse(&ubm.covariance_matrix(0))?;
            let mut u = Matrix::zeros(k, d);
            let mut b = vec![0.0; k];
            for j in 0..k {
                let mu = means.row(j);
                let pm = precision.mul_vec(mu);
                b[j] = ubm.weights()[j].ln() - 0.5 * dot(mu, &pm);
                u.row_mut(j).copy_from_slice(&pm);
            }
            AssignmentParams::Decoupled { u, b }
        }
        v => {
            let log_scales = match (v, ubm.covariance()) {
                (Variant::UniformPriors | Variant::SharedSpherical, CovarianceSpec::SharedSpherical(s)) => vec![s.ln()],
                (Variant::Spherical, CovarianceSpec::Spherical(s)) => s.iter().map(|v| v.ln()).collect(),
                (Variant::SharedDiagonal, CovarianceSpec::SharedDiagonal(s)) => s.iter().map(|v| v.ln()).collect(),
                (Variant::Diagonal, CovarianceSpec::Diagonal(s)) => s.as_slice().iter().map(|v| v.ln()).collect(),
                _ => return Err(incompatible()),
            };
            let logits =
                if v == Variant::UniformPriors { Vec::new() } else { ubm.weights().iter().map(|w| w.ln()).collect() };
            AssignmentParams::Coupled { variant: v, logits, means: means.clone(), log_scales }
        }
    };
    let anchors = if variant == Variant::Decoupled || !spec.share_anchors { Some(means) } else { None };
    PoolLayer::new(spec, assign, anchors)
}
