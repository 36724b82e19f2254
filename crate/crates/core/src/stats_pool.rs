//! Unsupervised cluster-and-aggregate pooling over a trained background model.
//!
//! One call to [`accumulate`] produces the per-cluster soft counts, first moments and
//! (optionally) second moments of a video. Every code in this module is a function of
//! those statistics: the smoothed video-GMM means (SGMM), VLAD residuals and BoW
//! histograms. Average pooling is the one code computed from frames directly.

use std::path::Path;

use crate::binio::{len_u32, Decoder, Encoder};
use crate::data::VideoRecord;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::linalg::{axpy, norm2, Matrix};

/// Default relevance factor.
pub const DEFAULT_GAMMA: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecondOrderKind {
    None,
    Diagonal,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SecondOrder {
    None,
    /// K×D, `Σ_t P(k|x_t) x_t²` per coordinate.
    Diagonal(Matrix),
    /// K matrices of D×D, `Σ_t P(k|x_t) x_t x_tᵀ`.
    Full(Vec<Matrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    /// Soft counts n(k).
    pub counts: Vec<f64>,
    /// K×D first moments S_x(k).
    pub first: Matrix,
    pub second: SecondOrder,
    pub num_frames: usize,
}

impl SufficientStats {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.first.cols()
    }

    pub fn total_count(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Statistics with diagonal second moments.
pub fn accumulate(ubm: &GmmModel, video: &VideoRecord) -> Result<SufficientStats> {
    accumulate_frames(ubm, &video.frames, SecondOrderKind::Diagonal)
}

pub fn accumulate_frames(ubm: &GmmModel, frames: &Matrix, second: SecondOrderKind) -> Result<SufficientStats> {
    let post = ubm.posteriors(frames)?;
    Ok(stats_from_posteriors(&post, frames, second))
}

/// Statistics for arbitrary T×K assignment probabilities.
pub fn stats_from_posteriors(post: &Matrix, frames: &Matrix, second: SecondOrderKind) -> SufficientStats {
    let k = post.cols();
    let d = frames.cols();
    let mut counts = vec![0.0; k];
    let mut first = Matrix::zeros(k, d);
    let mut sec = match second {
        SecondOrderKind::None => SecondOrder::None,
        SecondOrderKind::Diagonal => SecondOrder::Diagonal(Matrix::zeros(k, d)),
        SecondOrderKind::Full => SecondOrder::Full(vec![Matrix::zeros(d, d); k]),
    };
    for (t, x) in frames.iter_rows().enumerate() {
        let p = post.row(t);
        for j in 0..k {
            let r = p[j];
            counts[j] += r;
            axpy(r, x, first.row_mut(j));
            match &mut sec {
                SecondOrder::None => {}
                SecondOrder::Diagonal(m) => {
                    for (dst, xi) in m.row_mut(j).iter_mut().zip(x) {
                        *dst += r * xi * xi;
                    }
                }
                SecondOrder::Full(ms) => {
                    let m = &mut ms[j];
                    for a in 0..d {
                        let ra = r * x[a];
                        for b in 0..d {
                            m[(a, b)] += ra * x[b];
                        }
                    }
                }
            }
        }
    }
    SufficientStats { counts, first, second: sec, num_frames: frames.rows() }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariances {
    /// K×D variances.
    Diagonal(Matrix),
    /// K full D×D covariances.
    Full(Vec<Matrix>),
}

/// Video-level GMM parameter estimates. Each field is present when it was requested
/// and the statistics carry enough information to compute it.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub weights: Option<Vec<f64>>,
    pub means: Option<Matrix>,
    pub covariances: Option<Covariances>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub gamma: f64,
    pub weights: bool,
    pub means: bool,
    pub covariances: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, weights: true, means: true, covariances: true }
    }
}

impl SmoothingConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self { gamma, ..Self::default() }
    }
}

/// Interpolation weight `n / (n + γ)`; zero whenever the count is zero.
#[inline]
pub fn relevance_weight(count: f64, gamma: f64) -> f64 {
    if count <= 0.0 {
        0.0
    } else {
        count / (count + gamma)
    }
}

fn check_stats(stats: &SufficientStats, ubm: &GmmModel) -> Result<()> {
    if stats.k() != ubm.k() {
        return Err(Error::DimensionMismatch { expected: ubm.k(), got: stats.k() });
    }
    if stats.dim() != ubm.dim() {
        return Err(Error::DimensionMismatch { expected: ubm.dim(), got: stats.dim() });
    }
    Ok(())
}

/// Maximum-likelihood video GMM. Clusters with n(k) = 0 have no ML estimate; their
/// mean and covariance are taken from the background model.
pub fn ml_estimates(stats: &SufficientStats, ubm: &GmmModel) -> Result<Estimates> {
    check_stats(stats, ubm)?;
    let total = stats.total_count();
    if !(total > 0.0) {
        return Err(Error::data("sufficient statistics are all zero"));
    }
    let k = stats.k();
    let weights = stats.counts.iter().map(|n| n / total).collect();
    let mut means = Matrix::zeros(k, stats.dim());
    for j in 0..k {
        let n = stats.counts[j];
        if n > 0.0 {
            for (m, s) in means.row_mut(j).iter_mut().zip(stats.first.row(j)) {
                *m = s / n;
            }
        } else {
            means.row_mut(j).copy_from_slice(ubm.means().row(j));
        }
    }
    let covariances = covariance_estimates(stats, ubm, &means, |n| if n > 0.0 { 1.0 } else { 0.0 });
    Ok(Estimates { weights: Some(weights), means: Some(means), covariances })
}

/// Relevance-factor smoothing of the video GMM towards the background model.
pub fn smoothed_estimates(stats: &SufficientStats, ubm: &GmmModel, cfg: &SmoothingConfig) -> Result<Estimates> {
    check_stats(stats, ubm)?;
    if !(cfg.gamma >= 0.0) {
        return Err(Error::config("gamma must be non-negative"));
    }
    let k = stats.k();
    let gamma = cfg.gamma;
    let means = smoothed_means(stats, ubm, gamma);

    let weights = cfg.weights.then(|| {
        let total = stats.total_count();
        let mut w: Vec<f64> = (0..k)
            .map(|j| {
                let n = stats.counts[j];
                if n <= 0.0 || total <= 0.0 {
                    ubm.weights()[j]
                } else {
                    let lam = relevance_weight(n, gamma);
                    lam * n / total + (1.0 - lam) * ubm.weights()[j]
                }
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    });
    let covariances =
        if cfg.covariances { covariance_estimates(stats, ubm, &means, |n| relevance_weight(n, gamma)) } else { None };
    Ok(Estimates { weights, means: cfg.means.then_some(means), covariances })
}

fn smoothed_means(stats: &SufficientStats, ubm: &GmmModel, gamma: f64) -> Matrix {
    let mut means = Matrix::zeros(stats.k(), stats.dim());
    for j in 0..stats.k() {
        let n = stats.counts[j];
        let ubm_mu = ubm.means().row(j);
        if n <= 0.0 {
            means.row_mut(j).copy_from_slice(ubm_mu);
            continue;
        }
        let lam = relevance_weight(n, gamma);
        for ((m, s), mu) in means.row_mut(j).iter_mut().zip(stats.first.row(j)).zip(ubm_mu) {
            *m = lam * (s / n) + (1.0 - lam) * mu;
        }
    }
    means
}

/// `λ S_x²/n + (1-λ)(μμᵀ + Σ) - μ^v μ^vᵀ`, with zero-count clusters copied from the UBM.
fn covariance_estimates(
    stats: &SufficientStats,
    ubm: &GmmModel,
    video_means: &Matrix,
    lambda: impl Fn(f64) -> f64,
) -> Option<Covariances> {
    let k = stats.k();
    let d = stats.dim();
    match &stats.second {
        SecondOrder::None => None,
        SecondOrder::Diagonal(sx2) => {
            let mut out = Matrix::zeros(k, d);
            for j in 0..k {
                let n = stats.counts[j];
                let var = ubm.variances(j);
                if n <= 0.0 {
                    out.row_mut(j).copy_from_slice(&var);
                    continue;
                }
                let lam = lambda(n);
                let mu = ubm.means().row(j);
                for i in 0..d {
                    let mv = video_means[(j, i)];
                    out[(j, i)] = lam * sx2[(j, i)] / n + (1.0 - lam) * (mu[i] * mu[i] + var[i]) - mv * mv;
                }
            }
            Some(Covariances::Diagonal(out))
        }
        SecondOrder::Full(sx2) => {
            let mut out = Vec::with_capacity(k);
            for j in 0..k {
                let n = stats.counts[j];
                let sigma = ubm.covariance_matrix(j);
                if n <= 0.0 {
                    out.push(sigma);
                    continue;
                }
                let lam = lambda(n);
                let mu = ubm.means().row(j);
                let mv = video_means.row(j);
                let mut c = Matrix::zeros(d, d);
                for a in 0..d {
                    for b in 0..d {
                        c[(a, b)] =
                            lam * sx2[j][(a, b)] / n + (1.0 - lam) * (mu[a] * mu[b] + sigma[(a, b)]) - mv[a] * mv[b];
                    }
                }
                out.push(c);
            }
            Some(Covariances::Full(out))
        }
    }
}

/// A pooled video representation.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCode {
    pub values: Matrix,
    pub intra_norm: bool,
    pub final_norm: bool,
}

impl VideoCode {
    pub fn new(values: Matrix) -> Self {
        Self { values, intra_norm: false, final_norm: false }
    }

    pub fn flat(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// SGMM code: the K×D matrix of smoothed video means.
pub fn sgmm_code(stats: &SufficientStats, ubm: &GmmModel, gamma: f64) -> Result<VideoCode> {
    check_stats(stats, ubm)?;
    if !(gamma >= 0.0) {
        return Err(Error::config("gamma must be non-negative"));
    }
    Ok(VideoCode::new(smoothed_means(stats, ubm, gamma)))
}

/// VLAD code: `S_x(k) - n(k) μ_k` per cluster.
pub fn vlad_code(stats: &SufficientStats, ubm: &GmmModel) -> Result<VideoCode> {
    check_stats(stats, ubm)?;
    let mut v = stats.first.clone();
    for j in 0..stats.k() {
        axpy(-stats.counts[j], ubm.means().row(j), v.row_mut(j));
    }
    Ok(VideoCode::new(v))
}

/// Bag-of-words code: the soft cluster histogram `n(k) / T`, as a 1×K matrix.
pub fn bow_code(stats: &SufficientStats) -> VideoCode {
    let t = stats.num_frames.max(1) as f64;
    let hist = stats.counts.iter().map(|n| n / t).collect();
    VideoCode::new(Matrix::from_vec(1, stats.k(), hist).expect("1×K"))
}

/// Mean of the frames, as a 1×D matrix.
pub fn avg_pool(video: &VideoRecord) -> VideoCode {
    VideoCode::new(avg_pool_frames(&video.frames))
}

pub fn avg_pool_frames(frames: &Matrix) -> Matrix {
    let mut mean = vec![0.0; frames.cols()];
    for x in frames.iter_rows() {
        axpy(1.0, x, &mut mean);
    }
    let t = frames.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= t);
    Matrix::from_vec(1, frames.cols(), mean).expect("1×D")
}

/// Intra-normalization (each row to unit L2, zero rows untouched) followed by
/// final normalization of the flattened code.
pub fn normalize(code: &VideoCode, intra: bool, final_norm: bool) -> VideoCode {
    let mut values = code.values.clone();
    if intra {
        for j in 0..values.rows() {
            let row = values.row_mut(j);
            let n = norm2(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    if final_norm {
        let n = norm2(values.as_slice());
        if n > 0.0 {
            values.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        }
    }
    VideoCode { values, intra_norm: code.intra_norm || intra, final_norm: code.final_norm || final_norm }
}

// ---------------------------------------------------------------------------
// VCOD container

pub const VCOD_MAGIC: &[u8; 4] = b"VCOD";

/// Appends one `"VCOD" | u32 rows | u32 cols | f32 payload` block.
pub fn encode_vcod_block(code: &Matrix, e: &mut Encoder) -> Result<()> {
    e.magic(VCOD_MAGIC).u32(len_u32(code.rows(), "code rows")?).u32(len_u32(code.cols(), "code cols")?);
    for &v in code.as_slice() {
        e.f32(v as f32);
    }
    Ok(())
}

/// Writes codes as consecutive VCOD blocks plus a `id<TAB>offset` manifest.
pub fn write_vcod(codes: &[(String, Matrix)], path: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
    let mut e = Encoder::new();
    let mut lines = String::new();
    for (id, code) in codes {
        if id.contains(['\t', '\n']) {
            return Err(Error::data(format!("video id {id:?} cannot appear in a manifest")));
        }
        lines.push_str(&format!("{id}\t{}\n", e.len()));
        encode_vcod_block(code, &mut e)?;
    }
    std::fs::write(path, e.into_bytes())?;
    std::fs::write(manifest, lines)?;
    Ok(())
}

pub fn decode_vcod(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut d = Decoder::new(bytes);
    let mut out = Vec::new();
    while !d.is_at_end() {
        d.expect_magic(VCOD_MAGIC)?;
        let rows = d.u32("code rows")? as usize;
        let cols = d.u32("code cols")? as usize;
        let n = rows.saturating_mul(cols);
        if d.remaining() < n.saturating_mul(4) {
            return Err(Error::Truncated { offset: d.offset(), what: format!("{rows}×{cols} code payload") });
        }
        let data = (0..n).map(|_| d.finite_f32("code value").map(f64::from)).collect::<Result<Vec<_>>>()?;
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

pub fn read_vcod(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    decode_vcod(&std::fs::read(path)?)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, u64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (id, off) =
                line.split_once('\t').ok_or_else(|| Error::data(format!("manifest line {} has no tab", i + 1)))?;
            let off = off.parse().map_err(|_| Error::data(format!("manifest line {} bad offset", i + 1)))?;
            Ok((id.to_string(), off))
        })
        .collect()
}
