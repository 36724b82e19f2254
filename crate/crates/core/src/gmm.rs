//! Gaussian mixture models: densities, posteriors, EM training and serialization.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{len_u32, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, clamp_eigenvalues, forward_substitute, log_sum_exp, Matrix};
use crate::rng;

pub const GMM_MAGIC: &[u8; 4] = b"GMM1";
pub const GMM_VERSION: u32 = 1;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovarianceKind {
    SharedFull,
    SharedSpherical,
    Spherical,
    SharedDiagonal,
    Diagonal,
}

impl CovarianceKind {
    pub const ALL: [CovarianceKind; 5] = [
        CovarianceKind::SharedFull,
        CovarianceKind::SharedSpherical,
        CovarianceKind::Spherical,
        CovarianceKind::SharedDiagonal,
        CovarianceKind::Diagonal,
    ];

    fn tag(self) -> u32 {
        match self {
            CovarianceKind::SharedFull => 0,
            CovarianceKind::SharedSpherical => 1,
            CovarianceKind::Spherical => 2,
            CovarianceKind::SharedDiagonal => 3,
            CovarianceKind::Diagonal => 4,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn is_shared(self) -> bool {
        matches!(self, CovarianceKind::SharedFull | CovarianceKind::SharedSpherical | CovarianceKind::SharedDiagonal)
    }
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-full" => Ok(CovarianceKind::SharedFull),
            "shared-spherical" => Ok(CovarianceKind::SharedSpherical),
            "spherical" => Ok(CovarianceKind::Spherical),
            "shared-diagonal" => Ok(CovarianceKind::SharedDiagonal),
            "diagonal" => Ok(CovarianceKind::Diagonal),
            other => Err(Error::config(format!("unknown covariance kind {other:?}"))),
        }
    }
}

/// Covariance parameterization. Spherical and diagonal kinds store standard
/// deviations; the shared full kind stores the covariance and its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceSpec {
    SharedFull { cov: Matrix, chol: Matrix },
    SharedSpherical(f64),
    Spherical(Vec<f64>),
    SharedDiagonal(Vec<f64>),
    Diagonal(Matrix),
}

impl CovarianceSpec {
    pub fn shared_full(cov: Matrix) -> Result<Self> {
        if cov.rows() != cov.cols() {
            return Err(Error::DimensionMismatch { expected: cov.rows(), got: cov.cols() });
        }
        for i in 0..cov.rows() {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * (1.0 + cov[(i, j)].abs()) {
                    return Err(Error::data("shared full covariance is not symmetric"));
                }
            }
        }
        let chol = cholesky(&cov)?;
        Ok(CovarianceSpec::SharedFull { cov, chol })
    }

    pub fn kind(&self) -> CovarianceKind {
        match self {
            CovarianceSpec::SharedFull { .. } => CovarianceKind::SharedFull,
            CovarianceSpec::SharedSpherical(_) => CovarianceKind::SharedSpherical,
            CovarianceSpec::Spherical(_) => CovarianceKind::Spherical,
            CovarianceSpec::SharedDiagonal(_) => CovarianceKind::SharedDiagonal,
            CovarianceSpec::Diagonal(_) => CovarianceKind::Diagonal,
        }
    }

    fn std_values(&self) -> &[f64] {
        match self {
            CovarianceSpec::SharedFull { .. } => &[],
            CovarianceSpec::SharedSpherical(s) => std::slice::from_ref(s),
            CovarianceSpec::Spherical(v) | CovarianceSpec::SharedDiagonal(v) => v,
            CovarianceSpec::Diagonal(m) => m.as_slice(),
        }
    }

    /// Standard deviation of component `k` along coordinate `i` (diagonal-type kinds).
    #[inline]
    fn std_at(&self, k: usize, i: usize) -> f64 {
        match self {
            CovarianceSpec::SharedFull { cov, .. } => cov[(i, i)].sqrt(),
            CovarianceSpec::SharedSpherical(s) => *s,
            CovarianceSpec::Spherical(v) => v[k],
            CovarianceSpec::SharedDiagonal(v) => v[i],
            CovarianceSpec::Diagonal(m) => m[(k, i)],
        }
    }
}

/// A K-component Gaussian mixture over D-dimensional vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Matrix,
    cov: CovarianceSpec,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, cov: CovarianceSpec) -> Result<Self> {
        let k = weights.len();
        let d = means.cols();
        if k == 0 || d == 0 {
            return Err(Error::config("GMM needs K >= 1 and D >= 1"));
        }
        if means.rows() != k {
            return Err(Error::DimensionMismatch { expected: k, got: means.rows() });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::data("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::data(format!("mixture weights sum to {total}, not 1")));
        }
        if !means.is_finite() {
            return Err(Error::data("non-finite means"));
        }
        let expected_len = match &cov {
            CovarianceSpec::SharedFull { cov, .. } => {
                if cov.rows() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: cov.rows() });
                }
                0
            }
            CovarianceSpec::SharedSpherical(_) => 1,
            CovarianceSpec::Spherical(_) => k,
            CovarianceSpec::SharedDiagonal(_) => d,
            CovarianceSpec::Diagonal(m) => {
                if m.rows() != k || m.cols() != d {
                    return Err(Error::DimensionMismatch { expected: k * d, got: m.rows() * m.cols() });
                }
                k * d
            }
        };
        let stds = cov.std_values();
        if stds.len() != expected_len {
            return Err(Error::DimensionMismatch { expected: expected_len, got: stds.len() });
        }
        if stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::data("standard deviations must be positive"));
        }
        Ok(Self { weights, means, cov })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn covariance(&self) -> &CovarianceSpec {
        &self.cov
    }

    pub fn kind(&self) -> CovarianceKind {
        self.cov.kind()
    }

    /// Diagonal of Σ_k.
    pub fn variances(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov.std_at(k, i).powi(2)).collect()
    }

    /// Full D×D covariance Σ_k.
    pub fn covariance_matrix(&self, k: usize) -> Matrix {
        match &self.cov {
            CovarianceSpec::SharedFull { cov, .. } => cov.clone(),
            _ => {
                let d = self.dim();
                let mut m = Matrix::zeros(d, d);
                for i in 0..d {
                    m[(i, i)] = self.cov.std_at(k, i).powi(2);
                }
                m
            }
        }
    }

    /// `log w_k + log N(x; μ_k, Σ_k)` for every component.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.log_joint_into(x, &mut out, &mut vec![0.0; self.dim()]);
        out
    }

    fn log_joint_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim();
        let half_d_log_2pi = 0.5 * d as f64 * LOG_2PI;
        match &self.cov {
            CovarianceSpec::SharedFull { chol, .. } => {
                let log_det_half: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
                let mut diff = vec![0.0; d];
                for (k, o) in out.iter_mut().enumerate() {
                    for (j, dj) in diff.iter_mut().enumerate() {
                        *dj = x[j] - self.means[(k, j)];
                    }
                    forward_substitute(chol, &diff, scratch);
                    let maha = linalg::dot(scratch, scratch);
                    *o = self.weights[k].ln() - half_d_log_2pi - log_det_half - 0.5 * maha;
                }
            }
            cov => {
                for (k, o) in out.iter_mut().enumerate() {
                    let mu = self.means.row(k);
                    let mut acc = 0.0;
                    let mut log_det_half = 0.0;
                    for i in 0..d {
                        let s = cov.std_at(k, i);
                        let z = (x[i] - mu[i]) / s;
                        acc += z * z;
                        log_det_half += s.ln();
                    }
                    *o = self.weights[k].ln() - half_d_log_2pi - log_det_half - 0.5 * acc;
                }
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("frame contains NaN or Inf".into()));
        }
        Ok(())
    }

    /// Log posteriors `log P(k | x)`, normalized with log-sum-exp.
    pub fn log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut lj = self.log_joint(x);
        let lse = log_sum_exp(&lj);
        for v in lj.iter_mut() {
            *v -= lse;
        }
        Ok(lj)
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_posterior(x)?.into_iter().map(f64::exp).collect())
    }

    /// T×K posterior matrix for a frame matrix.
    pub fn posteriors(&self, frames: &Matrix) -> Result<Matrix> {
        if frames.cols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: frames.cols() });
        }
        let mut out = Matrix::zeros(frames.rows(), self.k());
        let mut scratch = vec![0.0; self.dim()];
        for (t, x) in frames.iter_rows().enumerate() {
            self.check_input(x)?;
            let row = out.row_mut(t);
            self.log_joint_into(x, row, &mut scratch);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(out)
    }

    /// Total log-likelihood of the frames under the mixture.
    pub fn loglik(&self, frames: &Matrix) -> f64 {
        let mut lj = vec![0.0; self.k()];
        let mut scratch = vec![0.0; self.dim()];
        frames
            .iter_rows()
            .map(|x| {
                self.log_joint_into(x, &mut lj, &mut scratch);
                log_sum_exp(&lj)
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmInit {
    KMeans,
    RandomResponsibility,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub variance_floor: f64,
    pub init: EmInit,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-6, variance_floor: 1e-6, init: EmInit::KMeans, kmeans_iters: 10, seed: 0 }
    }
}

impl EmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::config("rel_tol must be positive"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::config("variance_floor must be positive"));
        }
        Ok(())
    }
}

/// Result of EM: the model plus the log-likelihood before every M-step and at the end.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub model: GmmModel,
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of times an emptied component was re-seeded.
    pub reseeds: usize,
}

/// Trains a mixture by k-means++ / k-means initialization followed by EM.
pub fn train_ubm(frames: &Matrix, k: usize, kind: CovarianceKind, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let n = frames.rows();
    if k == 0 {
        return Err(Error::config("K must be positive"));
    }
    if n < k {
        return Err(Error::DegenerateData(format!("{n} frames cannot support {k} components")));
    }
    if frames.cols() == 0 {
        return Err(Error::config("frames have zero dimension"));
    }
    if !frames.is_finite() {
        return Err(Error::NonFiniteInput("training frames contain NaN or Inf".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    let resp = match cfg.init {
        EmInit::KMeans => {
            let centroids = kmeans(frames, k, cfg.kmeans_iters, &mut rng);
            hard_responsibilities(frames, &centroids)
        }
        EmInit::RandomResponsibility => {
            let mut r = Matrix::zeros(n, k);
            for t in 0..n {
                let row = r.row_mut(t);
                for v in row.iter_mut() {
                    *v = rng.random::<f64>() + 1e-3;
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            r
        }
    };
    let mut reseeds = 0;
    let mut model = m_step(frames, &resp, kind, cfg.variance_floor, &mut reseeds)?;

    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = Matrix::zeros(n, k);
    for _ in 0..cfg.max_iters {
        let ll = e_step(&model, frames, &mut resp);
        if let Some(&prev) = history.last() {
            let rel = ((ll - prev) / f64::max(prev.abs(), f64::MIN_POSITIVE)).abs();
            history.push(ll);
            if rel < cfg.rel_tol {
                converged = true;
                break;
            }
        } else {
            history.push(ll);
        }
        model = m_step(frames, &resp, kind, cfg.variance_floor, &mut reseeds)?;
        iterations += 1;
    }
    if !converged {
        history.push(model.loglik(frames));
    }
    Ok(EmFit { model, loglik_history: history, iterations, converged, reseeds })
}

/// Posterior responsibilities in place; returns the log-likelihood of the model.
fn e_step(model: &GmmModel, frames: &Matrix, resp: &mut Matrix) -> f64 {
    let mut scratch = vec![0.0; model.dim()];
    let mut total = 0.0;
    for (t, x) in frames.iter_rows().enumerate() {
        let row = resp.row_mut(t);
        model.log_joint_into(x, row, &mut scratch);
        let lse = log_sum_exp(row);
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    total
}

/// Maximum-likelihood parameters from responsibilities, with variance flooring.
/// A component whose mass vanished is re-seeded at the frame farthest from every mean.
fn m_step(frames: &Matrix, resp: &Matrix, kind: CovarianceKind, floor: f64, reseeds: &mut usize) -> Result<GmmModel> {
    let n = frames.rows();
    let d = frames.cols();
    let k = resp.cols();
    let mut counts: Vec<f64> = (0..k).map(|j| (0..n).map(|t| resp[(t, j)]).sum()).collect();
    let mut means = Matrix::zeros(k, d);
    for (t, x) in frames.iter_rows().enumerate() {
        for j in 0..k {
            let r = resp[(t, j)];
            if r != 0.0 {
                linalg::axpy(r, x, means.row_mut(j));
            }
        }
    }
    let empty_threshold = 1e-10 * n as f64;
    let mut reseeded = vec![false; k];
    for j in 0..k {
        if counts[j] > empty_threshold {
            let c = counts[j];
            means.row_mut(j).iter_mut().for_each(|v| *v /= c);
        }
    }
    for j in 0..k {
        if counts[j] <= empty_threshold {
            let far = farthest_frame(frames, &means, &counts, empty_threshold);
            means.row_mut(j).copy_from_slice(frames.row(far));
            counts[j] = 1.0;
            reseeded[j] = true;
            *reseeds += 1;
        }
    }
    let total: f64 = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|c| (c / total).max(1e-300)).collect();
    let wsum: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / wsum).collect();

    // weighted scatter per component, diagonal or full
    let effective = |t: usize, j: usize| if reseeded[j] { 0.0 } else { resp[(t, j)] };
    let cov = match kind {
        CovarianceKind::SharedFull => {
            let mut s = Matrix::zeros(d, d);
            let mut diff = vec![0.0; d];
            for (t, x) in frames.iter_rows().enumerate() {
                for j in 0..k {
                    let r = effective(t, j);
                    if r == 0.0 {
                        continue;
                    }
                    for (i, di) in diff.iter_mut().enumerate() {
                        *di = x[i] - means[(j, i)];
                    }
                    for a in 0..d {
                        let ra = r * diff[a];
                        for b in a..d {
                            s[(a, b)] += ra * diff[b];
                        }
                    }
                }
            }
            let mass: f64 = (0..k).filter(|&j| !reseeded[j]).map(|j| counts[j]).sum();
            for a in 0..d {
                for b in a..d {
                    let v = s[(a, b)] / mass;
                    s[(a, b)] = v;
                    s[(b, a)] = v;
                }
            }
            CovarianceSpec::shared_full(clamp_eigenvalues(&s, floor))?
        }
        _ => {
            // per-component, per-coordinate weighted squared deviations
            let mut sq = Matrix::zeros(k, d);
            for (t, x) in frames.iter_rows().enumerate() {
                for j in 0..k {
                    let r = effective(t, j);
                    if r == 0.0 {
                        continue;
                    }
                    let mu = means.row(j);
                    let row = sq.row_mut(j);
                    for i in 0..d {
                        let dv = x[i] - mu[i];
                        row[i] += r * dv * dv;
                    }
                }
            }
            let live: Vec<usize> = (0..k).filter(|&j| !reseeded[j]).collect();
            let live_mass: f64 = live.iter().map(|&j| counts[j]).sum();
            let floor_std = |var: f64| var.max(floor).sqrt();
            match kind {
                CovarianceKind::Diagonal => {
                    let mut m = Matrix::zeros(k, d);
                    for j in 0..k {
                        for i in 0..d {
                            m[(j, i)] = if reseeded[j] { 1.0 } else { floor_std(sq[(j, i)] / counts[j]) };
                        }
                    }
                    if live.len() < k {
                        fill_reseeded_rows(&mut m, &reseeded, &live, &counts);
                    }
                    CovarianceSpec::Diagonal(m)
                }
                CovarianceKind::Spherical => {
                    let mut v: Vec<f64> = (0..k)
                        .map(|j| {
                            if reseeded[j] {
                                1.0
                            } else {
                                floor_std(sq.row(j).iter().sum::<f64>() / (counts[j] * d as f64))
                            }
                        })
                        .collect();
                    if live.len() < k {
                        let avg = live.iter().map(|&j| v[j] * counts[j]).sum::<f64>() / live_mass;
                        for j in 0..k {
                            if reseeded[j] {
                                v[j] = avg;
                            }
                        }
                    }
                    CovarianceSpec::Spherical(v)
                }
                CovarianceKind::SharedDiagonal => {
                    let v =
                        (0..d).map(|i| floor_std(live.iter().map(|&j| sq[(j, i)]).sum::<f64>() / live_mass)).collect();
                    CovarianceSpec::SharedDiagonal(v)
                }
                CovarianceKind::SharedSpherical => {
                    let total_sq: f64 = live.iter().map(|&j| sq.row(j).iter().sum::<f64>()).sum();
                    CovarianceSpec::SharedSpherical(floor_std(total_sq / (live_mass * d as f64)))
                }
                CovarianceKind::SharedFull => unreachable!(),
            }
        }
    };
    GmmModel::new(weights, means, cov)
}

fn fill_reseeded_rows(m: &mut Matrix, reseeded: &[bool], live: &[usize], counts: &[f64]) {
    let d = m.cols();
    let mass: f64 = live.iter().map(|&j| counts[j]).sum();
    let avg: Vec<f64> = (0..d).map(|i| live.iter().map(|&j| m[(j, i)] * counts[j]).sum::<f64>() / mass).collect();
    for (j, &r) in reseeded.iter().enumerate() {
        if r {
            m.row_mut(j).copy_from_slice(&avg);
        }
    }
}

fn farthest_frame(frames: &Matrix, means: &Matrix, counts: &[f64], threshold: f64) -> usize {
    let live: Vec<usize> = (0..means.rows()).filter(|&j| counts[j] > threshold).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for (t, x) in frames.iter_rows().enumerate() {
        let nearest = live.iter().map(|&j| sq_dist(x, means.row(j))).fold(f64::INFINITY, f64::min);
        if nearest > best.1 {
            best = (t, nearest);
        }
    }
    best.0
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(frames: &Matrix, k: usize, iters: usize, rng: &mut rng::Rng) -> Matrix {
    let n = frames.rows();
    let d = frames.cols();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(frames.row(first));
    let mut dist: Vec<f64> = frames.iter_rows().map(|x| sq_dist(x, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (t, &dt) in dist.iter().enumerate() {
                acc += dt;
                if acc > target {
                    chosen = t;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(frames.row(pick));
        for (t, x) in frames.iter_rows().enumerate() {
            dist[t] = dist[t].min(sq_dist(x, centroids.row(c)));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (t, x) in frames.iter_rows().enumerate() {
            assign[t] = nearest_centroid(x, &centroids);
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (t, x) in frames.iter_rows().enumerate() {
            counts[assign[t]] += 1;
            linalg::axpy(1.0, x, sums.row_mut(assign[t]));
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    centroids
}

pub fn nearest_centroid(x: &[f64], centroids: &Matrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let dd = sq_dist(x, mu);
        if dd < best.1 {
            best = (c, dd);
        }
    }
    best.0
}

fn hard_responsibilities(frames: &Matrix, centroids: &Matrix) -> Matrix {
    let mut r = Matrix::zeros(frames.rows(), centroids.rows());
    for (t, x) in frames.iter_rows().enumerate() {
        r[(t, nearest_centroid(x, centroids))] = 1.0;
    }
    r
}

// ---------------------------------------------------------------------------
// serialization

pub fn encode_gmm(model: &GmmModel) -> Result<Vec<u8>> {
    let mut e = Encoder::new();
    encode_gmm_into(model, &mut e)?;
    Ok(e.into_bytes())
}

pub(crate) fn encode_gmm_into(model: &GmmModel, e: &mut Encoder) -> Result<()> {
    e.magic(GMM_MAGIC)
        .u32(GMM_VERSION)
        .u32(len_u32(model.k(), "K")?)
        .u32(len_u32(model.dim(), "D")?)
        .u32(model.kind().tag());
    for &w in &model.weights {
        e.f64(w);
    }
    for &m in model.means.as_slice() {
        e.f64(m);
    }
    let cov_values: &[f64] = match &model.cov {
        CovarianceSpec::SharedFull { cov, .. } => cov.as_slice(),
        other => other.std_values(),
    };
    for &v in cov_values {
        e.f64(v);
    }
    Ok(())
}

pub fn decode_gmm(bytes: &[u8]) -> Result<GmmModel> {
    let mut d = Decoder::new(bytes);
    let model = decode_gmm_from(&mut d)?;
    if !d.is_at_end() {
        return Err(Error::Malformed { offset: d.offset(), what: "trailing bytes after GMM1 blob".into() });
    }
    Ok(model)
}

pub(crate) fn decode_gmm_from(d: &mut Decoder<'_>) -> Result<GmmModel> {
    d.expect_magic(GMM_MAGIC)?;
    let version = d.u32("version")?;
    if version != GMM_VERSION {
        return Err(Error::UnsupportedVersion { format: "GMM1", version });
    }
    let k = d.u32("K")? as usize;
    let dim = d.u32("D")? as usize;
    let tag_at = d.offset();
    let kind = CovarianceKind::from_tag(d.u32("covariance tag")?)
        .ok_or_else(|| Error::Malformed { offset: tag_at, what: "unknown covariance tag".into() })?;
    let read_n = |d: &mut Decoder<'_>, n: usize, what: &str| -> Result<Vec<f64>> {
        if d.remaining() < n.saturating_mul(8) {
            return Err(Error::Truncated { offset: d.offset(), what: what.to_string() });
        }
        (0..n).map(|_| d.f64(what)).collect()
    };
    let weights = read_n(d, k, "weights")?;
    let means = Matrix::from_vec(k, dim, read_n(d, k * dim, "means")?)?;
    let cov = match kind {
        CovarianceKind::SharedFull => {
            CovarianceSpec::shared_full(Matrix::from_vec(dim, dim, read_n(d, dim * dim, "covariance")?)?)?
        }
        CovarianceKind::SharedSpherical => CovarianceSpec::SharedSpherical(read_n(d, 1, "sigma")?[0]),
        CovarianceKind::Spherical => CovarianceSpec::Spherical(read_n(d, k, "sigma")?),
        CovarianceKind::SharedDiagonal => CovarianceSpec::SharedDiagonal(read_n(d, dim, "sigma")?),
        CovarianceKind::Diagonal => CovarianceSpec::Diagonal(Matrix::from_vec(k, dim, read_n(d, k * dim, "sigma")?)?),
    };
    GmmModel::new(weights, means, cov)
}

pub fn write_gmm(model: &GmmModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_gmm(model)?)?;
    Ok(())
}

pub fn read_gmm(path: impl AsRef<Path>) -> Result<GmmModel> {
    decode_gmm(&std::fs::read(path)?)
}

#[derive(Serialize)]
struct GmmJson<'a> {
    k: usize,
    dim: usize,
    covariance_kind: CovarianceKind,
    weights: &'a [f64],
    means: Vec<Vec<f64>>,
    /// Standard deviations, or the covariance matrix rows for the shared full kind.
    covariance: serde_json::Value,
}

/// Human-readable dump of the same content as the GMM1 blob.
pub fn to_json(model: &GmmModel) -> String {
    let covariance = match &model.cov {
        CovarianceSpec::SharedFull { cov, .. } => serde_json::json!(cov.to_rows()),
        CovarianceSpec::SharedSpherical(s) => serde_json::json!(s),
        CovarianceSpec::Spherical(v) | CovarianceSpec::SharedDiagonal(v) => serde_json::json!(v),
        CovarianceSpec::Diagonal(m) => serde_json::json!(m.to_rows()),
    };
    let doc = GmmJson {
        k: model.k(),
        dim: model.dim(),
        covariance_kind: model.kind(),
        weights: &model.weights,
        means: model.means.to_rows(),
        covariance,
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

/// Standard normal log density, handy for closed-form checks.
pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component_1d() -> GmmModel {
        let means = Matrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        GmmModel::new(vec![0.5, 0.5], means, CovarianceSpec::SharedSpherical(1.0)).unwrap()
    }

    #[test]
    fn single_component_posterior_is_one() {
        let m =
            GmmModel::new(vec![1.0], Matrix::from_rows(&[[3.0, -2.0]]).unwrap(), CovarianceSpec::Spherical(vec![0.7]))
                .unwrap();
        for x in [[0.0, 0.0], [100.0, -50.0]] {
            assert_eq!(m.posterior(&x).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn symmetric_two_component_posterior() {
        let p = two_component_1d().posterior(&[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_density_ratio() {
        let m = two_component_1d();
        let p = m.posterior(&[1.0]).unwrap();
        // direct density-ratio oracle
        let dens = |mu: f64| 0.5 * (-(1.0 - mu) * (1.0 - mu) / 2.0).exp() / (2.0 * PI).sqrt();
        let expected = dens(1.0) / (dens(1.0) + dens(-1.0));
        assert!((p[1] - expected).abs() < 1e-15);
        assert!((p[1] - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn far_away_points_do_not_underflow() {
        let m = two_component_1d();
        // Mahalanobis distance ~1e4
        let p = m.posterior(&[100.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[1] > 0.999);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        assert!(two_component_1d().log_posterior(&[f64::NAN]).is_err());
    }

    #[test]
    fn standard_normal_loglik() {
        let m = GmmModel::new(vec![1.0], Matrix::zeros(1, 1), CovarianceSpec::SharedSpherical(1.0)).unwrap();
        let ll = m.loglik(&Matrix::zeros(1, 1));
        assert!((ll - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((ll - std_normal_logpdf(0.0)).abs() < 1e-15);
    }

    #[test]
    fn shared_full_matches_diagonal_when_diagonal() {
        let means = Matrix::from_rows(&[[0.0, 1.0], [2.0, -1.0]]).unwrap();
        let mut cov = Matrix::zeros(2, 2);
        cov[(0, 0)] = 0.25;
        cov[(1, 1)] = 4.0;
        let full = GmmModel::new(vec![0.3, 0.7], means.clone(), CovarianceSpec::shared_full(cov).unwrap()).unwrap();
        let diag = GmmModel::new(vec![0.3, 0.7], means, CovarianceSpec::SharedDiagonal(vec![0.5, 2.0])).unwrap();
        let x = [0.3, -0.4];
        for (a, b) in full.log_joint(&x).iter().zip(diag.log_joint(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let means = Matrix::zeros(2, 1);
        assert!(GmmModel::new(vec![0.5, 0.4], means.clone(), CovarianceSpec::SharedSpherical(1.0)).is_err());
        assert!(GmmModel::new(vec![1.0, 0.0], means.clone(), CovarianceSpec::SharedSpherical(1.0)).is_err());
        assert!(GmmModel::new(vec![0.5, 0.5], means, CovarianceSpec::SharedSpherical(-1.0)).is_err());
    }

    #[test]
    fn too_few_frames_is_degenerate() {
        let frames = Matrix::zeros(2, 1);
        let err = train_ubm(&frames, 3, CovarianceKind::Diagonal, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn json_export_mentions_kind() {
        let s = to_json(&two_component_1d());
        assert!(s.contains("SharedSpherical"));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["k"], 2);
    }
}
