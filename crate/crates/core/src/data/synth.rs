//! Seeded synthetic classification data with the shape of frame-level video corpora.
//!
//! Frames come from `num_clusters_true` shared Gaussian clusters. Each class owns a
//! distribution over those clusters (its occupancy profile) and a video draws its
//! frames from the average profile of its labels. With `balanced_means` the clusters
//! come in antipodal pairs `±c` that always receive equal mass, so every class has the
//! same expected frame mean and the class signal lives only in cluster occupancy.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_clusters_true: usize,
    pub dim: usize,
    pub videos_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub cluster_spread: f64,
    /// Standard deviation of centroid coordinates.
    pub centroid_scale: f64,
    pub balanced_means: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_clusters_true: 16,
            dim: 16,
            videos_per_class: 100,
            frames_min: 20,
            frames_max: 40,
            cluster_spread: 1.0,
            centroid_scale: 2.0,
            balanced_means: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_clusters_true == 0 || self.dim == 0 {
            return Err(Error::config("num_classes, num_clusters_true and dim must be positive"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::config("need 1 <= frames_min <= frames_max"));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(Error::config("cluster_spread must be positive"));
        }
        if !(self.centroid_scale > 0.0) || !self.centroid_scale.is_finite() {
            return Err(Error::config("centroid_scale must be positive"));
        }
        Ok(())
    }
}

/// Latent structure behind a generated dataset.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub centroids: Matrix,
    /// `num_classes × num_clusters_true` occupancy distributions.
    pub profiles: Matrix,
    /// True cluster of every frame, aligned with `Dataset::records`.
    pub frame_clusters: Vec<Vec<u32>>,
}

pub fn gen_classification(cfg: &SynthConfig) -> Result<Dataset> {
    gen_classification_with_truth(cfg).map(|(d, _)| d)
}

pub fn gen_classification_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let k = cfg.num_clusters_true;
    let centroids = make_centroids(cfg, &mut rng);
    let profiles = make_profiles(cfg, &mut rng);
    let neighbours = nearest_classes(&profiles);

    let mut videos: Vec<(Vec<u32>, Matrix, Vec<u32>)> = Vec::new();
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.videos_per_class {
            let labels = draw_labels(class, &neighbours[class], &mut rng);
            let mut mixture = vec![0.0; k];
            for &l in &labels {
                for (m, p) in mixture.iter_mut().zip(profiles.row(l as usize)) {
                    *m += p / labels.len() as f64;
                }
            }
            let t = rng.random_range(cfg.frames_min..=cfg.frames_max);
            let mut frames = Matrix::zeros(t, cfg.dim);
            let mut clusters = Vec::with_capacity(t);
            for row in 0..t {
                let c = sample_categorical(&mixture, &mut rng);
                clusters.push(c as u32);
                let centre = centroids.row(c);
                for (j, x) in frames.row_mut(row).iter_mut().enumerate() {
                    *x = to_f32_grid(centre[j] + cfg.cluster_spread * rng::normal(&mut rng));
                }
            }
            let mut sorted = labels.clone();
            sorted.sort_unstable();
            videos.push((sorted, frames, clusters));
        }
    }
    videos.shuffle(&mut rng);

    let mut records = Vec::with_capacity(videos.len());
    let mut frame_clusters = Vec::with_capacity(videos.len());
    for (i, (labels, frames, clusters)) in videos.into_iter().enumerate() {
        records.push(VideoRecord::new(format!("v{i:06}"), labels, frames));
        frame_clusters.push(clusters);
    }
    let dataset = Dataset::new(records, cfg.num_classes, cfg.dim)?;
    Ok((dataset, SynthTruth { centroids, profiles, frame_clusters }))
}

/// Rounds through f32 so generated values survive the VSEQ container bit-exactly.
fn to_f32_grid(v: f64) -> f64 {
    f64::from(v as f32)
}

fn make_centroids(cfg: &SynthConfig, rng: &mut Rng) -> Matrix {
    let k = cfg.num_clusters_true;
    let mut c = Matrix::zeros(k, cfg.dim);
    if cfg.balanced_means {
        for pair in 0..k / 2 {
            let v = rng::normal_vec(rng, cfg.dim, cfg.centroid_scale);
            for j in 0..cfg.dim {
                c[(2 * pair, j)] = to_f32_grid(v[j]);
                c[(2 * pair + 1, j)] = to_f32_grid(-v[j]);
            }
        }
        // an odd leftover cluster sits at the origin, which keeps the mean balanced
    } else {
        for i in 0..k {
            let v = rng::normal_vec(rng, cfg.dim, cfg.centroid_scale);
            for j in 0..cfg.dim {
                c[(i, j)] = to_f32_grid(v[j]);
            }
        }
    }
    c
}

/// Half of each class's mass goes to a dedicated group, the rest is a random softmax
/// over groups. A group is an antipodal pair (balanced) or a single cluster.
fn make_profiles(cfg: &SynthConfig, rng: &mut Rng) -> Matrix {
    let k = cfg.num_clusters_true;
    let groups: Vec<Vec<usize>> = if cfg.balanced_means {
        let mut g: Vec<Vec<usize>> = (0..k / 2).map(|p| vec![2 * p, 2 * p + 1]).collect();
        if k % 2 == 1 {
            g.push(vec![k - 1]);
        }
        g
    } else {
        (0..k).map(|i| vec![i]).collect()
    };
    let n_groups = groups.len();
    let mut profiles = Matrix::zeros(cfg.num_classes, k);
    for class in 0..cfg.num_classes {
        let z = rng::normal_vec(rng, n_groups, 2.0);
        let mut group_mass = softmax(&z);
        for m in group_mass.iter_mut() {
            *m *= 0.5;
        }
        group_mass[class % n_groups] += 0.5;
        for (g, members) in groups.iter().enumerate() {
            for &c in members {
                profiles[(class, c)] = group_mass[g] / members.len() as f64;
            }
        }
    }
    profiles
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// For each class, up to three other classes ordered by profile similarity.
fn nearest_classes(profiles: &Matrix) -> Vec<Vec<u32>> {
    let n = profiles.rows();
    (0..n)
        .map(|c| {
            let mut others: Vec<(f64, usize)> =
                (0..n).filter(|&o| o != c).map(|o| (total_variation(profiles.row(c), profiles.row(o)), o)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(3).map(|(_, o)| o as u32).collect()
        })
        .collect()
}

/// Primary label plus 0–2 extra labels drawn from the nearest classes.
fn draw_labels(class: usize, neighbours: &[u32], rng: &mut Rng) -> Vec<u32> {
    let n_labels = rng.random_range(1..=3usize).min(neighbours.len() + 1);
    let mut labels = vec![class as u32];
    let mut pool = neighbours.to_vec();
    pool.shuffle(rng);
    labels.extend(pool.into_iter().take(n_labels - 1));
    labels
}

fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 2,
            num_clusters_true: 2,
            dim: 2,
            videos_per_class: 5,
            frames_min: 3,
            frames_max: 6,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        assert_eq!(gen_classification(&small()).unwrap(), gen_classification(&small()).unwrap());
        let other = SynthConfig { seed: 8, ..small() };
        assert_ne!(gen_classification(&small()).unwrap(), gen_classification(&other).unwrap());
    }

    #[test]
    fn vanishing_spread_puts_frames_on_centroids() {
        let cfg = SynthConfig { cluster_spread: 1e-30, ..small() };
        let (ds, truth) = gen_classification_with_truth(&cfg).unwrap();
        for (rec, clusters) in ds.records.iter().zip(&truth.frame_clusters) {
            for (t, &c) in clusters.iter().enumerate() {
                assert_eq!(rec.frames.row(t), truth.centroids.row(c as usize));
            }
        }
    }

    #[test]
    fn labels_are_valid_and_bounded() {
        let cfg = SynthConfig { num_classes: 5, videos_per_class: 20, ..small() };
        let ds = gen_classification(&cfg).unwrap();
        assert_eq!(ds.len(), 100);
        for r in &ds.records {
            assert!((1..=3).contains(&r.labels.len()));
            assert!(r.labels.iter().all(|&l| (l as usize) < 5));
            assert!(r.frames.is_finite());
        }
    }

    #[test]
    fn balanced_profiles_split_pair_mass_evenly() {
        let cfg = SynthConfig { num_classes: 3, num_clusters_true: 6, ..small() };
        let mut rng = rng::seeded(1);
        let p = make_profiles(&cfg, &mut rng);
        for c in 0..3 {
            let row = p.row(c);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for pair in 0..3 {
                assert_eq!(row[2 * pair], row[2 * pair + 1]);
            }
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(gen_classification(&SynthConfig { frames_min: 0, ..small() }).is_err());
        assert!(gen_classification(&SynthConfig { frames_min: 9, frames_max: 3, ..small() }).is_err());
        assert!(gen_classification(&SynthConfig { cluster_spread: 0.0, ..small() }).is_err());
    }
}
