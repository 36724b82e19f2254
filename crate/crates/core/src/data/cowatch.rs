//! Simulated users, watch sessions and co-watch triplets over a video dataset.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng as _;

use super::Dataset;
use crate::linalg::sigmoid;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CowatchConfig {
    pub sessions_per_user: usize,
    pub videos_per_session: usize,
    /// Number of classes each user prefers.
    pub preferred_classes: usize,
    /// Slope of the watch logit in the user/video affinity.
    pub affinity_scale: f64,
    /// Affinity at which the watch probability crosses one half (before propensity).
    pub affinity_bias: f64,
    /// Standard deviation of the per-user watch propensity offset.
    pub propensity_std: f64,
    pub max_triplets_per_session: usize,
    pub seed: u64,
}

impl Default for CowatchConfig {
    fn default() -> Self {
        Self {
            sessions_per_user: 10,
            videos_per_session: 8,
            preferred_classes: 2,
            affinity_scale: 10.0,
            affinity_bias: 0.3,
            propensity_std: 0.5,
            max_triplets_per_session: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub video: String,
    pub session: u32,
    pub watched: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CowatchData {
    pub interactions: Vec<Interaction>,
    /// Distinct `(user, a, b)` co-watch pairs with `a < b`.
    pub pairs: Vec<(String, String, String)>,
    pub triplets: Vec<Triplet>,
    /// Latent per-user class preferences, `users × num_classes`.
    pub user_topics: Vec<Vec<f64>>,
}

pub fn gen_cowatch(users: usize, videos: &Dataset, affinity_seed: u64) -> CowatchData {
    let cfg = CowatchConfig { seed: affinity_seed, ..CowatchConfig::default() };
    gen_cowatch_with(users, videos, &cfg)
}

pub fn gen_cowatch_with(users: usize, videos: &Dataset, cfg: &CowatchConfig) -> CowatchData {
    let mut out = CowatchData::default();
    if users == 0 || videos.is_empty() {
        return out;
    }
    let n_classes = videos.num_classes;
    let mut rng = rng::seeded(cfg.seed);
    for u in 0..users {
        let user = format!("u{u:05}");
        let n_pref = cfg.preferred_classes.clamp(1, n_classes);
        let mut topic = vec![0.0; n_classes];
        for c in sample(&mut rng, n_classes, n_pref) {
            topic[c] = 1.0 / n_pref as f64;
        }
        let propensity = cfg.propensity_std * rng::normal(&mut rng);
        let mut seen_pairs = BTreeSet::new();

        for session in 0..cfg.sessions_per_user {
            let shown = cfg.videos_per_session.min(videos.len());
            let mut picks: Vec<usize> = sample(&mut rng, videos.len(), shown).into_vec();
            picks.sort_unstable();
            let mut watched = Vec::new();
            let mut skipped = Vec::new();
            for &v in &picks {
                let rec = &videos.records[v];
                let affinity: f64 = rec.labels.iter().map(|&l| topic[l as usize]).sum();
                let p = sigmoid(cfg.affinity_scale * (affinity - cfg.affinity_bias) + propensity);
                let w = rng.random::<f64>() < p;
                out.interactions.push(Interaction {
                    user: user.clone(),
                    video: rec.id.clone(),
                    session: session as u32,
                    watched: w,
                });
                if w {
                    watched.push(v);
                } else {
                    skipped.push(v);
                }
            }

            let mut session_triplets = Vec::new();
            for (i, &a) in watched.iter().enumerate() {
                for &b in &watched[i + 1..] {
                    let (ia, ib) = (&videos.records[a].id, &videos.records[b].id);
                    if seen_pairs.insert((ia.clone(), ib.clone())) {
                        out.pairs.push((user.clone(), ia.clone(), ib.clone()));
                    }
                    for &n in &skipped {
                        let neg = &videos.records[n].id;
                        session_triplets.push(Triplet {
                            anchor: ia.clone(),
                            positive: ib.clone(),
                            negative: neg.clone(),
                        });
                        session_triplets.push(Triplet {
                            anchor: ib.clone(),
                            positive: ia.clone(),
                            negative: neg.clone(),
                        });
                    }
                }
            }
            if session_triplets.len() > cfg.max_triplets_per_session {
                let keep = sample(&mut rng, session_triplets.len(), cfg.max_triplets_per_session);
                let mut idx = keep.into_vec();
                idx.sort_unstable();
                session_triplets = idx.into_iter().map(|i| session_triplets[i].clone()).collect();
            }
            out.triplets.extend(session_triplets);
        }
        out.user_topics.push(topic);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification, SynthConfig, VideoRecord};
    use crate::linalg::Matrix;

    fn videos() -> Dataset {
        gen_classification(&SynthConfig {
            num_classes: 4,
            num_clusters_true: 4,
            dim: 3,
            videos_per_class: 6,
            frames_min: 2,
            frames_max: 4,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_users_gives_nothing() {
        assert_eq!(gen_cowatch(0, &videos(), 1), CowatchData::default());
    }

    #[test]
    fn deterministic_for_a_seed() {
        let v = videos();
        assert_eq!(gen_cowatch(5, &v, 9), gen_cowatch(5, &v, 9));
        assert_ne!(gen_cowatch(5, &v, 9).interactions, gen_cowatch(5, &v, 10).interactions);
    }

    #[test]
    fn preferred_videos_are_co_watched() {
        // one class: every video matches the user's topic, so the watch logit is
        // scale * (1 - bias) + propensity, far into the saturated region
        let recs = vec![
            VideoRecord::new("a", vec![0], Matrix::zeros(1, 2)),
            VideoRecord::new("b", vec![0], Matrix::zeros(1, 2)),
        ];
        let ds = Dataset::new(recs, 1, 2).unwrap();
        let cfg = CowatchConfig { sessions_per_user: 1, propensity_std: 0.0, ..CowatchConfig::default() };
        let p = sigmoid(cfg.affinity_scale * (1.0 - cfg.affinity_bias));
        assert!(p > 0.999);
        let out = gen_cowatch_with(1, &ds, &cfg);
        assert_eq!(out.interactions.len(), 2);
        assert!(out.interactions.iter().all(|i| i.watched));
        assert_eq!(out.pairs, vec![("u00000".to_string(), "a".to_string(), "b".to_string())]);
        assert!(out.triplets.is_empty());
    }

    #[test]
    fn triplets_come_from_one_session() {
        let v = videos();
        let out = gen_cowatch(6, &v, 2);
        assert!(!out.triplets.is_empty());
        for t in &out.triplets {
            assert_ne!(t.anchor, t.positive);
            assert_ne!(t.anchor, t.negative);
            assert_ne!(t.positive, t.negative);
        }
    }
}
