use std::collections::HashMap;

use sgmm::data::{gen_classification, gen_cowatch, SynthConfig, Triplet};
use sgmm::deep_pool::{CodeKind, PoolLayer, PoolSpec, Variant};
use sgmm::params::Params;
use sgmm::reco::{self, EmbedConfig, EmbedNet, GlmixConfig, Observation, RecoModel};
use sgmm::rng;
use sgmm::Matrix;

fn tiny_model(seed: u64) -> RecoModel {
    let mut r = rng::seeded(seed);
    let pool = PoolLayer::random(PoolSpec::new(CodeKind::Dsgmm), Variant::Diagonal, 3, 2, &mut r);
    RecoModel::new(pool, EmbedConfig { embed_dim: 3, hidden: 5 }, &mut r).unwrap()
}

#[test]
fn triplet_loss_gradient_matches_finite_differences() {
    let mut r = rng::seeded(30);
    let ids = ["a", "b", "c", "d"];
    let frames: Vec<Matrix> =
        (0..4).map(|_| Matrix::from_vec(6, 2, rng::normal_vec(&mut r, 12, 1.5)).unwrap()).collect();
    let index: HashMap<&str, &Matrix> = ids.iter().copied().zip(frames.iter()).collect();
    let t = |a: &str, p: &str, n: &str| Triplet { anchor: a.into(), positive: p.into(), negative: n.into() };
    let triplets = vec![t("a", "b", "c"), t("b", "c", "d"), t("d", "a", "b")];
    // a large margin keeps every hinge active so the loss is smooth
    let alpha = 5.0;
    let model = tiny_model(31);
    let (_, grad) = reco::triplet_loss(&model, &index, &triplets, alpha).unwrap();
    let analytic = grad.flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let base = model.clone();
    for bi in 0..base.blocks().len() {
        let len = base.blocks()[bi].1.len();
        for j in (0..len).step_by(len.div_ceil(6).max(1)) {
            let mut plus = base.clone();
            plus.blocks_mut()[bi].1[j] += h;
            let mut minus = base.clone();
            minus.blocks_mut()[bi].1[j] -= h;
            let lp = reco::triplet_loss(&plus, &index, &triplets, alpha).unwrap().0;
            let lm = reco::triplet_loss(&minus, &index, &triplets, alpha).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[idx + j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        idx += len;
    }
    assert!(worst < 1e-4, "max rel err {worst}");
}

#[test]
fn embeddings_are_unit_norm() {
    let model = tiny_model(2);
    let mut r = rng::seeded(3);
    let x = Matrix::from_vec(5, 2, rng::normal_vec(&mut r, 10, 1.0)).unwrap();
    let e = model.embed(&x).unwrap();
    assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    let net = EmbedNet::zeros(4, EmbedConfig { embed_dim: 3, hidden: 2 });
    let (z, _) = net.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(z, vec![1.0, 0.0, 0.0]);
}

#[test]
fn similarity_scores_match_oracle() {
    let h = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    let c = [0.8, 0.6];
    let sims: Vec<f64> = h.iter().map(|v| v[0] * c[0] + v[1] * c[1]).collect();
    let (avg, max) = reco::sim_scores(&h, &c).unwrap();
    assert!((avg - sims.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    assert_eq!(max, 0.96);
    assert!(reco::sim_scores(&[], &c).is_err());
}

#[test]
fn glmix_recovers_a_separable_signal() {
    let mut r = rng::seeded(5);
    let mut obs = Vec::new();
    for u in 0..4 {
        for _ in 0..60 {
            let x = rng::normal_vec(&mut r, 1, 1.0);
            obs.push(Observation { user: format!("u{u}"), features: x.clone(), label: x[0] > 0.0 });
        }
    }
    let fit = reco::glmix_fit(&obs, &GlmixConfig::default()).unwrap();
    assert!(fit.converged);
    for u in 0..4 {
        let m = &fit.model;
        assert!(m.predict(&format!("u{u}"), &[1.0]) > 0.8);
        assert!(m.predict(&format!("u{u}"), &[-1.0]) < 0.2);
    }
    // unseen users fall back to the global intercept
    assert!((fit.model.logit("nobody", &[3.0]) - fit.model.beta0).abs() < 1e-15);
}

#[test]
fn session_split_and_triplets_stay_in_train() {
    let data = gen_classification(&SynthConfig { videos_per_class: 10, seed: 1, ..SynthConfig::default() }).unwrap();
    let cw = gen_cowatch(12, &data, 3);
    let (train, test) = reco::split_sessions(&cw.interactions, 0.8);
    assert_eq!(train.len() + test.len(), cw.interactions.len());
    for t in &test {
        let max_train = train.iter().filter(|i| i.user == t.user).map(|i| i.session).max();
        assert!(max_train.is_none_or(|m| m < t.session));
    }
    let triplets = reco::triplets_from_interactions(&train, 4, 9);
    assert!(!triplets.is_empty());
    let watched: std::collections::BTreeSet<&str> =
        train.iter().filter(|i| i.watched).map(|i| i.video.as_str()).collect();
    assert!(triplets.iter().all(|t| watched.contains(t.anchor.as_str()) && watched.contains(t.positive.as_str())));
    assert_eq!(triplets, reco::triplets_from_interactions(&train, 4, 9));
}

#[test]
fn reco_model_round_trips() {
    let model = tiny_model(12);
    let bytes = reco::encode_reco_model(&model).unwrap();
    let back = reco::decode_reco_model(&bytes).unwrap();
    assert_eq!(back.flatten(), model.flatten());
    assert_eq!(reco::encode_reco_model(&back).unwrap(), bytes);
    assert!(reco::decode_reco_model(&bytes[..bytes.len() - 3]).is_err());
}
