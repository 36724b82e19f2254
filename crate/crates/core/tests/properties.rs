use std::collections::BTreeSet;

use proptest::prelude::*;
use sgmm::data::{decode_vseq, encode_vseq, Dataset, VideoRecord};
use sgmm::deep_pool::{CodeKind, PoolLayer, PoolSpec, Variant};
use sgmm::gmm::{CovarianceSpec, GmmModel};
use sgmm::metrics::{gap, GroundTruth, ScoredPrediction};
use sgmm::rng;
use sgmm::Matrix;

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..5).prop_flat_map(|(dim, classes)| {
        let record = (1usize..6, proptest::collection::btree_set(0..classes as u32, 0..=classes)).prop_flat_map(
            move |(t, labels)| {
                proptest::collection::vec((-1e6f32..1e6).prop_map(f64::from), t * dim).prop_map(move |v| {
                    (labels.iter().copied().collect::<Vec<u32>>(), Matrix::from_vec(t, dim, v).unwrap())
                })
            },
        );
        proptest::collection::vec(record, 1..6).prop_map(move |recs| {
            let records =
                recs.into_iter().enumerate().map(|(i, (l, f))| VideoRecord::new(format!("vid-{i}"), l, f)).collect();
            Dataset::new(records, classes, dim).unwrap()
        })
    })
}

fn small_gmm() -> GmmModel {
    let means = Matrix::from_rows(&[[0.0, 0.0], [2.0, -1.0], [-3.0, 1.5]]).unwrap();
    let var = Matrix::from_rows(&[[1.0, 0.5], [0.8, 1.2], [2.0, 0.3]]).unwrap();
    GmmModel::new(vec![0.2, 0.5, 0.3], means, CovarianceSpec::Diagonal(var)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vseq_round_trip(ds in dataset_strategy()) {
        let bytes = encode_vseq(&ds).unwrap();
        let back = decode_vseq(&bytes).unwrap();
        // the class count is not stored, only the records and the dimension
        prop_assert_eq!(&back.records, &ds.records);
        prop_assert_eq!(back.dim, ds.dim);
        prop_assert_eq!(encode_vseq(&back).unwrap(), bytes);
    }

    #[test]
    fn vseq_truncation_is_an_error(ds in dataset_strategy(), cut in 0.0f64..1.0) {
        let bytes = encode_vseq(&ds).unwrap();
        let n = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(decode_vseq(&bytes[..n]).is_err());
    }

    #[test]
    fn posteriors_sum_to_one(x in -50.0f64..50.0, y in -50.0f64..50.0) {
        let p = small_gmm().posterior(&[x, y]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gap_invariant_under_monotone_transform(scores in proptest::collection::vec(0.01f64..0.99, 12), seed in 0u64..1000) {
        let mut truth = GroundTruth::new();
        truth.insert("a".into(), BTreeSet::from([(seed % 4) as u32]));
        truth.insert("b".into(), BTreeSet::from([1u32, 3]));
        truth.insert("c".into(), BTreeSet::from([2u32]));
        let ids = ["a", "b", "c"];
        let preds: Vec<ScoredPrediction> =
            scores.iter().enumerate().map(|(i, &s)| ScoredPrediction::new(ids[i / 4], (i % 4) as u32, s)).collect();
        let mapped: Vec<ScoredPrediction> = preds
            .iter()
            .map(|p| ScoredPrediction { confidence: (3.0 * p.confidence).exp() - 7.0, ..p.clone() })
            .collect();
        prop_assert_eq!(gap(&preds, &truth, 20).unwrap(), gap(&mapped, &truth, 20).unwrap());
    }

    #[test]
    fn pooling_ignores_frame_order(seed in 0u64..500, variant_idx in 0usize..6, dsgmm in any::<bool>()) {
        let mut r = rng::seeded(seed);
        let kind = if dsgmm { CodeKind::Dsgmm } else { CodeKind::Vlad };
        let layer = PoolLayer::random(PoolSpec::new(kind), Variant::ALL[variant_idx], 3, 2, &mut r);
        let frames = Matrix::from_vec(7, 2, rng::normal_vec(&mut r, 14, 1.5)).unwrap();
        let reversed = Matrix::from_rows(&frames.to_rows().into_iter().rev().collect::<Vec<_>>()).unwrap();
        let (a, _) = layer.forward(&frames).unwrap();
        let (b, _) = layer.forward(&reversed).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
