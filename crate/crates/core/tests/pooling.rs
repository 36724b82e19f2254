use sgmm::deep_pool::{init_from_ubm, CodeKind, PoolSpec, Variant};
use sgmm::gmm::{CovarianceKind, CovarianceSpec, GmmModel};
use sgmm::rng;
use sgmm::stats_pool::{self, SecondOrderKind};
use sgmm::{Error, Matrix};

fn ubm(kind: CovarianceKind) -> GmmModel {
    let mut r = rng::seeded(40);
    let means = Matrix::from_vec(3, 2, rng::normal_vec(&mut r, 6, 2.0)).unwrap();
    let cov = match kind {
        CovarianceKind::SharedSpherical => CovarianceSpec::SharedSpherical(1.3),
        CovarianceKind::Spherical => CovarianceSpec::Spherical(vec![0.8, 1.0, 1.6]),
        CovarianceKind::SharedDiagonal => CovarianceSpec::SharedDiagonal(vec![0.7, 1.4]),
        CovarianceKind::Diagonal => {
            CovarianceSpec::Diagonal(Matrix::from_rows(&[[0.5, 1.0], [1.5, 0.9], [1.1, 2.0]]).unwrap())
        }
        CovarianceKind::SharedFull => {
            CovarianceSpec::shared_full(Matrix::from_rows(&[[1.0, 0.4], [0.4, 0.8]]).unwrap()).unwrap()
        }
    };
    GmmModel::new(vec![0.3, 0.3, 0.4], means, cov).unwrap()
}

fn variant_for(kind: CovarianceKind) -> Variant {
    match kind {
        CovarianceKind::SharedSpherical => Variant::SharedSpherical,
        CovarianceKind::Spherical => Variant::Spherical,
        CovarianceKind::SharedDiagonal => Variant::SharedDiagonal,
        CovarianceKind::Diagonal => Variant::Diagonal,
        CovarianceKind::SharedFull => Variant::Decoupled,
    }
}

fn frames(seed: u64, t: usize) -> Matrix {
    let mut r = rng::seeded(seed);
    Matrix::from_vec(t, 2, rng::normal_vec(&mut r, t * 2, 2.0)).unwrap()
}

#[test]
fn initialized_assignment_matches_gmm_posteriors() {
    for kind in CovarianceKind::ALL {
        let g = ubm(kind);
        let layer = init_from_ubm(&g, variant_for(kind), PoolSpec::new(CodeKind::Dsgmm)).unwrap();
        let x = frames(1, 50);
        assert!(layer.assign(&x).max_abs_diff(&g.posteriors(&x).unwrap()) < 1e-9, "{kind:?}");
    }
}

#[test]
fn initialized_codes_match_unsupervised_codes() {
    let g = ubm(CovarianceKind::Diagonal);
    let x = frames(2, 30);
    let stats = stats_pool::accumulate_frames(&g, &x, SecondOrderKind::None).unwrap();
    for gamma in [0.0, 0.125, 3.0] {
        let spec = PoolSpec { gamma, intra_norm: false, ..PoolSpec::new(CodeKind::Dsgmm) };
        let layer = init_from_ubm(&g, Variant::Diagonal, spec).unwrap();
        let want = stats_pool::sgmm_code(&stats, &g, gamma).unwrap();
        assert!(layer.forward(&x).unwrap().0.max_abs_diff(&want.values) < 1e-10);
    }
    let spec = PoolSpec { intra_norm: true, final_norm: true, ..PoolSpec::new(CodeKind::Vlad) };
    let layer = init_from_ubm(&g, Variant::Diagonal, spec).unwrap();
    let want = stats_pool::normalize(&stats_pool::vlad_code(&stats, &g).unwrap(), true, true);
    assert!(layer.forward(&x).unwrap().0.max_abs_diff(&want.values) < 1e-10);
}

#[test]
fn huge_gamma_pins_code_to_anchors_and_kills_frame_gradient() {
    let g = ubm(CovarianceKind::Spherical);
    let spec = PoolSpec { gamma: 1e12, intra_norm: false, ..PoolSpec::new(CodeKind::Dsgmm) };
    let layer = init_from_ubm(&g, Variant::Spherical, spec).unwrap();
    let x = frames(3, 20);
    let (code, cache) = layer.forward(&x).unwrap();
    assert!(code.max_abs_diff(g.means()) < 1e-9);
    let upstream = Matrix::filled(3, 2, 1.0);
    let grads = layer.backward(&x, Some(&cache), &upstream).unwrap();
    assert!(grads.frames.as_slice().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn mismatched_ubm_is_rejected() {
    let g = ubm(CovarianceKind::SharedFull);
    let err = init_from_ubm(&g, Variant::Diagonal, PoolSpec::new(CodeKind::Dsgmm)).unwrap_err();
    assert!(matches!(err, Error::IncompatibleCovariance(_)));
}

#[test]
fn backward_requires_cache() {
    let g = ubm(CovarianceKind::Diagonal);
    let layer = init_from_ubm(&g, Variant::Diagonal, PoolSpec::new(CodeKind::Dsgmm)).unwrap();
    let x = frames(4, 10);
    let (_, cache) = layer.forward(&x).unwrap();
    let up = Matrix::from_vec(3, 2, vec![0.1, -0.2, 0.3, 0.5, -0.7, 0.2]).unwrap();
    assert!(layer.backward(&x, Some(&cache), &up).is_ok());
    assert!(matches!(layer.backward(&x, None, &up), Err(Error::MissingCache)));
}
