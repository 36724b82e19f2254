"""Smoke test for the sgmm_py extension module.

Build and place the module next to this script first:

    cargo build --release -p sgmm-py --features extension-module
    cp target/release/libsgmm_py.so python/sgmm_py.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import sgmm_py  # noqa: E402


def main() -> None:
    data = sgmm_py.Dataset.synth(classes=4, clusters=8, dim=8, videos_per_class=40, seed=1)
    rest, test = data.split_tail(0.2)
    train, val = rest.split_tail(0.25)
    print(f"videos: train {len(train)}, val {len(val)}, test {len(test)}")

    gmm = sgmm_py.Gmm.train(train.stacked_frames(), k=8, covariance="diagonal", seed=1)
    post = gmm.posteriors(train.frames(0))
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in post)

    frames = train.frames(0)
    ml = sgmm_py.sgmm_code(gmm, frames, gamma=0.0)
    smoothed = sgmm_py.sgmm_code(gmm, frames, gamma=1e12)
    assert len(ml) == gmm.k and len(ml[0]) == gmm.dim
    assert max(abs(a - b) for ra, rb in zip(smoothed, gmm.means) for a, b in zip(ra, rb)) < 1e-6
    vlad = sgmm_py.vlad_code(gmm, frames)
    assert len(vlad) == gmm.k

    report = sgmm_py.gradcheck(variant="diagonal", pool="dsgmm")
    print(f"gradcheck max rel err {report['max_rel_err']:.2e}")
    assert report["passed"]

    model = sgmm_py.Model.train(train, val, pool="dsgmm", gmm=gmm, lr=0.005, steps=60, batch_size=16, eval_every=20, seed=2)
    result = model.evaluate(test)
    print(f"{model.pool}: test GAP {result['gap']:.3f}, Hit@1 {result['hit1']:.3f}")
    assert 0.0 <= result["gap"] <= 1.0 and len(model.log()) == 3

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "best.ckpt")
        model.save(path)
        again = sgmm_py.Model.load(path)
        assert again.predict(frames) == model.predict(frames)
        gmm_path = os.path.join(tmp, "ubm.gmm")
        gmm.save(gmm_path)
        assert sgmm_py.Gmm.load(gmm_path).means == gmm.means

    g = sgmm_py.gap([("a", 1, 0.9), ("a", 2, 0.8), ("a", 3, 0.7)], {"a": [1, 3]})
    assert abs(g - 5.0 / 6.0) < 1e-12
    chi2, p = sgmm_py.mcnemar(10, 2)
    assert abs(chi2 - 49.0 / 12.0) < 1e-12 and math.isclose(p, 0.0433, abs_tol=5e-4)
    assert sgmm_py.auc([0.9, 0.1], [True, False]) == 1.0
    print("python smoke test passed")


if __name__ == "__main__":
    main()
