"""Smoke test for the bronco_py extension.

Build first, then run from this directory:

    cargo build --release -p bronco-py
    cp ../../../target/release/libbronco_py.so bronco_py.so
    python3 smoke_test.py

or install with `pip install --no-build-isolation .` (maturin).
"""

import json
import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import bronco_py as b


def check_gmm():
    rng = random.Random(3)
    values = [rng.gauss(mu, 30.0) for mu in (-950.0, -700.0, -100.0) for _ in range(5000)]
    m = b.fit_gmm_1d(values, k=3, seed=1)
    for got, want in zip(m.means, (-950.0, -700.0, -100.0)):
        assert abs(got - want) < 10.0, (m.means, want)
    assert abs(sum(m.weights) - 1.0) < 1e-9


def check_regression():
    pairs = [(x, 0.1 * x + 5.0 + (-1.0) ** i) for i, x in enumerate(range(1000, 6000, 500))]
    r = b.fit_regression(pairs)
    assert abs(r.slope - 0.1) < 1e-3
    est, lo, hi = r.predict_interval(3000.0)
    assert lo < est < hi
    assert r.verdict(3000.0, est) == "ok"
    assert r.verdict(3000.0, est + 50.0) == "suspected_oversegmentation"
    back = b.RegressionModel.from_json(r.to_json())
    assert back.slope == r.slope


def check_masks():
    assert b.main_axis([0.1, 0.2, -0.9]) == "axial"
    assert b.main_axis([0.7, 0.1, 0.2]) == "sagittal"
    n = 16
    vals = [abs(x - 8) <= 2 and abs(y - 8) <= 2 and 2 <= z <= 13 for z in range(n) for y in range(n) for x in range(n)]
    m = b.Mask([n, n, n], vals)
    assert m.count() == 5 * 5 * 12
    assert m.components() == 1
    assert m.erode(1).count() < m.count() < m.dilate(1).count()
    g = json.loads(m.skeleton_graph())
    assert len(g["edges"]) == 1, g


def check_pipeline():
    ct, lung, airway = b.chest_phantom(dims=96, scale=1.0, seed=2)
    assert ct.dims == [96, 96, 96]
    assert lung.volume_ml() > 0 and airway.count() > 0
    with tempfile.TemporaryDirectory() as d:
        ct.save(os.path.join(d, "ct.nii.gz"))
        lung.save(os.path.join(d, "lung.nii.gz"))
        cfg = {
            "input": os.path.join(d, "ct.nii.gz"),
            "lung_mask": os.path.join(d, "lung.nii.gz"),
            "out_dir": os.path.join(d, "out"),
        }
        code, report = b.run_pipeline(json.dumps(cfg))
        report = json.loads(report)
        assert code == 0
        assert [s["stage"] for s in report["stages"]][-1] == "qa"
        assert report["volumes"]["bundle_ml"] > 0
        back = b.Volume.load(os.path.join(d, "ct.nii.gz"))
        assert back.dims == ct.dims
        assert math.isclose(back.get(10, 20, 30), ct.get(10, 20, 30), abs_tol=0.5)


if __name__ == "__main__":
    for f in (check_gmm, check_regression, check_masks, check_pipeline):
        f()
        print(f"{f.__name__}: ok")
