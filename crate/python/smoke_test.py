"""Smoke test for the hdrisk_py extension. Run with pytest or as a script."""

import math
import tempfile
from pathlib import Path

import hdrisk_py as h


def test_family_prox():
    f = h.Family("pseudo_huber:mu=1")
    p = f.prox(10.0, 1.0)
    assert abs(p - 9.00610804772) < 1e-9
    assert abs(10.0 - p - f.d1(p)) < 1e-10
    psi, dpsi = f.psi(10.0, 1.0)
    assert abs(psi + p - 10.0) < 1e-12
    assert 0.0 < dpsi < 1.0


def test_ridge_alo_matches_loocv():
    data, beta_star = h.generate(60, 30, seed=1)
    assert (data.n, data.p, len(beta_star)) == (60, 30, 30)
    m = h.Model("squared", "ridge", 1.0)
    lo = h.loocv_risk(m, data)
    assert abs(h.alo_risk(m, data) - lo) <= 1e-9 * (1 + lo)
    report = h.risk_report(m, data)
    assert abs(report["lo"] - lo) < 1e-12
    assert set(report) >= {"alo", "amp", "kfold2", "kfold3", "kfold5"}


def test_calibration_closed_form():
    tau, theta = h.calibrate([1.0] * 200, [1.0] * 100, 1.0, 2.0)
    tau_star = (1 + math.sqrt(17)) / 4
    assert abs(tau - tau_star) < 1e-10
    assert abs(theta - tau_star / (2 * (1 + tau_star))) < 1e-10


def test_amp_reaches_estimator():
    data, _ = h.generate(80, 40, seed=2)
    m = h.Model("pseudo_huber:mu=1", "ridge", 1.0)
    fit = m.fit(data)
    run = h.amp_run(m, data)
    gap = max(abs(a - b) for a, b in zip(run["beta"], fit.beta_hat))
    assert gap < 1e-6
    assert run["fixed_point_residual"] < 1e-6


def test_dataset_roundtrip_and_spectrum():
    data, _ = h.generate(50, 20, seed=3)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "data.csv"
        data.write_csv(path)
        back = h.Dataset.load_csv(path)
    assert back.y == data.y
    smin, smax, bound = h.spectrum_check(data.x)
    assert 0 < smin <= smax


def test_errors():
    for bad in [lambda: h.Family("cauchy"), lambda: h.Model("squared", "ridge", -1.0)]:
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")


def test_experiment_writes_files():
    with tempfile.TemporaryDirectory() as d:
        paths = h.run_experiment("figure1", d, [("n", "40"), ("p", "20"), ("reps", "2"), ("lambda_grid", "1")])
        assert len(paths) == 3 and all(Path(p).exists() for p in paths)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name} ok")
