import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiometa.analysis import compare_report, max_rel_error, mc_sobol, morris_screen, q2
from cardiometa.analysis.sobol import ishigami, ishigami_indices
from cardiometa.emulators import FFNNRegressor, PCERegressor, basis_enumerate, pce_fit, pce_sobol
from cardiometa.sampling import Dataset

PI3 = [[-np.pi, np.pi]] * 3


def test_q2_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert q2(y, y) == 1.0
    assert q2(y, np.full(3, 2.0)) == 0.0
    assert q2(y, np.array([1.0, 2.0, 4.0])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        q2(np.ones(3), y)


def test_max_rel_error_examples():
    assert max_rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert max_rel_error(np.array([10.0, 100.0]), np.array([11.0, 100.0])) == pytest.approx(0.1)
    val, flag = max_rel_error(np.array([0.0, 4.0]), np.array([1.0, 4.0]), return_flags=True)
    assert flag and val == pytest.approx(0.25)


def test_mc_sobol_single_and_additive():
    one = mc_sobol(lambda X: X[:, 0], [[0, 1], [0, 1]], N=4096)
    assert one.first_order[0, 0] == pytest.approx(1.0, abs=0.02)
    assert one.first_order[0, 1] == pytest.approx(0.0, abs=0.02)
    add = mc_sobol(lambda X: X[:, 0] + X[:, 1], [[0, 1], [0, 1]], N=4096)
    assert np.allclose(add.first_order[0], 0.5, atol=0.02)
    assert 0.95 <= add.first_order[0].sum() <= 1.05
    with pytest.raises(ValueError):
        mc_sobol(lambda X: np.zeros(len(X)), [[0, 1]], N=64)


def test_ishigami_mc_vs_analytic_and_pce():
    first, total = ishigami_indices()
    mc = mc_sobol(ishigami, PI3, N=16384, seed=1)
    assert np.max(np.abs(mc.first_order[0] - first)) < 0.02
    assert np.max(np.abs(mc.total[0] - total)) < 0.02
    X = np.random.default_rng(0).uniform(-np.pi, np.pi, size=(4096, 3))
    pce = pce_sobol(pce_fit(X, ishigami(X), basis_enumerate(3, 9), lows=[-np.pi] * 3, highs=[np.pi] * 3))
    assert np.max(np.abs(mc.first_order[0] - pce.first_order[0])) < 0.03
    assert np.max(np.abs(mc.total[0] - pce.total[0])) < 0.03


def test_sobol_bounds_and_bootstrap():
    res = mc_sobol(ishigami, PI3, N=1024, bootstrap=50)
    assert np.all(res.first_order >= -0.05) and np.all(res.total <= 1.05)
    assert np.all(res.first_order <= res.total + 0.05)
    assert res.total_ci.shape == res.total.shape and np.all(res.total_ci > 0)
    assert res.meta["evaluations"] == 5 * 1024


def test_morris_examples():
    calls = []

    def f(X):
        calls.append(len(X))
        return 3 * X[:, 0] + X[:, 1]

    res = morris_screen(f, [[0, 1]] * 3, r=10, levels=4)
    assert sum(calls) == res.evaluations == 10 * 4
    assert res.mu_star[0, 2] < 1e-10
    assert res.mu_star[0, 0] / res.mu_star[0, 1] == pytest.approx(3.0, rel=0.05)
    with pytest.raises(ValueError):
        morris_screen(f, [[0, 1]] * 3, r=3)
    with pytest.raises(ValueError):
        morris_screen(f, [[0, 1]] * 3, levels=5)


@settings(max_examples=10)
@given(st.permutations([0, 1, 2, 3]))
def test_morris_permutation_equivariance(perm):
    perm = list(perm)
    names = ["a", "b", "c", "d"]
    ranges = [[0, 1], [0, 2], [-1, 1], [1, 3]]

    def f(X):
        return X[:, 0] * X[:, 1] + np.sin(X[:, 2]) + X[:, 3] ** 2

    inv = np.argsort(perm)
    base = morris_screen(f, ranges, r=8, levels=4, seed=3, input_names=names)
    moved = morris_screen(lambda X: f(X[:, inv]), [ranges[i] for i in perm], r=8, levels=4, seed=3,
                          input_names=[names[i] for i in perm])
    assert np.allclose(moved.mu_star[0], base.mu_star[0, perm], rtol=1e-12)
    assert np.allclose(moved.sigma[0], base.sigma[0, perm], rtol=1e-12)


def _toy_dataset(n=400, m=10):
    rng = np.random.default_rng(0)
    X = rng.uniform(1, 2, size=(n, 3))
    Y = np.column_stack([X[:, 0] * (k + 1) + X[:, 1] * X[:, 2] for k in range(m)])
    return Dataset(X, Y, ("a", "b", "c"), tuple(f"y{k}" for k in range(m)))


def test_compare_report_shape_and_determinism(tmp_path):
    ds = _toy_dataset()
    ems = {"pce": PCERegressor(degree=2), "pce_again": PCERegressor(degree=2),
           "nn": FFNNRegressor(hidden=(8,), max_epochs=5, patience=2)}
    rep = compare_report(ds, ems, [20, 50, 100, 200], out_dir=tmp_path)
    assert len(rep.rows) == 3 * 4 * 10
    a = [(r.q2, r.max_rel_error) for r in rep.select("pce")]
    b = [(r.q2, r.max_rel_error) for r in rep.select("pce_again")]
    assert a == b
    assert (tmp_path / "report.csv").read_text().count("\n") == 121
    assert (tmp_path / "plot-data" / "q2__y0.csv").exists()


def test_compare_report_failures_are_rows():
    ds = _toy_dataset(m=2)
    rep = compare_report(ds, {"pce": PCERegressor(degree=2)}, [2, 100, 10_000])
    status = [r.status for r in rep.rows]
    assert status[0].startswith("failed") and status[2] == "ok" and status[4].startswith("skipped")
