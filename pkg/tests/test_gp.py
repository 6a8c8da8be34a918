import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiometa.emulators import GPRegressor, load_emulator, log_marginal_likelihood, rbf_kernel
from cardiometa.emulators.gp import GpHyper, gp_fit_column, gp_predict_column, sq_dist


def test_kernel_examples():
    x = np.array([0.3, -1.2])
    assert rbf_kernel(x, x, 2.5, 0.7) == pytest.approx(2.5)
    l = 0.8
    x2 = x + np.array([l * np.sqrt(2.0), 0.0])
    assert rbf_kernel(x, x2, 1.0, l) == pytest.approx(np.exp(-1.0))


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_kernel_symmetry(a, b):
    assert rbf_kernel(a, b, 1.3, 0.9) == rbf_kernel(b, a, 1.3, 0.9)


def _problem(n=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, 2))
    y = np.sin(X[:, 0]) + 0.5 * X[:, 1]
    return X, y


def test_dense_inverse_oracle():
    X, y = _problem()
    h = GpHyper(0.9, 1.4, 1e-3)
    K = np.array([[rbf_kernel(a, b, h.signal_var, h.length) for b in X] for a in X]) + h.noise * np.eye(10)
    Kinv = np.linalg.inv(K)
    _, logdet = np.linalg.slogdet(K)
    lml = -0.5 * y @ Kinv @ y - 0.5 * logdet - 5 * np.log(2 * np.pi)
    assert log_marginal_likelihood(sq_dist(X, X), y, h.length, h.signal_var, h.noise) == pytest.approx(lml, abs=1e-8)
    Xs = np.random.default_rng(1).uniform(-2, 2, size=(5, 2))
    ks = np.array([[rbf_kernel(a, b, h.signal_var, h.length) for b in X] for a in Xs])
    mu = ks @ Kinv @ y
    var = h.signal_var - np.einsum("ij,jk,ik->i", ks, Kinv, ks)
    m, v = gp_predict_column(X, gp_fit_column(X, y, h), Xs)
    assert np.max(np.abs(m - mu)) < 1e-8
    assert np.max(np.abs(v - var)) < 1e-8


def test_interpolation_limit():
    X, y = _problem()
    out = gp_fit_column(X, y, GpHyper(1.0, 1.0, 1e-10))
    m, _ = gp_predict_column(X, out, X)
    assert np.max(np.abs(m - y)) < 1e-4


def test_far_field_variance():
    X, y = _problem()
    out = gp_fit_column(X, y, GpHyper(0.5, 2.0, 1e-6))
    _, v = gp_predict_column(X, out, np.array([[100.0, 100.0]]))
    assert v[0] == pytest.approx(2.0, rel=0.01)


def test_sine_fit_with_search():
    x = np.linspace(0, 2 * np.pi, 20)[:, None]
    gp = GPRegressor().fit(x, np.sin(x[:, 0]))
    xt = np.random.default_rng(2).uniform(0, 2 * np.pi, size=(50, 1))
    rmse = np.sqrt(np.mean((gp.predict(xt) - np.sin(xt[:, 0])) ** 2))
    assert rmse < 0.02


def test_duplicate_points_fit():
    X = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    out = gp_fit_column(X, np.array([1.0, 1.0, 2.0]), GpHyper(1.0, 1.0, 0.0))
    assert np.all(np.isfinite(out.alpha))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_adding_a_point_never_increases_variance(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 5, size=(6, 1))
    y = np.cos(X[:, 0])
    h = GpHyper(0.7, 1.0, 1e-4)
    xs = np.linspace(-1, 6, 40)[:, None]
    _, v1 = gp_predict_column(X, gp_fit_column(X, y, h), xs)
    X2 = np.vstack([X, rng.uniform(0, 5, size=(1, 1))])
    _, v2 = gp_predict_column(X2, gp_fit_column(X2, np.cos(X2[:, 0]), h), xs)
    assert np.all(v2 <= v1 + 1e-8)
    assert np.all(v1 >= 0) and np.all(v1 <= h.signal_var + h.noise + 1e-8)


def test_permutation_invariance_and_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(30, 3))
    Y = np.column_stack([X[:, 0] + X[:, 1] ** 2, np.exp(X[:, 2])])
    kw = dict(length_scale=1.0, signal_variance=1.0, noise_variance=1e-6)
    gp = GPRegressor(**kw).fit(X, Y)
    perm = [2, 0, 1]
    gp_p = GPRegressor(**kw).fit(X[:, perm], Y)
    Xs = rng.uniform(size=(10, 3))
    assert np.allclose(gp.predict(Xs), gp_p.predict(Xs[:, perm]), atol=1e-10)
    mean, std = gp.predict(Xs, return_std=True)
    assert std.shape == mean.shape and np.all(std >= 0)
    back = load_emulator(gp.save(tmp_path / "g.json"))
    assert np.allclose(back.predict(Xs), gp.predict(Xs), rtol=1e-12)


def test_large_n_warns():
    X = np.random.default_rng(4).uniform(size=(4001, 1))
    with pytest.warns(RuntimeWarning, match="n\\^3"):
        GPRegressor(length_scale=0.5, signal_variance=1.0, noise_variance=1e-2).fit(X, X[:, 0])
