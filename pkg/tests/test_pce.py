import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardiometa.emulators import (PCERegressor, PceError, basis_enumerate, basis_size, design_matrix,
                                  legendre_orthonormal, load_emulator, pce_eval, pce_fit, pce_loo_error, pce_sobol)
from cardiometa.emulators.pce import loo_relative_error


def ishigami(X, a=7.0, b=0.1):
    return np.sin(X[:, 0]) + a * np.sin(X[:, 1]) ** 2 + b * X[:, 2] ** 4 * np.sin(X[:, 0])


def ishigami_indices(a=7.0, b=0.1):
    """Closed-form variance decomposition of the Ishigami function."""
    pi4 = np.pi ** 4
    V1 = 0.5 * (1 + b * pi4 / 5) ** 2
    V2 = a ** 2 / 8
    V13 = 8 * b ** 2 * pi4 ** 2 / 225
    V = V1 + V2 + V13
    return np.array([V1, V2, 0.0]) / V, np.array([V1 + V13, V2, V13]) / V


@pytest.mark.parametrize("d,P,n", [(2, 2, 6), (1, 3, 4), (9, 2, 55)])
def test_basis_counts(d, P, n):
    assert basis_size(d, P) == n
    basis = basis_enumerate(d, P)
    assert basis.size == n
    assert np.all(basis.multi_indices.sum(axis=1) <= P)
    assert len({tuple(r) for r in basis.multi_indices}) == n


def test_basis_overflow_guard():
    with pytest.raises(PceError):
        basis_enumerate(40, 12)


def test_legendre_values():
    assert np.allclose(legendre_orthonormal(0, np.linspace(-1, 1, 5)), 1.0)
    assert legendre_orthonormal(1, 1.0) == pytest.approx(np.sqrt(3.0))


def test_orthonormal_by_quadrature():
    x, w = np.polynomial.legendre.leggauss(20)
    w = w / 2.0  # uniform density on [-1, 1]
    L = np.stack([legendre_orthonormal(k, x) for k in range(9)])
    assert np.allclose((L * w) @ L.T, np.eye(9), atol=1e-12)


def test_orthonormal_by_monte_carlo():
    rng = np.random.default_rng(0)
    U = rng.uniform(-1, 1, size=(10 ** 6, 2))
    Psi = design_matrix(basis_enumerate(2, 2), U)
    G = Psi.T @ Psi / U.shape[0]
    se = np.sqrt(np.var(Psi[:, :, None] * Psi[:, None, :], axis=0) / U.shape[0])
    assert np.all(np.abs(G - np.eye(6)) <= 3 * se + 1e-12)


def test_exact_recovery_and_pruning():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(40, 2))
    y = 2 + 3 * X[:, 0]
    model = pce_fit(X, y, basis_enumerate(2, 2), lows=[-1, -1], highs=[1, 1])
    out = model.outputs[0]
    assert out.terms.tolist() == [0, 1]
    assert out.coefficients[0] == pytest.approx(2.0, abs=1e-12)
    assert out.coefficients[1] == pytest.approx(3.0 / np.sqrt(3.0), abs=1e-12)
    Xt = rng.uniform(-1, 1, size=(100, 2))
    assert np.max(np.abs(pce_eval(model, Xt)[:, 0] - (2 + 3 * Xt[:, 0]))) < 1e-10
    assert out.loo_error < 1e-10


def test_epsilon_zero_keeps_basis():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(40, 2))
    model = pce_fit(X, 2 + 3 * X[:, 0], basis_enumerate(2, 2), epsilon=0.0)
    assert model.outputs[0].terms.size == 6


def test_too_few_rows():
    with pytest.raises(PceError, match="C\\(d\\+P, d\\) = 55"):
        pce_fit(np.zeros((30, 9)), np.zeros(30), basis_enumerate(9, 2))


def test_constant_model():
    X = np.random.default_rng(3).uniform(size=(10, 2))
    model = pce_fit(X, np.full(10, 4.5), basis_enumerate(2, 1))
    assert np.allclose(pce_eval(model, X), 4.5)


def _brute_loo(Psi, y):
    errs = []
    for i in range(len(y)):
        keep = np.arange(len(y)) != i
        c = np.linalg.lstsq(Psi[keep], y[keep], rcond=None)[0]
        errs.append(y[i] - Psi[i] @ c)
    return np.mean(np.square(errs)) / np.var(y)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_loo_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(30, 3))
    y = np.exp(X[:, 0]) + X[:, 1] * X[:, 2] + 0.1 * rng.normal(size=30)
    model = pce_fit(X, y, basis_enumerate(3, 2), epsilon=0.0, lows=-np.ones(3), highs=np.ones(3))
    Psi = design_matrix(model.basis, X)
    assert pce_loo_error(model, X, y)[0] == pytest.approx(_brute_loo(Psi, y), abs=1e-8)


def test_noise_loo_near_one():
    rng = np.random.default_rng(4)
    Psi = np.ones((200, 1))
    y = rng.normal(size=200)
    coef = np.array([y.mean()])
    assert abs(loo_relative_error(Psi, y, coef) - 1.0) < 0.2
    assert loo_relative_error(Psi, y, coef) == pytest.approx(_brute_loo(Psi, y), rel=1e-10)


def test_sobol_additive_and_product():
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, size=(200, 2))
    add = pce_sobol(pce_fit(X, X[:, 0] + X[:, 1], basis_enumerate(2, 2), lows=[-1, -1], highs=[1, 1]))
    assert np.allclose(add.first_order[0], 0.5, atol=1e-10) and np.allclose(add.total[0], 0.5, atol=1e-10)
    prod = pce_sobol(pce_fit(X, X[:, 0] * X[:, 1], basis_enumerate(2, 2), lows=[-1, -1], highs=[1, 1]))
    assert np.allclose(prod.first_order[0], 0.0, atol=1e-10) and np.allclose(prod.total[0], 1.0, atol=1e-10)
    with pytest.raises(PceError):
        pce_sobol(pce_fit(X, np.ones(200), basis_enumerate(2, 1)))


def test_ishigami_indices():
    rng = np.random.default_rng(6)
    X = rng.uniform(-np.pi, np.pi, size=(4096, 3))
    model = pce_fit(X, ishigami(X), basis_enumerate(3, 9), lows=[-np.pi] * 3, highs=[np.pi] * 3)
    s = pce_sobol(model)
    first, total = ishigami_indices()
    assert np.max(np.abs(s.first_order[0] - first)) < 0.02
    assert np.max(np.abs(s.total[0] - total)) < 0.02


def test_regressor_degree_reduction_and_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    X = rng.uniform(0, 2, size=(38, 9))
    Y = np.column_stack([X.sum(axis=1), X[:, 0] ** 2])
    est = PCERegressor(degree=3).fit(X, Y)
    assert est.degree_ == 1
    back = load_emulator(est.save(tmp_path / "p.json"))
    assert np.array_equal(back.predict(X), est.predict(X))
    with pytest.raises(PceError, match="C\\(d\\+P, d\\)"):
        PCERegressor(degree=2).fit(X[:9], Y[:9])
