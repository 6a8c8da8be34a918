import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiometa.circuit import reference_netlist
from cardiometa.sampling import (Dataset, DatasetError, DesignError, Scaler, design_from_netlist, filter_outputs,
                                 generate_dataset, load_dataset, saltelli_design, saltelli_rows, save_dataset,
                                 sobol_sequence, split_normalize)


def test_sobol_first_points():
    # Gray-code ordering visits the same first four points in a different order
    assert np.allclose(np.sort(sobol_sequence(1, 4).ravel()), [0.0, 0.25, 0.5, 0.75])


def test_sobol_deterministic_and_in_cube():
    a = sobol_sequence(5, 64, seed=3)
    assert np.array_equal(a, sobol_sequence(5, 64, seed=3))
    assert np.all((a >= 0) & (a < 1))


@pytest.mark.parametrize("d,N,rows", [(9, 512, 10240), (10, 2048, 45056)])
def test_saltelli_sizes(d, N, rows):
    des = saltelli_design([[0.0, 1.0]] * d, N)
    assert des.rows.shape == (rows, d)
    assert saltelli_rows(d, N) == rows
    assert saltelli_rows(d, N, second_order=False) == (d + 2) * N


@given(st.integers(1, 6), st.integers(0, 50))
def test_saltelli_block_structure(d, seed):
    des = saltelli_design([[-1.0, 2.0]] * d, 8, seed=seed)
    A, B = des.block("A"), des.block("B")
    for i in range(d):
        ab = des.block(f"AB{i + 1}")
        keep = np.arange(d) != i
        assert np.array_equal(ab[:, i], B[:, i]) and np.array_equal(ab[:, keep], A[:, keep])
        ba = des.block(f"BA{i + 1}")
        assert np.array_equal(ba[:, i], A[:, i]) and np.array_equal(ba[:, keep], B[:, keep])
    phys = des.rows
    assert np.all((phys >= -1.0) & (phys <= 2.0))


def test_design_errors():
    with pytest.raises(DesignError):
        saltelli_design([], 8)
    with pytest.raises(DesignError, match="low >= high"):
        saltelli_design([[0.0, 1.0], [2.0, 2.0]], 8)
    with pytest.warns(UserWarning):
        saltelli_design([[0.0, 1.0]], 6)


@pytest.fixture(scope="module")
def small_design():
    net = reference_netlist("model2_pah")
    des = design_from_netlist(net, 1, seed=5, second_order=False)
    return net, des.rows[:8], des.names


@pytest.fixture(scope="module")
def small_dataset(small_design):
    net, rows, names = small_design
    return generate_dataset(net, (rows, names), chunk_size=4)


def test_model2_dataset(small_dataset):
    assert small_dataset.outputs.shape == (8, 10)
    assert small_dataset.failed_rows.size == 0
    assert np.all(np.isfinite(small_dataset.outputs))


def test_invalid_rows_are_reported(small_design):
    net, rows, names = small_design
    rows = rows.copy()
    rows[3, list(names).index("PVR")] = -1.0
    ds = generate_dataset(net, (rows, names), chunk_size=4, max_failure_fraction=0.5)
    assert ds.failed_rows.tolist() == [3]
    assert np.all(np.isnan(ds.outputs[3]))
    assert ds.clean().n == 7
    with pytest.raises(DatasetError):
        generate_dataset(net, (rows, names), chunk_size=4, max_failure_fraction=0.0)


def test_dataset_rerun_is_byte_identical(small_design, small_dataset, tmp_path):
    net, rows, names = small_design
    again = generate_dataset(net, (rows, names), chunk_size=4, workers=2)
    a = save_dataset(small_dataset, tmp_path / "a.csv.gz")
    b = save_dataset(again, tmp_path / "b.csv.gz")
    assert a.read_bytes() == b.read_bytes()


def test_save_load_round_trip(small_dataset, tmp_path):
    path = save_dataset(small_dataset, tmp_path / "d.csv", comment="stamp")
    assert path.read_text().startswith("# stamp\n")
    back = load_dataset(path)
    assert back.input_names == small_dataset.input_names
    assert np.array_equal(back.outputs, small_dataset.outputs)
    assert back.meta["netlist_hash"] == small_dataset.meta["netlist_hash"]


def _toy(n=100, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 3))
    Y = np.column_stack([X.sum(axis=1), X[:, 0] * 10.0])
    return Dataset(X, Y, ("a", "b", "c"), ("s", "t"))


def test_split_sizes_and_disjoint():
    sp = split_normalize(_toy(), 0.2, seed=1)
    assert sp.train.n == 80 and sp.test.n == 20
    assert not set(sp.train_index) & set(sp.test_index)
    assert np.allclose(sp.input_scaler.transform(sp.train.inputs).mean(axis=0), 0.0, atol=1e-12)


def test_split_excludes_failed_rows():
    ds = _toy()
    ds.failed_rows = np.array([0, 5])
    sp = split_normalize(ds, 0.2)
    assert sp.train.n + sp.test.n == 98
    assert 0 not in sp.train_index and 5 not in sp.test_index


@given(st.integers(0, 1000))
def test_scaler_round_trip(seed):
    X = np.random.default_rng(seed).normal(3.0, 7.0, size=(20, 4))
    sc = Scaler().fit(X)
    assert np.max(np.abs(sc.inverse_transform(sc.transform(X)) - X)) < 1e-12 * np.max(np.abs(X))


def test_constant_column_named():
    X = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    with pytest.raises(ValueError, match="P_const"):
        Scaler().fit(X, names=["x", "P_const"])


def test_filter_outputs():
    ds = _toy()
    kept = filter_outputs(ds, {"t": (0.0, 5.0)})
    assert np.all(kept.outputs[:, 1] <= 5.0)
    assert kept.n == int(np.sum(ds.outputs[:, 1] <= 5.0))
    with pytest.raises(DatasetError):
        filter_outputs(ds, {"missing": (0, 1)})
