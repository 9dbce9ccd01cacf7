"""Data-generating model, train/test splitting, and serialization."""

import json

import numpy as np
import pytest

from ridgeiv import ModelSpec, benchmark_spec, generate_dataset, split
from ridgeiv.model import (
    Dataset,
    load_dataset_csv,
    load_model_spec,
    save_dataset_csv,
    save_model_spec,
    train_rows,
)

PRIOR = np.array([2**-0.5, 2**-0.5])

ERR_COV = np.array([[1.0, 0.7, 0.7], [0.7, 1.0, 0.0], [0.7, 0.0, 1.0]])


def test_train_rows_floor():
    assert train_rows(0.7, 10) == 7  # 0.7 * 10 is 6.999... in floats; still 7
    assert train_rows(0.7, 25) == 17
    assert train_rows(0.7, 4) == 2
    assert train_rows(0.5, 9) == 4
    assert train_rows(0.31, 100) == 31


def test_generate_shapes_and_split_at():
    spec = benchmark_spec(1.0, 4, PRIOR)
    data = generate_dataset(spec, 0)
    assert data.y.shape == (4,)
    assert data.x.shape == (4, 2)
    assert data.z.shape == (4, 3)
    assert data.split_at == 2


def test_split_row_counts():
    data = generate_dataset(benchmark_spec(1.0, 10, PRIOR), 1)
    train, test = split(data)
    assert (train.n, test.n) == (7, 3)
    assert benchmark_spec(1.0, 25, PRIOR).split_at == 17


def test_split_views_and_partition_round_trip():
    data = generate_dataset(benchmark_spec(0.5, 30, PRIOR), 3)
    train, test = split(data)
    # views, not copies
    assert np.shares_memory(train.x, data.x) and np.shares_memory(test.z, data.z)
    assert np.array_equal(np.concatenate([train.y, test.y]), data.y)
    assert np.array_equal(np.vstack([train.x, test.x]), data.x)
    assert np.array_equal(np.vstack([train.z, test.z]), data.z)


def test_same_seed_bit_identical():
    spec = benchmark_spec(0.25, 50, PRIOR)
    a = generate_dataset(spec, 12345)
    b = generate_dataset(spec, 12345)
    assert a.y.tobytes() == b.y.tobytes()
    assert a.x.tobytes() == b.x.tobytes()
    assert a.z.tobytes() == b.z.tobytes()
    c = generate_dataset(spec, np.random.SeedSequence(12345))
    assert a.y.tobytes() == c.y.tobytes() and a.z.tobytes() == c.z.tobytes()
    assert not np.array_equal(a.y, generate_dataset(spec, 12346).y)


def test_noise_free_dataset_is_exact():
    gamma0 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    beta0 = np.array([0.4, -1.1])
    spec = ModelSpec(
        n=40, k=2, m=3, beta0=beta0, gamma0=gamma0, prior=PRIOR,
        tau=0.7, err_cov=np.zeros((3, 3)), rz=np.eye(3),
    )
    data = generate_dataset(spec, 9)
    assert np.array_equal(data.x, data.z @ gamma0)
    assert np.array_equal(data.y, data.x @ beta0)


def test_large_sample_moments():
    # one big draw checks the error covariance wiring and E[z z'] together
    spec = benchmark_spec(1.0, 1_000_000, PRIOR)
    data = generate_dataset(spec, 2024)
    u = data.x - data.z @ spec.gamma0
    eps = data.y - data.x @ spec.beta0
    errs = np.column_stack([eps, u])
    emp = errs.T @ errs / data.n
    assert np.max(np.abs(emp - ERR_COV)) < 0.01
    zz = data.z.T @ data.z / data.n
    assert np.max(np.abs(zz - np.eye(3))) < 0.01
    # endogeneity: corr(u_j, eps) = 0.7 by construction
    corr = np.corrcoef(errs.T)
    assert abs(corr[0, 1] - 0.7) < 0.02 and abs(corr[0, 2] - 0.7) < 0.02


@pytest.mark.parametrize(
    "patch",
    [
        dict(k=3, m=3, beta0=np.zeros(3), prior=np.zeros(3),
             gamma0=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])),
        dict(tau=0.0),
        dict(tau=1.0),
        dict(gamma0=np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])),  # rank 1
        dict(err_cov=np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])),  # indefinite
        dict(err_cov=np.array([[1.0, 0.1, 0.0], [0.2, 1.0, 0.0], [0.0, 0.0, 1.0]])),  # asymmetric
        dict(rz=np.zeros((3, 3))),
        dict(tau=0.05, n=10),  # floor(0.5) = 0 training rows
        dict(tau=1.0 - 1e-13, n=10),  # floor rounds up to n: empty test sample
    ],
)
def test_spec_validation_rejects(patch):
    base = dict(
        n=10, k=2, m=3, beta0=np.zeros(2),
        gamma0=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]),
        prior=PRIOR, tau=0.7, err_cov=ERR_COV, rz=np.eye(3),
    )
    # gamma0 rank check needs square k=m handled too, so patch wholesale
    base.update(patch)
    with pytest.raises(ValueError):
        ModelSpec(**base)


def test_dataset_validation():
    y = np.zeros(5)
    x = np.zeros((5, 2))
    z = np.zeros((5, 3))
    with pytest.raises(ValueError):
        Dataset(y=y, x=x, z=z, split_at=6)
    with pytest.raises(ValueError):
        Dataset(y=y, x=x, z=z, split_at=-1)
    with pytest.raises(ValueError):
        Dataset(y=y, x=np.zeros((4, 2)), z=z, split_at=2)


def test_dataset_csv_round_trip(tmp_path):
    data = generate_dataset(benchmark_spec(0.5, 23, PRIOR), 7)
    path = tmp_path / "sample.csv"
    save_dataset_csv(data, path)
    header = path.read_text().splitlines()[0]
    assert header == "y,x1,x2,z1,z2,z3"

    back = load_dataset_csv(path, tau=0.7)
    assert back.split_at == data.split_at
    # decimal text must round-trip the exact doubles
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.x, data.x)
    assert np.array_equal(back.z, data.z)

    explicit = load_dataset_csv(path, split_at=5)
    assert explicit.split_at == 5

    with pytest.raises(ValueError):
        load_dataset_csv(path)
    with pytest.raises(ValueError):
        load_dataset_csv(path, tau=0.7, split_at=5)


def test_dataset_csv_header_validation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,x1,w1,z1\n1,2,3,4\n")
    with pytest.raises(ValueError):
        load_dataset_csv(bad, tau=0.5)


def test_model_spec_json_round_trip(tmp_path):
    spec = benchmark_spec(0.25, 60, PRIOR, tau=0.6)
    path = tmp_path / "spec.json"
    save_model_spec(spec, path)
    back = load_model_spec(path)
    assert back.n == spec.n and back.tau == spec.tau
    assert np.array_equal(back.gamma0, spec.gamma0)
    assert np.array_equal(back.err_cov, spec.err_cov)
    assert np.array_equal(back.prior, spec.prior)


def _specs_equal(a, b):
    return a.to_dict() == b.to_dict()


def test_model_spec_shorthand_json(tmp_path):
    path = tmp_path / "design.json"
    path.write_text(json.dumps({"delta": 0.5, "n": 80, "prior": list(PRIOR), "tau": 0.7}))
    assert _specs_equal(load_model_spec(path), benchmark_spec(0.5, 80, PRIOR))


def test_model_spec_shorthand_toml(tmp_path):
    path = tmp_path / "design.toml"
    path.write_text('delta = 1.0\nn = 40\nprior = [0.5, -0.25]\ntau = 0.7\n')
    assert _specs_equal(load_model_spec(path), benchmark_spec(1.0, 40, np.array([0.5, -0.25])))
