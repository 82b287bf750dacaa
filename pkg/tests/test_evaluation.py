import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from domain_embed import evaluation as E
from domain_embed.data import CorpusData
from domain_embed.exceptions import ConfigurationError, NumericError, PreconditionError, UndefinedCorrelationError
from domain_embed.training import TrainConfig

from .oracles import pcc_loop


def test_pcc_examples(rng):
    x = rng.standard_normal(50)
    assert E.pearson_cc(x, x) == 1.0
    assert E.pearson_cc(x, -x) == -1.0
    y = rng.standard_normal(50)
    assert abs(E.pearson_cc(x, y) - pcc_loop(list(x), list(y))) < 1e-12


def test_pcc_permutation_null():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(1000)
    assert abs(E.pearson_cc(x, rng.permutation(x))) < 0.1


@given(arrays(np.float64, 12, elements=st.floats(-100, 100)), arrays(np.float64, 12, elements=st.floats(-100, 100)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_pcc_affine_invariance(x, y, a, b):
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    assert abs(E.pearson_cc(a * x + b, y) - E.pearson_cc(x, y)) < 1e-9
    assert abs(E.pearson_cc(x, a * y + b) - E.pearson_cc(x, y)) < 1e-9


def test_pcc_errors():
    with pytest.raises(UndefinedCorrelationError):
        E.pearson_cc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(PreconditionError):
        E.pearson_cc([1.0], [2.0])
    with pytest.raises(PreconditionError):
        E.pearson_cc([1.0, 2.0], [1.0, 2.0, 3.0])


def test_off_diagonal_pairs_and_gap():
    A = np.array([[0.9, 0.2, np.nan], [0.3, 0.8, 0.1], [0.4, 0.5, 0.7]])
    D = np.arange(9.0).reshape(3, 3)
    acc, dist = E.off_diagonal_pairs(A, D)
    assert acc.tolist() == [0.2, 0.3, 0.1, 0.4, 0.5]
    assert dist.tolist() == [1, 3, 5, 6, 7]
    assert E.diagonal_gap(A) == pytest.approx(0.8 - 0.3)


def small_data(rng, domains=3, n=20):
    arrays = {}
    for i in range(domains):
        X = rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8)
        X[..., i % 3] = 0
        arrays[i] = (X, rng.integers(0, 3, n))
    return CorpusData.from_arrays(arrays, eval_fraction=0.25, seed=0, names={i: f"d{i}" for i in range(domains)})


FAST = E.ClassifierConfig(epochs=1, batch_size=8)


def test_matrix_needs_two_domains(rng):
    with pytest.raises(PreconditionError):
        E.cross_domain_matrix(small_data(rng, 1), FAST)


def test_matrix_uses_held_out_split(rng, monkeypatch):
    data = small_data(rng)
    seen = []
    original = data.labeled

    def spy(i, split="train"):
        seen.append((i, split))
        return original(i, split)

    monkeypatch.setattr(data, "labeled", spy)
    A = E.cross_domain_matrix(data, FAST)
    assert A.shape == (3, 3) and np.all((A >= 0) & (A <= 1))
    assert {s for _, s in seen} == {"train", "eval"}
    evaluated = [i for i, s in seen if s == "eval"]
    assert evaluated == [0, 1, 2] * 3


def test_failed_cell_is_nan(rng, monkeypatch):
    data = small_data(rng)
    real = E.train_classifier

    def flaky(data, ids, config, seed=0):
        if ids == [1]:
            raise NumericError("classifier loss", float("nan"))
        return real(data, ids, config, seed)

    monkeypatch.setattr(E, "train_classifier", flaky)
    A = E.cross_domain_matrix(data, FAST)
    assert np.isnan(A[1]).all()
    assert np.isfinite(A[[0, 2]]).all()


def test_transfer_report_validation():
    ok = np.eye(2)
    E.TransferReport("full", 0, [0, 1], ok, ok, -0.5)
    with pytest.raises(ConfigurationError):
        E.TransferReport("other", 0, [0, 1], ok, ok, 0.0)
    with pytest.raises(PreconditionError):
        E.TransferReport("full", 0, [0, 1], ok * 2, ok, 0.0)
    with pytest.raises(PreconditionError):
        E.TransferReport("full", 0, [0, 1, 2], ok, ok, 0.0)


def test_experiment_config_roundtrip(tmp_path):
    cfg = E.ExperimentConfig(seeds=[3], train={"epochs": 2, "weights": {"w4": 0.5}})
    path = tmp_path / "e.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert E.ExperimentConfig.load(path) == cfg
    with pytest.raises(ConfigurationError):
        E.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        E.ExperimentConfig(metric="manhattan")
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        E.ExperimentConfig.load(path)


def test_no_mi_tag_zeroes_mine_weight():
    train = TrainConfig()
    assert E.training_config_for("no-mi", train).weights.w4 == 0.0
    assert E.training_config_for("no-gram", train) is train


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory):
    rng = np.random.default_rng(3)
    data = small_data(rng, domains=3, n=24)
    cfg = E.ExperimentConfig(name="tiny", seeds=(0,), train=TrainConfig(epochs=1, batch_size=8),
                             classifier=FAST, knn_k=2)
    out = tmp_path_factory.mktemp("exp")
    reports = E.run_experiment(cfg, data, out, tags=("full", "no-gram", "no-mi"))
    return out, reports


def test_run_experiment_layout(experiment_dir):
    out, reports = experiment_dir
    assert [r.tag for r in reports] == ["full", "no-gram", "no-mi"]
    assert np.array_equal(reports[0].accuracy, reports[1].accuracy)
    for tag in ("full", "no-gram", "no-mi"):
        run = out / "tiny" / tag / "0"
        for name in ("accuracy.csv", "distances.csv", "report.json", "config.json", "embeddings.csv",
                     "graph.json", "graph.dot"):
            assert (run / name).exists(), name
    back = E.load_run(out / "tiny" / "full" / "0")
    assert back.pcc == reports[0].pcc
    assert np.array_equal(back.accuracy, reports[0].accuracy)
    assert np.array_equal(back.distances, reports[0].distances)


def test_report_is_pure(experiment_dir, tmp_path):
    out, _ = experiment_dir
    first = E.report(out, tmp_path / "a.md")
    png = (out / "tiny" / "full" / "0" / "accuracy_vs_distance.png").read_bytes()
    second = E.report(out, tmp_path / "b.md")
    assert first == second
    assert png == (out / "tiny" / "full" / "0" / "accuracy_vs_distance.png").read_bytes()
    assert "| tiny/full/0 | full | 0 |" in first
    with pytest.raises(PreconditionError):
        E.report(tmp_path / "empty")
