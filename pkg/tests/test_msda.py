import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from domain_embed.data import CorpusData, UnlabeledImages
from domain_embed.exceptions import ConfigurationError, LabelAccessError, PreconditionError
from domain_embed.msda import (
    MSDAConfig,
    SourceWeights,
    TransferTask,
    adapt,
    distance_to_weights,
    grad_reverse,
    moment_distance,
    run_msda,
    uniform_weights,
)


def test_weight_examples():
    assert np.array_equal(distance_to_weights([0.7, 0.7, 0.7]).weights, np.full(3, 1 / 3))
    w = distance_to_weights([0.0, math.log(2) * 0.5], tau=0.5).weights
    assert np.allclose(w, [2 / 3, 1 / 3], atol=1e-9)
    d = np.array([0.4, 0.9, 1.3])
    assert distance_to_weights(d, tau=(0.9 - 0.4) / 20).weights[0] > 0.99
    assert distance_to_weights([2.5]).weights.tolist() == [1.0]


def test_weight_errors():
    with pytest.raises(PreconditionError):
        distance_to_weights([-1.0, 1.0])
    with pytest.raises(PreconditionError):
        distance_to_weights([1.0], tau=0)
    with pytest.raises(PreconditionError):
        distance_to_weights([])
    with pytest.raises(PreconditionError):
        SourceWeights([0.5, 0.6], 1.0)


@given(st.lists(st.floats(0, 20), min_size=1, max_size=8), st.floats(0.05, 10))
def test_weights_simplex_and_monotone(d, tau):
    w = distance_to_weights(d, tau).weights
    assert abs(w.sum() - 1) < 1e-9 and np.all(w >= 0)
    # ties in float resolution are allowed, never an inversion
    assert w[np.argmin(d)] == w.max()


def test_task_invariants(tmp_path):
    with pytest.raises(PreconditionError):
        TransferTask((1, 2), 2)
    with pytest.raises(PreconditionError):
        TransferTask((), 0)
    (tmp_path / "t.json").write_text('{"source_domain_ids": [0, 1], "target_domain_id": 3}')
    assert TransferTask.load(tmp_path / "t.json") == TransferTask((0, 1), 3)


def test_grad_reverse_and_moments():
    x = torch.randn(4, 3, requires_grad=True)
    grad_reverse(x).sum().backward()
    assert torch.equal(x.grad, -torch.ones(4, 3))
    a = torch.randn(6, 5)
    assert float(moment_distance(a, a)) == 0.0
    assert float(moment_distance(a, a + 1.0)) == pytest.approx(1.0)


def toy_data(rng, n=12, domains=3, classes=3):
    arrays = {}
    for i in range(domains):
        X = rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8)
        X[..., i % 3] //= 2
        arrays[i] = (X, rng.integers(0, classes, n))
    return CorpusData.from_arrays(arrays, eval_fraction=0.25, seed=0)


CFG = MSDAConfig(epochs=1, batch_size=4, steps_per_epoch=2, seed=5)


@pytest.mark.parametrize("variant", ["alpha", "beta"])
def test_equal_distances_bit_identical_to_uniform(rng, variant):
    data = toy_data(rng)
    task = TransferTask((0, 1), 2)
    weighted = run_msda(data, task, variant, CFG, distance_to_weights([0.3, 0.3]))
    uniform = run_msda(data, task, f"uniform-{variant}", CFG)
    assert weighted["accuracy"] == uniform["accuracy"]
    mode = "moment" if variant == "alpha" else "adversarial"
    net_w, log_w = adapt(data, task, distance_to_weights([0.3, 0.3]), mode, CFG)
    net_u, log_u = adapt(data, task, uniform_weights(2), mode, CFG)
    assert log_w == log_u
    for a, b in zip(net_w.state_dict().values(), net_u.state_dict().values()):
        assert torch.equal(a, b)


class RefusingLabels:
    def __getattr__(self, name):
        raise LabelAccessError("target labels touched")

    def __getitem__(self, item):
        raise LabelAccessError("target labels touched")

    def __len__(self):
        raise LabelAccessError("target labels touched")


@pytest.mark.parametrize("variant", ["source-only", "uniform-alpha", "uniform-beta"])
def test_target_labels_never_read(rng, variant):
    data = toy_data(rng)
    data.train[2] = (data.train[2][0], RefusingLabels())
    row = run_msda(data, TransferTask((0, 1), 2), variant, CFG)
    assert 0.0 <= row["accuracy"] <= 1.0
    assert row["weights"] == [0.5, 0.5]


def test_unlabeled_view_refuses_labels(rng):
    data = toy_data(rng)
    view = data.unlabeled(1)
    assert isinstance(view, UnlabeledImages) and len(view) == len(data.train[1][0])
    with pytest.raises(LabelAccessError):
        view.labels


def test_single_example_source_skips_moment_term(rng):
    data = toy_data(rng)
    data.train[1] = (data.train[1][0][:1], data.train[1][1][:1])
    _, log = adapt(data, TransferTask((0, 1), 2), uniform_weights(2), "moment", CFG)
    assert all(row["align"][1] is None and row["align"][0] is not None for row in log)


def test_single_source_reduces_to_plain_adaptation(rng):
    data = toy_data(rng)
    row = run_msda(data, TransferTask((0,), 2), "beta", CFG, distance_to_weights([0.8]))
    assert row["weights"] == [1.0]


def test_pairwise_sources_flag(rng):
    data = toy_data(rng)
    cfg = MSDAConfig(epochs=1, batch_size=4, steps_per_epoch=1, pairwise_sources=True)
    _, log = adapt(data, TransferTask((0, 1), 2), uniform_weights(2), "moment", cfg)
    assert len(log) == 1


def test_run_msda_errors(rng):
    data = toy_data(rng)
    task = TransferTask((0, 1), 2)
    with pytest.raises(ConfigurationError):
        run_msda(data, task, "gamma", CFG)
    with pytest.raises(PreconditionError):
        run_msda(data, task, "beta", CFG)
    with pytest.raises(PreconditionError):
        adapt(data, task, uniform_weights(3), "moment", CFG)


def test_checkpoint_written(tmp_path, rng):
    from domain_embed.model import load_checkpoint
    from domain_embed.msda import ClassifierNet

    data = toy_data(rng)
    run_msda(data, TransferTask((0, 1), 2), "uniform-alpha", CFG, checkpoint_path=tmp_path / "m.pt")
    net, extra = load_checkpoint(tmp_path / "m.pt", ClassifierNet)
    assert extra["variant"] == "uniform-alpha" and extra["log"]
