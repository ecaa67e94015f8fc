import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from otfseg.baselines import (
    TentConfig,
    direct_test,
    entropy_loss,
    mean_entropy,
    prediction_probs,
    tent_adapt,
)
from otfseg.exceptions import ContractError, ValidationError
from otfseg.training import TrainConfig, train_plain

from conftest import tiny_samples


def test_entropy_hand_values():
    half = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    assert entropy_loss(half).item() == pytest.approx(math.log(2), abs=1e-12)
    certain = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    assert entropy_loss(certain).item() == 0.0
    uniform4 = torch.full((1, 4, 3, 3), 0.25, dtype=torch.float64)
    assert entropy_loss(uniform4).item() == pytest.approx(math.log(4), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=3, max_size=3))
def test_uniform_is_entropy_maximum(w):
    p = torch.tensor(w, dtype=torch.float64)
    p = (p / p.sum()).reshape(1, 3, 1, 1)
    assert entropy_loss(p).item() <= math.log(3) + 1e-12


def test_entropy_rejects_non_probabilities():
    with pytest.raises(ValidationError):
        entropy_loss(torch.full((1, 1, 2, 2), 1.5))


def test_prediction_probs_binary_and_multiclass():
    lg = torch.randn(2, 2, 4, 4)
    assert prediction_probs(lg).shape == (2, 1, 4, 4)
    lg3 = torch.randn(2, 3, 4, 4)
    assert torch.allclose(prediction_probs(lg3).sum(1), torch.ones(2, 4, 4))


@pytest.fixture(scope="module")
def trained_plain():
    from otfseg.model import ArchConfig, build_model

    x, y = tiny_samples(16, seed=2)
    m = build_model(ArchConfig(2, 1, 2, 4, "bn"), seed=0)
    return train_plain(m, (x, y), TrainConfig(lr_max=3e-3, lr_min=1e-4, epochs=4, batch_size=8))


def _shifted(test_set):
    from otfseg.inference import TestInstance

    return [TestInstance(np.clip(t.image ** 2.5 * 0.6, 0, 1).astype(np.float32), t.instance_id, t.ground_truth)
            for t in test_set]


def test_only_bn_affine_parameters_change(trained_plain, tiny_test_set):
    adapted, rep = tent_adapt(trained_plain, _shifted(tiny_test_set), TentConfig(shots=1, lr=1e-2))
    assert rep.metadata["method"] == "tent-1shot"
    changed = {k for k in trained_plain.weights if not np.array_equal(trained_plain.weights[k], adapted.weights[k])}
    assert changed
    assert all(k.endswith((".gamma", ".beta")) and ".norm" in k for k in changed)


def test_zero_lr_equals_batch_stats_direct(trained_plain, tiny_test_set):
    tgt = _shifted(tiny_test_set)
    adapted, rep = tent_adapt(trained_plain, tgt, TentConfig(shots=2, lr=0.0))
    assert all(np.array_equal(adapted.weights[k], v) for k, v in trained_plain.weights.items())
    direct = direct_test(trained_plain, tgt, stats_mode="batch")
    assert rep.per_instance == direct.per_instance


def test_entropy_decreases(trained_plain, tiny_test_set):
    tgt = _shifted(tiny_test_set)
    adapted, _ = tent_adapt(trained_plain, tgt, TentConfig(shots=1, lr=1e-3))
    assert mean_entropy(adapted, tgt) < mean_entropy(trained_plain, tgt)


def test_input_checkpoint_not_modified(trained_plain, tiny_test_set):
    fp = trained_plain.fingerprint
    tent_adapt(trained_plain, tiny_test_set, TentConfig(shots=1))
    assert trained_plain.fingerprint == fp


def test_contracts(tiny_adaptive, trained_plain, tiny_test_set):
    with pytest.raises(ContractError):
        direct_test(tiny_adaptive, tiny_test_set)
    with pytest.raises(ContractError):
        tent_adapt(tiny_adaptive, tiny_test_set, TentConfig())
    with pytest.raises(ValidationError):
        direct_test(trained_plain, [])
    with pytest.raises(ValidationError):
        TentConfig(shots=0)


def test_direct_running_stats_are_order_free(trained_plain, tiny_test_set):
    a = direct_test(trained_plain, tiny_test_set)
    b = direct_test(trained_plain, tiny_test_set[::-1])
    assert a.per_instance == b.per_instance
    assert a.metadata["method"] == "direct"
