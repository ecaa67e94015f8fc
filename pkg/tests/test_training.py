import numpy as np
import pytest
import torch

from otfseg.exceptions import ContractError
from otfseg.losses import combined_loss
from otfseg.model import to_module
from otfseg.training import TrainConfig, as_arrays, train_plain, train_source, write_loss_csv

from conftest import tiny_samples


def _data(n=8):
    return tiny_samples(n, seed=1)


def test_zero_lr_leaves_weights_unchanged(tiny_adaptive, tiny_dpg):
    cfg = TrainConfig(lr_max=0.0, lr_min=0.0, epochs=1, batch_size=4)
    out = train_source(tiny_adaptive, tiny_dpg, _data(), cfg)
    for k, v in tiny_adaptive.weights.items():
        if "running" not in k:
            assert np.array_equal(out.weights[k], v), k


def test_dpg_and_input_model_untouched(tiny_adaptive, tiny_dpg):
    dpg_fp, model_fp = tiny_dpg.fingerprint, tiny_adaptive.fingerprint
    out = train_source(tiny_adaptive, tiny_dpg, _data(), TrainConfig(lr_max=1e-3, epochs=1, batch_size=4))
    assert tiny_dpg.fingerprint == dpg_fp and tiny_adaptive.fingerprint == model_fp
    assert out.dpg_fingerprint == dpg_fp and out.fingerprint != model_fp


def test_training_is_deterministic(tiny_adaptive, tiny_dpg):
    cfg = TrainConfig(lr_max=1e-3, lr_min=1e-4, epochs=2, batch_size=4, seed=3)
    a = train_source(tiny_adaptive, tiny_dpg, _data(), cfg)
    b = train_source(tiny_adaptive, tiny_dpg, _data(), cfg)
    assert a.fingerprint == b.fingerprint
    assert a.metadata["loss_curve"] == b.metadata["loss_curve"]


def test_repeated_steps_on_one_batch_decrease_loss(tiny_plain):
    x, y = _data(4)
    x, y = torch.from_numpy(x), torch.from_numpy(y.astype(np.int64))
    net = to_module(tiny_plain)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    losses = []
    for _ in range(10):
        loss = combined_loss(net(x, None, "batch"), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_fingerprint_mismatch_raises(tiny_adaptive, tiny_dpg):
    tiny_adaptive.dpg_fingerprint = "feedfacefeedface"
    with pytest.raises(ContractError):
        train_source(tiny_adaptive, tiny_dpg, _data(), TrainConfig(epochs=1))


def test_model_kind_contracts(tiny_adaptive, tiny_plain, tiny_dpg):
    with pytest.raises(ContractError):
        train_source(tiny_plain, tiny_dpg, _data(), TrainConfig(epochs=1))
    with pytest.raises(ContractError):
        train_plain(tiny_adaptive, _data(), TrainConfig(epochs=1))
    with pytest.raises(ContractError):
        train_source(tiny_adaptive, tiny_adaptive, _data(), TrainConfig(epochs=1))


def test_loss_curve_and_csv(tiny_plain, tmp_path):
    cfg = TrainConfig(lr_max=1e-3, lr_min=1e-4, epochs=3, batch_size=4)
    out = train_plain(tiny_plain, _data(), cfg)
    curve = out.metadata["loss_curve"]
    assert [r["epoch"] for r in curve] == [0, 1, 2]
    assert curve[0]["lr"] == pytest.approx(1e-3) and curve[-1]["lr"] == pytest.approx(1e-4)
    write_loss_csv(curve, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,mean_loss,lr") and len(lines) == 4


def test_running_stats_follow_training_batches(tiny_plain):
    out = train_plain(tiny_plain, _data(), TrainConfig(lr_max=0.0, lr_min=0.0, epochs=1, batch_size=4))
    key = "encoder.block0.norm0.running_mean"
    assert not np.array_equal(out.weights[key], tiny_plain.weights[key])


def test_as_arrays_rejects_mismatch():
    from otfseg.exceptions import ValidationError

    x, y = _data(4)
    with pytest.raises(ValidationError):
        as_arrays((x, y[:3]))
