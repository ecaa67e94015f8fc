import numpy as np
import pytest
import torch

from otfseg.dpg import (
    AugSpec,
    DPGConfig,
    augment,
    build_dpg,
    encode_batch,
    encode_domain,
    pretrain_dpg,
    reconstruction_mse,
    to_autoencoder,
)
from otfseg.exceptions import ShapeError, ValidationError
from otfseg.training import TrainConfig

CFG = DPGConfig(base_channels=4)


def corpus(n=8, size=16, seed=0):
    return np.random.default_rng(seed).uniform(0.1, 0.9, (n, 1, size, size)).astype(np.float32)


def test_identity_augmentation_is_noop():
    img = corpus(1)[0]
    assert np.array_equal(augment(img, AugSpec.identity(), seed=3), img)


def test_gamma_only_on_constant_image():
    img = np.full((1, 8, 8), 0.5, np.float32)
    spec = AugSpec((2.0, 2.0), 0.0, (0.0, 0.0), 0.0)
    assert np.allclose(augment(img, spec, seed=0), 0.25, atol=1e-7)


def test_augmentation_is_seeded():
    img = corpus(1)[0]
    a, b, c = (augment(img, AugSpec(), s) for s in (5, 5, 6))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_augment_rejects_out_of_range():
    with pytest.raises(ValidationError):
        augment(np.full((1, 4, 4), 1.5, np.float32), AugSpec(), 0)
    with pytest.raises(ValidationError):
        AugSpec(gamma_range=(2.0, 1.0))


def test_code_shape_and_default_width():
    assert DPGConfig().code_channels == 32  # base 16, depth 2
    code = encode_domain(corpus(1)[0], build_dpg(CFG))
    assert code.values.shape == (CFG.code_channels, 4, 4)  # one pool per level
    assert tuple(code.values.shape[1:]) == CFG.code_shape((16, 16))[1:]


def test_encode_is_per_image_and_read_only():
    dpg = build_dpg(CFG, seed=1)
    before = dpg.fingerprint
    imgs = torch.from_numpy(corpus(6))
    full = encode_batch(dpg, imgs, chunk=6)
    single = torch.cat([encode_batch(dpg, imgs[i : i + 1]) for i in range(6)])
    assert torch.allclose(full, single, atol=1e-6)
    assert dpg.fingerprint == before
    code = encode_domain(imgs[0].numpy(), dpg)
    assert code.source_fingerprint == before


def test_frozen_module():
    net = to_autoencoder(build_dpg(CFG))
    assert not net.training
    assert not any(p.requires_grad for p in net.parameters())


def test_encode_checks_dimensionality():
    with pytest.raises(ShapeError):
        encode_domain(np.zeros((1, 16, 16, 16), np.float32), build_dpg(CFG))


def test_zero_lr_leaves_parameters_unchanged():
    init = build_dpg(CFG, seed=2)
    out = pretrain_dpg(corpus(), CFG, TrainConfig(lr_max=0.0, lr_min=0.0, epochs=1, batch_size=4), init=init)
    for k, v in init.weights.items():
        if "running" not in k:
            assert np.array_equal(out.weights[k], v), k


def test_pretraining_is_deterministic():
    tc = TrainConfig(lr_max=1e-3, lr_min=1e-4, epochs=2, batch_size=4, seed=9)
    a = pretrain_dpg(corpus(), CFG, tc)
    b = pretrain_dpg(corpus(), CFG, tc)
    assert a.fingerprint == b.fingerprint
    assert a.metadata["loss_curve"] == b.metadata["loss_curve"]


def test_pretraining_reduces_reconstruction_error():
    data = corpus(32, seed=4)
    untrained = build_dpg(CFG, seed=0)
    trained = pretrain_dpg(data, CFG, TrainConfig(lr_max=3e-3, lr_min=1e-4, epochs=8, batch_size=8))
    assert reconstruction_mse(trained, data) < reconstruction_mse(untrained, data)


def test_empty_corpus_rejected():
    with pytest.raises(ValidationError):
        pretrain_dpg(np.zeros((0, 1, 16, 16), np.float32), CFG, TrainConfig(epochs=1))
