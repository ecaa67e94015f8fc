import numpy as np
import pytest
import torch

from otfseg.exceptions import ContractError, ShapeError, ValidationError
from otfseg.inference import (
    EpisodicSegmenter,
    TestInstance,
    adapt_and_segment,
    decode_logits,
    episodic_eval,
)
from otfseg.model import to_module


def test_decode_binary_uses_last_channel():
    logits = torch.tensor([[[[5.0, -5.0]], [[-1.0, 0.5]]]])  # (1, 2, 1, 2)
    probs, mask = decode_logits(logits)
    assert mask.tolist() == [[[0, 1]]]
    assert torch.allclose(probs[:, 1], torch.sigmoid(logits[:, 1]))


def test_decode_multiclass_argmax():
    logits = torch.randn(2, 4, 3, 3)
    _, mask = decode_logits(logits)
    assert torch.equal(mask, logits.argmax(1))


def test_weights_untouched(tiny_adaptive, tiny_dpg, tiny_test_set):
    before = (tiny_adaptive.fingerprint, tiny_dpg.fingerprint)
    episodic_eval(tiny_adaptive, tiny_dpg, tiny_test_set)
    assert (tiny_adaptive.fingerprint, tiny_dpg.fingerprint) == before


def test_permutation_invariance(tiny_adaptive, tiny_dpg, tiny_test_set):
    ref = episodic_eval(tiny_adaptive, tiny_dpg, tiny_test_set)
    rng = np.random.default_rng(0)
    for _ in range(3):
        perm = [tiny_test_set[i] for i in rng.permutation(len(tiny_test_set))]
        rep = episodic_eval(tiny_adaptive, tiny_dpg, perm)
        assert rep.per_instance == ref.per_instance


def test_singleton_equals_batch_entry(tiny_adaptive, tiny_dpg, tiny_test_set):
    full = episodic_eval(tiny_adaptive, tiny_dpg, tiny_test_set)
    one = episodic_eval(tiny_adaptive, tiny_dpg, tiny_test_set[3:4])
    iid = tiny_test_set[3].instance_id
    assert one.per_instance[iid] == full.per_instance[iid]


def test_label_never_reaches_the_model(tiny_adaptive, tiny_dpg, tiny_test_set):
    inst = tiny_test_set[0]
    a = adapt_and_segment(tiny_adaptive, tiny_dpg, inst)
    b = adapt_and_segment(tiny_adaptive, tiny_dpg, TestInstance(inst.image, inst.instance_id, None))
    assert np.array_equal(a.mask, b.mask) and np.array_equal(a.probabilities, b.probabilities)


def test_no_gradient_machinery(monkeypatch, tiny_adaptive, tiny_dpg, tiny_test_set):
    def forbidden(*a, **k):
        raise AssertionError("gradient machinery used at test time")

    monkeypatch.setattr(torch.Tensor, "backward", forbidden)
    monkeypatch.setattr(torch.autograd, "grad", forbidden)
    monkeypatch.setattr(torch.autograd, "backward", forbidden)
    seg = EpisodicSegmenter(tiny_adaptive, tiny_dpg)
    seen = []
    hooks = [m.register_forward_hook(lambda mod, i, o: seen.append(torch.is_grad_enabled() or o.requires_grad))
             for m in (seg.net, seg.encoder)]
    for inst in tiny_test_set[:4]:
        seg(inst)
    for h in hooks:
        h.remove()
    assert seen and not any(seen)
    assert not any(p.requires_grad for p in seg.net.parameters())


def test_contracts(tiny_adaptive, tiny_plain, tiny_dpg, tiny_test_set):
    with pytest.raises(ContractError):
        EpisodicSegmenter(tiny_plain, tiny_dpg)
    paired = tiny_adaptive.copy()
    paired.dpg_fingerprint = "0000000000000000"
    with pytest.raises(ContractError):
        EpisodicSegmenter(paired, tiny_dpg)
    with pytest.raises(ShapeError):
        adapt_and_segment(tiny_adaptive, tiny_dpg, TestInstance(np.zeros((1, 8, 8, 8), np.float32), "x"))
    with pytest.raises(ValidationError):
        episodic_eval(tiny_adaptive, tiny_dpg, [tiny_test_set[0].without_label()])


def test_instance_stats_make_episodes_batch_independent(tiny_adaptive, tiny_dpg, tiny_test_set):
    from otfseg.dpg import encode_batch

    net = to_module(tiny_adaptive)
    x = torch.from_numpy(np.stack([t.image for t in tiny_test_set[:4]]))
    codes = encode_batch(tiny_dpg, x)
    with torch.no_grad():
        together = net(x, codes, "instance")
        alone = torch.cat([net(x[i : i + 1], codes[i : i + 1], "instance") for i in range(4)])
    assert torch.allclose(together, alone, atol=1e-5)
