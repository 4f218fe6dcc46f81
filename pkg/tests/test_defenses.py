import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gifdlab.core import ImageBatch
from gifdlab.data import make_dataset
from gifdlab.defenses import (DefenseSpec, DEFENSE_PRESETS, apply_clipping, apply_defense, apply_noise,
                              apply_soteria, apply_sparsification, soteria_mask, soteria_scores)
from gifdlab.models import loss_and_gradients, make_classifier


def _grads(seed, shapes=((10,), (4, 5), (3, 3, 2))):
    g = torch.Generator().manual_seed(seed)
    return {f"l{i}": torch.randn(s, generator=g) * 3 for i, s in enumerate(shapes)}


def test_spec_requires_active_fields():
    with pytest.raises(ValueError):
        DefenseSpec("clip")
    with pytest.raises(ValueError):
        DefenseSpec("sparsify", prune_rate=1.0)
    with pytest.raises(ValueError):
        DefenseSpec("bogus")
    for spec in DEFENSE_PRESETS.values():
        assert DefenseSpec.from_dict(spec.to_dict()) == spec
    assert DEFENSE_PRESETS["clip"].clip_bound == 4
    assert DEFENSE_PRESETS["sparsify"].prune_rate == 0.9
    assert DEFENSE_PRESETS["noise"].noise_std == 0.1
    assert DEFENSE_PRESETS["soteria"].soteria_rate == 0.8


def test_noise():
    g = {"a": torch.zeros(10**5)}
    assert torch.equal(apply_noise(g, 0.0, 1)["a"], g["a"])
    n1 = apply_noise(g, 0.1, 1)["a"]
    assert abs(n1.std().item() - 0.1) <= 0.002
    assert torch.equal(n1, apply_noise(g, 0.1, 1)["a"])
    assert (n1 != 0).all()


def test_clipping_analytic():
    v = torch.tensor([0.0, 8.0])
    assert torch.equal(apply_clipping({"a": v}, 4)["a"], torch.tensor([0.0, 4.0]))
    w = torch.tensor([2.0, 0.0])
    assert torch.equal(apply_clipping({"a": w}, 4)["a"], w)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10))
def test_clipping_bounds_direction_idempotence(seed, scale):
    g = {k: v * scale for k, v in _grads(seed).items()}
    out = apply_clipping(g, 4.0)
    for k in g:
        assert out[k].norm().item() <= 4 + 1e-6
        cos = torch.dot(out[k].reshape(-1), g[k].reshape(-1)) / (out[k].norm() * g[k].norm())
        assert abs(cos.item() - 1) < 1e-6
    again = apply_clipping(out, 4.0)
    for k in g:
        assert torch.allclose(again[k], out[k], atol=1e-6)


def test_sparsification_examples():
    v = torch.tensor([0.1, -3.0, 2.0, 0.5, -0.2, 1.0, 0.0, 2.5, -1.0, 0.3])
    out = apply_sparsification({"a": v}, 0.9)["a"]
    assert (out != 0).sum() == 1 and out[1] == -3.0
    # ties resolve to the first index
    t = apply_sparsification({"a": torch.tensor([1.0, -1.0, 1.0, 0.5])}, 0.5)["a"]
    assert torch.equal(t, torch.tensor([1.0, -1.0, 0.0, 0.0]))
    g = _grads(3)
    keep_all = apply_sparsification(g, 1e-9)
    for k in g:
        assert torch.equal(keep_all[k], g[k])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.9, 0.95]))
def test_sparsification_properties(seed, p):
    g = _grads(seed)
    out = apply_sparsification(g, p)
    for k, v in g.items():
        n = v.numel()
        kept = out[k] != 0
        assert kept.sum().item() == math.ceil((1 - p) * n - 1e-9)
        assert torch.equal(out[k][kept], v[kept])
        assert (out[k][~kept] == 0).all()
        # everything kept is at least as large as everything dropped
        if (~kept).any():
            assert v[kept].abs().min() >= v[~kept].abs().max()
    again = apply_sparsification(out, p)
    for k in g:
        assert torch.equal(again[k], out[k])
    tighter = apply_sparsification(g, 0.95)
    looser = apply_sparsification(g, 0.9)
    for k in g:
        assert not ((tighter[k] != 0) & (looser[k] == 0)).any()


@pytest.fixture(scope="module")
def soteria_setup():
    model = make_classifier("convnet4", 10, (3, 32, 32), seed=0, width=4)
    d = make_dataset(4, 0)
    batch = ImageBatch(d.images[:1], d.labels[:1])
    _, g = loss_and_gradients(model, batch.pixels, batch.labels)
    return model, batch, g


def test_soteria_mask_counts_and_locality(soteria_setup):
    model, batch, g = soteria_setup
    out = apply_soteria(g, model, batch, 0.8)
    n = model.feature_dim
    keep = soteria_mask(model, batch, 0.8)
    assert (~keep).sum().item() == n - math.ceil(0.2 * n)
    zero_cols = (out["fc.weight"] == 0).all(dim=0)
    assert zero_cols[~keep].all()
    for k in g:
        if k != "fc.weight":
            assert torch.equal(out[k], g[k])
    assert torch.equal(soteria_mask(model, batch, 0.8), keep)
    with pytest.raises(KeyError):
        apply_soteria(g, model, batch, 0.8, "nope.weight")


def test_soteria_scores_match_per_feature_oracle(soteria_setup):
    model, batch, _ = soteria_setup
    scores = soteria_scores(model, batch)
    x = batch.pixels.clone().requires_grad_(True)
    jac = torch.autograd.functional.jacobian(lambda t: model.representation(t)[0], x)
    r = model.representation(batch.pixels)[0].detach()
    ref = r.abs() * jac.reshape(r.numel(), -1).norm(dim=1)
    assert torch.allclose(scores, ref, rtol=1e-5, atol=1e-7)


def test_defenses_preserve_shapes(soteria_setup):
    model, batch, g = soteria_setup
    for spec in DEFENSE_PRESETS.values():
        out = apply_defense(spec, g, model, batch)
        assert list(out) == list(g)
        assert all(out[k].shape == g[k].shape for k in g)
