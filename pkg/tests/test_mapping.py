import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stm.errors import ConfigurationError
from stm.gaussians import ATTRIBUTES, concat_fields
from stm.mapping import AttributeMapper, MappingStack, map_attribute, map_fields, map_then_concat
from stm.raster import render

from fdcheck import finite_difference, worst_violation
from scenes import front_camera, random_field


def randomize(module, rng, std=0.3):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.tensor(rng.normal(0.0, std, p.shape)))


def fields_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.attributes().values(), b.attributes().values()))


def test_zero_mapper_is_identity():
    m = AttributeMapper(5)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    v = torch.randn(7, 5, dtype=torch.float64)
    assert torch.equal(map_attribute(m, v), v)
    # documented init also starts at the identity
    assert torch.equal(map_attribute(AttributeMapper(5), v), v)


def test_one_neuron_by_hand():
    m = AttributeMapper(1, hidden=1)
    with torch.no_grad():
        m.linear1.weight.fill_(2.0)
        m.linear1.bias.fill_(-0.5)
        m.linear2.weight.fill_(3.0)
        m.linear2.bias.fill_(0.25)
    out = map_attribute(m, torch.tensor([[0.75], [0.1]], dtype=torch.float64))
    # 0.75 + max(0, 1.0)*3 + 0.25 = 4.0 ; 0.1 + max(0, -0.3)*3 + 0.25 = 0.35
    np.testing.assert_allclose(out.detach().numpy().ravel(), [4.0, 0.35], rtol=0, atol=1e-15)


def test_width_mismatch():
    with pytest.raises(ConfigurationError):
        map_attribute(AttributeMapper(3), torch.zeros(2, 4, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        MappingStack(mode="bogus")


def test_mapper_fd():
    rng = np.random.default_rng(0)
    m = AttributeMapper(4, hidden=8)
    randomize(m, rng)
    v = torch.tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = torch.tensor(rng.normal(size=(6, 4)))
    loss = lambda: (map_attribute(m, v) * w).sum()
    params = [v] + list(m.parameters())
    analytic = torch.autograd.grad(loss(), params)
    numeric = finite_difference(loss, [p.data for p in params])
    assert worst_violation(analytic, numeric) <= 1.0


def test_mapper_counts():
    assert len(MappingStack(1, "shared").scene) == 5 and len(MappingStack(1, "shared").avatar) == 0
    sep = MappingStack(1, "separate")
    assert len(sep.scene) == 5 and len(sep.avatar) == 5
    assert len(list(MappingStack(1, "off").parameters())) == 0


def test_off_and_zero_shared_are_plain_concat():
    rng = np.random.default_rng(1)
    scene, avatar = random_field(rng, 10, 1), random_field(rng, 8, 1)
    plain = concat_fields(scene, avatar)
    off = MappingStack(1, "off")
    s2, a2 = map_fields(off, scene, avatar)
    assert fields_equal(s2, scene) and fields_equal(a2, avatar)
    assert fields_equal(map_then_concat(off, scene, avatar), plain)
    shared = MappingStack(1, "shared", seed=3)
    mapped = map_then_concat(shared, scene, avatar)
    assert fields_equal(mapped, plain)
    cam = front_camera(32)
    assert torch.equal(render(mapped, cam).color, render(plain, cam).color)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_shared_cross_field_consistency(seed, n_scene, n_avatar):
    rng = np.random.default_rng(seed)
    stack = MappingStack(1, "shared", seed=seed)
    randomize(stack, rng)
    scene, avatar = random_field(rng, n_scene, 1), random_field(rng, n_avatar, 1)
    i, j = rng.integers(n_scene), rng.integers(n_avatar)
    # plant scene row i into the avatar at row j
    avatar = avatar.map(lambda t: t.clone())
    for name in ATTRIBUTES:
        getattr(avatar, name)[j] = getattr(scene, name)[i]
    ms, ma = map_fields(stack, scene, avatar)
    for name in ATTRIBUTES:
        assert torch.equal(getattr(ms, name)[i], getattr(ma, name)[j])


def test_separate_mode_breaks_consistency():
    rng = np.random.default_rng(2)
    stack = MappingStack(1, "separate", seed=2)
    randomize(stack, rng)
    scene = random_field(rng, 4, 1)
    ms, ma = map_fields(stack, scene, scene)
    assert not torch.equal(ms.positions, ma.positions)


def test_attribute_subset_passes_others_through():
    rng = np.random.default_rng(3)
    stack = MappingStack(1, "shared", attributes=("rotations", "log_scales", "sh_coefficients"))
    randomize(stack, rng)
    scene, avatar = random_field(rng, 5, 1), random_field(rng, 5, 1)
    ms, ma = map_fields(stack, scene, avatar)
    assert torch.equal(ms.positions, scene.positions) and torch.equal(ma.opacity_logits, avatar.opacity_logits)
    assert not torch.equal(ms.rotations, scene.rotations)
    for name in ATTRIBUTES:
        assert getattr(ms, name).shape == getattr(scene, name).shape


def test_gradients_reach_scene_avatar_and_mapper():
    rng = np.random.default_rng(4)
    stack = MappingStack(1, "shared", seed=4)
    randomize(stack, rng, 0.1)
    scene = random_field(rng, 10, 1, center=(0.0, 0.0, 0.5), spread=0.8).requires_grad_()
    avatar = random_field(rng, 10, 1, center=(0.0, 0.0, -0.5), spread=0.8).requires_grad_()
    cam = front_camera(32)
    target = torch.tensor(rng.uniform(size=(32, 32, 3)))
    loss = ((render(map_then_concat(stack, scene, avatar), cam).color - target) ** 2).sum()
    loss.backward()
    for f in (scene, avatar):
        for t in f.attributes().values():
            assert float(t.grad.abs().sum()) > 0
    for p in stack.parameters():
        assert float(p.grad.abs().sum()) > 0


@pytest.mark.parametrize("mode", ["shared", "separate"])
def test_map_then_concat_fd(mode):
    rng = np.random.default_rng(5)
    stack = MappingStack(0, mode, seed=5)
    randomize(stack, rng, 0.1)
    scene = random_field(rng, 4, 0, spread=0.6).requires_grad_()
    avatar = random_field(rng, 4, 0, spread=0.6).requires_grad_()
    cam = front_camera(24)
    w = torch.tensor(rng.normal(size=(24, 24, 3)))
    loss = lambda: (render(map_then_concat(stack, scene, avatar), cam).color * w).sum()
    groups = [scene.positions, scene.opacity_logits, avatar.log_scales, avatar.sh_coefficients]
    groups += [stack.scene["positions"].linear2.weight, stack.mapper_for("opacity_logits", "avatar").linear1.weight]
    analytic = torch.autograd.grad(loss(), groups)
    coords = {i: [int(c) for c in rng.choice(g.numel(), size=min(4, g.numel()), replace=False)]
              for i, g in enumerate(groups)}
    numeric = finite_difference(loss, [g.data for g in groups], coords=coords)
    assert worst_violation(analytic, numeric) <= 1.0
