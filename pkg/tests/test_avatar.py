import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from stm.avatar import (
    AvatarModel,
    DeformationHeads,
    Pose,
    SkeletonRig,
    Triplane,
    forward_skinning,
    joint_transforms,
    knn_lbs_prior,
    load_rig_json,
    pose_avatar,
    query_triplane,
    run_heads,
    save_rig_json,
)
from stm.errors import ConfigurationError, InvalidWeightsError
from stm.raster import render

from fdcheck import finite_difference, worst_violation
from scenes import front_camera


def two_link():
    return SkeletonRig(parents=(-1, 0), offsets=[[0.0, 0, 0], [1.0, 0, 0]])


def chain_rig():
    return SkeletonRig(parents=(-1, 0, 1, 0), offsets=[[0.1, 0.9, 0], [0.0, 0.5, 0], [0.0, 0.4, 0.1], [0.2, -0.4, 0]])


def test_rig_validation():
    with pytest.raises(ConfigurationError):
        SkeletonRig(parents=(0, -1), offsets=np.ones((2, 3)))
    with pytest.raises(ConfigurationError):
        SkeletonRig(parents=(-1, 0), offsets=[[0, 0, 0], [0, 0, 0]])


def test_identity_pose_transforms():
    tf = joint_transforms(chain_rig(), Pose.identity(4))
    np.testing.assert_array_equal(tf.rotations.numpy(), np.broadcast_to(np.eye(3), (4, 3, 3)))
    assert float(tf.translations.abs().max()) < 1e-15


def test_root_rotation_is_rigid_about_root():
    rig = chain_rig()
    rho = np.array([0.3, -0.7, 0.4])
    rotations = np.zeros((4, 3))
    rotations[0] = rho
    tf = joint_transforms(rig, Pose(rotations))
    r = Rotation.from_rotvec(rho).as_matrix()
    root = rig.rest_joints()[0]
    for k in range(4):
        np.testing.assert_allclose(tf.rotations[k].numpy(), r, atol=1e-12)
        np.testing.assert_allclose(tf.translations[k].numpy(), root - r @ root, atol=1e-12)


def test_two_link_elbow():
    rig = two_link()
    tf = joint_transforms(rig, Pose([[0, 0, 0], [0, 0, math.pi / 2]]))
    tip = torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64)
    moved = tf.rotations[1] @ tip + tf.translations[1]
    np.testing.assert_allclose(moved.numpy(), [1.0, 1.0, 0.0], atol=1e-9)


def test_forward_skinning_examples():
    rng = np.random.default_rng(0)
    rig = chain_rig()
    p = torch.tensor(rng.normal(size=(10, 3)))
    w = torch.softmax(torch.tensor(rng.normal(size=(10, 4))), -1)
    same = forward_skinning(p, w, joint_transforms(rig, Pose.identity(4)))
    assert float((same - p).abs().max()) <= 1e-12

    pose = Pose(rng.normal(0, 0.5, (4, 3)), [0.2, -0.1, 0.3])
    tf = joint_transforms(rig, pose)
    onehot = torch.zeros(10, 4, dtype=torch.float64)
    onehot[:, 2] = 1.0
    rigid = forward_skinning(p, onehot, tf)
    expected = p @ tf.rotations[2].T + tf.translations[2]
    assert float((rigid - expected).abs().max()) <= 1e-12

    half = torch.zeros(10, 4, dtype=torch.float64)
    half[:, 1] = half[:, 3] = 0.5
    mid = forward_skinning(p, half, tf)
    a = p @ tf.rotations[1].T + tf.translations[1]
    b = p @ tf.rotations[3].T + tf.translations[3]
    assert float((mid - 0.5 * (a + b)).abs().max()) <= 1e-12


def test_forward_skinning_rejects_bad_rows():
    tf = joint_transforms(two_link(), Pose.identity(2))
    with pytest.raises(InvalidWeightsError):
        forward_skinning(torch.zeros(1, 3), torch.tensor([[0.7, 0.7]]), tf)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_skinning_linear_in_weights(alpha, seed):
    rng = np.random.default_rng(seed)
    rig = chain_rig()
    tf = joint_transforms(rig, Pose(rng.normal(0, 0.6, (4, 3)), rng.normal(size=3)))
    p = torch.tensor(rng.normal(size=(6, 3)))
    w1 = torch.softmax(torch.tensor(rng.normal(size=(6, 4))), -1)
    w2 = torch.softmax(torch.tensor(rng.normal(size=(6, 4))), -1)
    lhs = forward_skinning(p, alpha * w1 + (1 - alpha) * w2, tf)
    rhs = alpha * forward_skinning(p, w1, tf) + (1 - alpha) * forward_skinning(p, w2, tf)
    assert float((lhs - rhs).abs().max()) <= 1e-9


def make_triplane(res=5, feat=2):
    return Triplane([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], res, feat)


def test_triplane_constant():
    tp = make_triplane()
    with torch.no_grad():
        tp.planes.fill_(0.7)
    feat = query_triplane(tp, torch.tensor([[0.123, -0.9, 0.4], [5.0, 5.0, 5.0]], dtype=torch.float64))
    assert torch.allclose(feat, torch.full((2, 6), 0.7, dtype=torch.float64), atol=1e-15)


def test_triplane_node_and_cell_center():
    tp = make_triplane(res=5, feat=1)
    with torch.no_grad():
        tp.planes.copy_(torch.arange(75, dtype=torch.float64).reshape(3, 5, 5, 1))
    # grid spacing is 0.5: node (2, 3) on XY is x=0.0, y=0.5
    feat = query_triplane(tp, torch.tensor([0.0, 0.5, -1.0], dtype=torch.float64))
    feat = feat.detach()
    assert float(feat[0]) == float(tp.planes.detach()[0, 2, 3, 0])
    assert float(feat[1]) == float(tp.planes.detach()[1, 2, 0, 0])
    assert float(feat[2]) == float(tp.planes.detach()[2, 3, 0, 0])
    with torch.no_grad():
        tp.planes.zero_()
        tp.planes[0, 1, 1, 0] = 4.0
    center = query_triplane(tp, torch.tensor([-0.75, -0.75, 0.0], dtype=torch.float64))
    assert float(center[0].detach()) == pytest.approx(1.0, abs=1e-15)


def test_triplane_gradients_fd():
    rng = np.random.default_rng(2)
    tp = make_triplane(4, 3)
    with torch.no_grad():
        tp.planes.copy_(torch.tensor(rng.normal(size=tp.planes.shape)))
    pos = torch.tensor(rng.uniform(-0.9, 0.9, (5, 3)), requires_grad=True)
    weights = torch.tensor(rng.normal(size=(5, 9)))
    loss = lambda: (query_triplane(tp, pos) * weights).sum()
    analytic = torch.autograd.grad(loss(), [tp.planes, pos])
    numeric = finite_difference(loss, [tp.planes.data, pos.data])
    assert worst_violation(analytic, numeric) <= 1.0


def test_heads_zero_and_shapes():
    heads = DeformationHeads(12, 4, sh_degree=1, hidden=128)
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
    out = run_heads(heads, torch.randn(3, 12, dtype=torch.float64))
    assert out.offset.shape == (3, 3) and out.sh.shape == (3, 4, 3) and out.opacity_logit.shape == (3, 1)
    assert out.rotation.shape == (3, 4) and out.log_scale.shape == (3, 3) and out.lbs_logits.shape == (3, 4)
    for t in out:
        assert float(t.detach().abs().max()) == 0.0
    w = torch.softmax(out.lbs_logits, -1)
    assert torch.allclose(w, torch.full_like(w, 0.25))
    with pytest.raises(ConfigurationError):
        run_heads(heads, torch.zeros(2, 11, dtype=torch.float64))


def test_heads_deterministic_and_fd():
    rng = np.random.default_rng(4)
    heads = DeformationHeads(6, 3, sh_degree=1, hidden=128, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        for p in heads.parameters():
            p.copy_(torch.tensor(rng.normal(0, 0.5, p.shape)))
    feat = torch.tensor(rng.normal(size=(4, 6)))
    a, b = run_heads(heads, feat), run_heads(heads, feat.clone())
    for x, y in zip(a, b):
        assert torch.equal(x, y)
    weights = [torch.tensor(rng.normal(size=t.shape)) for t in a]
    params = list(heads.parameters())
    loss = lambda: sum((t * w).sum() for t, w in zip(run_heads(heads, feat), weights))
    analytic = torch.autograd.grad(loss(), params)
    numeric = finite_difference(loss, [p.data for p in params])
    assert worst_violation(analytic, numeric) <= 1.0


def brute_knn(positions, verts, weights, k, eps=1e-8):
    out = np.empty((positions.shape[0], weights.shape[1]))
    for i, p in enumerate(positions):
        d = np.sqrt(((verts - p) ** 2).sum(axis=1))
        nearest = np.argsort(d, kind="stable")[:k]
        inv = 1.0 / (d[nearest] + eps)
        inv = inv / inv.sum()
        out[i] = (inv[:, None] * weights[nearest]).sum(axis=0)
    return out


def test_knn_examples():
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
    w = np.eye(4)[:, :3] + np.array([0, 0, 0.0])
    w[3] = [0.2, 0.3, 0.5]
    on_vertex = knn_lbs_prior(verts[2:3], verts, w, k=3)
    np.testing.assert_allclose(on_vertex[0], w[2], atol=1e-6)
    mid = knn_lbs_prior(np.array([[0.5, 0.0, 0.0]]), verts, w, k=2)
    np.testing.assert_allclose(mid[0], 0.5 * (w[0] + w[1]), atol=1e-12)
    np.testing.assert_allclose(knn_lbs_prior(np.random.default_rng(0).normal(size=(9, 3)), verts, w, 3).sum(1), 1.0,
                               atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(200, 3))
    weights = rng.dirichlet(np.ones(6), size=200)
    pts = rng.normal(size=(50, 3))
    np.testing.assert_array_equal(knn_lbs_prior(pts, verts, weights, 6), brute_knn(pts, verts, weights, 6))


def small_avatar(n=12, seed=0):
    rng = np.random.default_rng(seed)
    rig = chain_rig()
    verts = rng.uniform(-0.5, 0.5, (40, 3)) + [0, 1, 0]
    weights = rng.dirichlet(np.ones(4), size=40)
    return AvatarModel(rig, verts, weights, verts[:n], sh_degree=1, triplane_resolution=8, triplane_features=4,
                       seed=seed)


def test_pose_avatar_identity_fixed_point():
    av = small_avatar()
    with torch.no_grad():
        for p in av.heads.parameters():
            p.zero_()
    posed = pose_avatar(av, Pose.identity(4))
    assert float((posed.positions - av.canonical_positions).detach().abs().max()) <= 1e-12
    assert torch.equal(posed.rotations, av.base_rotations)
    assert torch.equal(posed.log_scales, av.base_log_scales)
    assert torch.equal(posed.sh_coefficients, av.base_sh_coefficients)


def test_pose_avatar_root_rotation_isometry():
    av = small_avatar()
    rot = np.zeros((4, 3))
    rot[0] = [0.4, 1.1, -0.2]
    posed = pose_avatar(av, Pose(rot, [0.3, 0, 0.1])).positions.detach()
    canon = av.canonical_field()[0].positions.detach()
    assert float((torch.cdist(posed, posed) - torch.cdist(canon, canon)).abs().max()) <= 1e-9


def test_pose_avatar_identity_render_matches_canonical():
    av = small_avatar()
    cam = front_camera(32, distance=3.0)
    posed = pose_avatar(av, Pose.identity(4))
    canon, _ = av.canonical_field()
    a, b = render(posed, cam), render(canon, cam)
    assert float((a.color - b.color).detach().abs().max()) <= 1e-6


def test_avatar_end_to_end_gradients():
    av = small_avatar(n=10)
    rng = np.random.default_rng(5)
    with torch.no_grad():
        for p in av.heads.parameters():
            p.add_(torch.tensor(rng.normal(0, 0.05, p.shape)))
        av.triplane.planes.add_(torch.tensor(rng.normal(0, 0.3, av.triplane.planes.shape)))
    pose = Pose(rng.normal(0, 0.3, (4, 3)))
    cam = front_camera(24, distance=3.0)
    d_color = torch.tensor(rng.normal(size=(24, 24, 3)))

    def loss():
        return (render(pose_avatar(av, pose), cam).color * d_color).sum()

    params = [av.triplane.planes] + list(av.heads.parameters())
    analytic = torch.autograd.grad(loss(), params)
    coords = {}
    for ti, p in enumerate(params):
        coords[ti] = [int(i) for i in rng.choice(p.numel(), size=min(6, p.numel()), replace=False)]
    # probe triplane cells that are actually sampled
    nz = torch.nonzero(analytic[0].reshape(-1)).reshape(-1)
    coords[0] = [int(i) for i in nz[torch.randperm(nz.numel(), generator=torch.Generator().manual_seed(0))[:8]]]
    numeric = finite_difference(loss, [p.data for p in params], coords=coords)
    assert worst_violation(analytic, numeric) <= 1.0


def test_rig_json_roundtrip(tmp_path):
    rig = chain_rig()
    verts = np.random.default_rng(0).normal(size=(8, 3))
    weights = np.full((8, 4), 0.25)
    save_rig_json(rig, verts, weights, tmp_path / "rig.json")
    rig2, v2, w2 = load_rig_json(tmp_path / "rig.json")
    assert rig2.parents == rig.parents
    np.testing.assert_array_equal(rig2.offsets, rig.offsets)
    np.testing.assert_array_equal(v2, verts)
    np.testing.assert_array_equal(w2, weights)
