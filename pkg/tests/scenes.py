"""Seeded random scenes shared by the test modules."""

import functools

import numpy as np

from stm.camera import Camera
from stm.gaussians import GaussianField


def random_field(rng, n, sh_degree=3, *, center=(0.0, 0.0, 0.0), spread=1.0,
                 log_scale=(-3.0, -1.5), logit=(-2.0, 3.0), sh_std=0.3):
    nb = (sh_degree + 1) ** 2
    return GaussianField.from_arrays(
        positions=np.asarray(center) + rng.uniform(-spread, spread, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(*log_scale, (n, 3)),
        opacity_logits=rng.uniform(*logit, (n, 1)),
        sh_coefficients=rng.normal(0.0, sh_std, (n, nb, 3)),
    )


def front_camera(size=64, distance=4.0, fov=60.0):
    return Camera.look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0], width=size, height=size, fov_deg=fov)


@functools.lru_cache(maxsize=None)
def tiny_world(seed=1):
    """Small scene + avatar + 6-frame 32 px sequence (frames 2 and 5 held out)."""
    from stm.synth import make_avatar, make_scene, make_sequence

    scene = make_scene(seed, n_primitives=80)
    avatar = make_avatar(seed)
    return scene, avatar, make_sequence(scene, avatar, n_frames=6, seed=seed, size=32, test_every=3)
