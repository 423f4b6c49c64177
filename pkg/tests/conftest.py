import numpy as np
import pytest

from quadfit.model import QuadTemplate
from quadfit.synth import synthetic_template, generate_scene, NoiseSpec


def make_random_template(rng, n=14, j=5, k=3, n_scales=2, limit=3.0):
    """Small random tree-skeleton template for gradient and property tests."""
    parents = [-1] + [int(rng.integers(0, c)) for c in range(1, j)]
    w = rng.random((n, j))
    w /= w.sum(axis=1, keepdims=True)
    offs = rng.normal(size=(j, 3)) * 0.5
    offs[0] = 0.0
    lsm = np.full(j, -1, dtype=np.int64)
    lsm[j - 1] = 0
    if n_scales > 1 and j > 2:
        lsm[1] = 1
    faces = np.array([[0, 1, 2], [1, 2, 3], [2, 3, 4]], dtype=np.int64)
    return QuadTemplate(
        rest_vertices=rng.normal(size=(n, 3)),
        faces=faces,
        joint_parents=np.array(parents),
        joint_offsets=offs,
        skin_weights=w,
        shape_basis=rng.normal(size=(k, n, 3)) * 0.1,
        part_labels=rng.integers(0, 4, size=n),
        pose_limits=np.tile(np.array([-limit, limit]), (j, 3, 1)),
        limb_scale_map=lsm,
        n_limb_scales=n_scales,
    )


def make_chain_template(n_joints=2, bone=1.0):
    """Straight chain along +x with one vertex pinned to each joint tip."""
    n = n_joints + 3
    parents = np.arange(-1, n_joints - 1)
    offsets = np.zeros((n_joints, 3))
    offsets[1:, 0] = bone
    # vertices along the chain; last vertex sits one bone past the last joint
    verts = np.zeros((n, 3))
    verts[:, 0] = np.linspace(0.0, bone * n_joints, n)
    w = np.zeros((n, n_joints))
    for i in range(n):
        w[i, min(int(verts[i, 0] / bone), n_joints - 1)] = 1.0
    return QuadTemplate(
        rest_vertices=verts,
        faces=np.array([[0, 1, 2]]),
        joint_parents=parents,
        joint_offsets=offsets,
        skin_weights=w,
        shape_basis=np.zeros((1, n, 3)),
        part_labels=np.zeros(n, dtype=np.int64),
        pose_limits=np.tile(np.array([-50.0, 50.0]), (n_joints, 3, 1)),
        limb_scale_map=np.full(n_joints, -1, dtype=np.int64),
        n_limb_scales=1,
    )


@pytest.fixture(scope="session")
def quad_template():
    return synthetic_template()


@pytest.fixture(scope="session")
def clean_scene(tmp_path_factory, quad_template):
    """Small noiseless scene shared by read-only tests."""
    d = tmp_path_factory.mktemp("scene_clean")
    generate_scene(d, quad_template, frames=8, seed=7)
    return d


@pytest.fixture(scope="session")
def noisy_scene(tmp_path_factory, quad_template):
    d = tmp_path_factory.mktemp("scene_noisy")
    generate_scene(d, quad_template, frames=8, seed=7,
                   noise=NoiseSpec(sigma_px=1.0, outlier_frac=0.1, dropout_frac=0.25))
    return d
