import numpy as np

from quadfit import kernels
from quadfit.kernels import nn_indices, rasterize, _nn_indices_np, _nn_indices_py, _rasterize_np


def brute_nn(q, r):
    return np.array([np.argmin(((r - x) ** 2).sum(axis=1)) for x in q])


def test_nn_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(10):
        q = rng.normal(size=(rng.integers(1, 60), 3))
        r = rng.normal(size=(rng.integers(1, 80), 3))
        got = nn_indices(q, r)
        want = brute_nn(q, r)
        d_got = ((r[got] - q) ** 2).sum(axis=1)
        d_want = ((r[want] - q) ** 2).sum(axis=1)
        assert np.allclose(d_got, d_want, atol=1e-12)


def test_nn_backends_agree():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(50, 8))
    r = rng.normal(size=(70, 8))
    a = _nn_indices_np(q, r)
    b = _nn_indices_py(q, r)
    da = ((r[a] - q) ** 2).sum(axis=1)
    db = ((r[b] - q) ** 2).sum(axis=1)
    assert np.allclose(da, db, atol=1e-9)


def test_nn_empty_query():
    assert nn_indices(np.zeros((0, 2)), np.zeros((3, 2))).size == 0


def test_rasterize_covers_square():
    # two triangles forming the pixel-aligned square [10,20) x [12,22)
    pix = np.array([[10.0, 12.0], [20.0, 12.0], [20.0, 22.0], [10.0, 22.0]])
    depth = np.ones(4)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    zbuf, fid = rasterize(pix, depth, faces, 32, 32)
    covered = fid >= 0
    want = np.zeros((32, 32), dtype=bool)
    want[12:22, 10:20] = True
    assert (covered == want).all()
    assert np.allclose(zbuf[covered], 1.0)


def test_rasterize_depth_order():
    # near triangle should win the shared pixels
    pix = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0],
                    [0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    depth = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    _, fid = rasterize(pix, depth, faces, 16, 16)
    assert (fid[fid >= 0] == 1).all()


def test_rasterize_behind_camera_skipped():
    pix = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    faces = np.array([[0, 1, 2]])
    _, fid = rasterize(pix, np.array([1.0, 1.0, -1.0]), faces, 16, 16)
    assert (fid < 0).all()


def test_rasterize_backends_agree():
    rng = np.random.default_rng(2)
    pix = rng.uniform(-5, 40, size=(30, 2))
    depth = rng.uniform(0.5, 4.0, size=30)
    faces = rng.integers(0, 30, size=(40, 3))
    z1, f1 = kernels._rasterize_impl(np.ascontiguousarray(pix),
                                     1.0 / depth, faces.astype(np.int64), 36, 36)
    z2, f2 = _rasterize_np(pix, 1.0 / depth, faces.astype(np.int64), 36, 36)
    assert (f1 == f2).all()
    both = f1 >= 0
    assert np.allclose(z1[both], z2[both], rtol=1e-12)


def test_backend_name():
    assert kernels.backend_name() in ("numba", "numpy")
