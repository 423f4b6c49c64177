"""Pinhole cameras, EPnP pose estimation, RANSAC, and per-frame initialization.

World-to-camera convention: X_cam = R @ X_world + t, pixels at
(fx * x/z + cx, fy * y/z + cy). Points at depth <= _MIN_DEPTH are flagged
invalid rather than raising, so losses can exclude them.

Initialization strategies rank part+pixel >= pixel > part > org on post-init
silhouette IoU: dense correspondences carry the precision, part-centroid
pairs add coarse robustness votes, and the org placement (identity rotation,
mask-radius depth) is the do-nothing baseline. RANSAC wrapping matters under
correspondence outliers and barely helps the already-coarse part pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateGeometryError, InputError, NoConsensusError
from .model import QuadTemplate, FrameParams, PART_NAMES, pose_mesh, part_vertex_ids

_MIN_DEPTH = 1e-6

INIT_MODES = ("part", "pixel", "part+pixel", "org")
SOLVERS = ("epnp", "epnp-ransac")


@dataclass
class CameraFrame:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3,3) orthonormal, det +1
    translation: np.ndarray   # (3,)
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        w, h = self.image_size
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise InputError("principal point outside image")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-8:
            raise InputError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise InputError("camera rotation must have det +1")

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d, intrinsics, image_size) -> "CameraFrame":
        return cls(fx=intrinsics["fx"], fy=intrinsics["fy"],
                   cx=intrinsics["cx"], cy=intrinsics["cy"],
                   rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                   translation=np.array(d["translation"], dtype=np.float64),
                   image_size=tuple(image_size))


def project(cam: CameraFrame, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixels (K,2) and a per-point validity mask (depth > 0)."""
    pts = np.asarray(points, dtype=np.float64)
    pc = pts @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    pix = np.empty((pts.shape[0], 2))
    pix[:, 0] = cam.fx * pc[:, 0] / zs + cam.cx
    pix[:, 1] = cam.fy * pc[:, 1] / zs + cam.cy
    pix[~valid] = 0.0
    return pix, valid


def project_depths(cam: CameraFrame, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ cam.rotation[2] + cam.translation[2]


def unproject(cam: CameraFrame, pix: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Inverse of project at known camera-space depth."""
    pix = np.asarray(pix, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    xc = (pix[:, 0] - cam.cx) / cam.fx * depth
    yc = (pix[:, 1] - cam.cy) / cam.fy * depth
    pc = np.stack([xc, yc, depth], axis=1)
    return (pc - cam.translation) @ cam.rotation


def project_op(points: ad.Var, cam: CameraFrame,
               cam_delta: ad.Var = None) -> tuple[ad.Var, np.ndarray]:
    """Differentiable projection node; invalid points get zero gradient.

    `cam_delta` optionally perturbs the camera with 6 free parameters
    (axis-angle rotation delta composed onto the init rotation, plus a
    translation delta); gradients then flow into the delta as well.
    """
    from .model import rodrigues_with_jac

    points = ad.as_var(points)
    pts = points.value
    if cam_delta is not None:
        cam_delta = ad.as_var(cam_delta)
        dr = cam_delta.value[:3]
        Rd, dRd = rodrigues_with_jac(dr)
        R = Rd @ cam.rotation
        t = cam.translation + cam_delta.value[3:]
    else:
        R = cam.rotation
        t = cam.translation
    pc = pts @ R.T + t
    z = pc[:, 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    pix = np.empty((pts.shape[0], 2))
    pix[:, 0] = cam.fx * pc[:, 0] / zs + cam.cx
    pix[:, 1] = cam.fy * pc[:, 1] / zs + cam.cy
    pix[~valid] = 0.0

    def vjp(G):
        gx = G[:, 0] * cam.fx
        gy = G[:, 1] * cam.fy
        d_pc = np.zeros_like(pc)
        d_pc[:, 0] = gx / zs
        d_pc[:, 1] = gy / zs
        d_pc[:, 2] = -(gx * pc[:, 0] + gy * pc[:, 1]) / (zs * zs)
        d_pc[~valid] = 0.0
        d_points = d_pc @ R
        if cam_delta is None:
            return (d_points,)
        dL_dR = d_pc.T @ pts                      # (3,3)
        dL_dRd = dL_dR @ cam.rotation.T
        d_delta = np.empty(6)
        for i in range(3):
            d_delta[i] = (dRd[i] * dL_dRd).sum()
        d_delta[3:] = d_pc.sum(axis=0)
        return d_points, d_delta

    parents = (points,) if cam_delta is None else (points, cam_delta)
    return ad.custom(pix, parents, vjp, name="project"), valid


def apply_camera_delta(cam: CameraFrame, delta: np.ndarray) -> CameraFrame:
    """Concrete camera for a 6-vector (axis-angle, translation) delta."""
    from .model import rodrigues

    return CameraFrame(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                       rotation=rodrigues(delta[:3]) @ cam.rotation,
                       translation=cam.translation + delta[3:],
                       image_size=cam.image_size)


# ---------------------------------------------------------------------------
# EPnP


def _control_points(points: np.ndarray):
    """Centroid plus principal-axis control points; 3 of them for planar sets."""
    c0 = points.mean(axis=0)
    q = points - c0
    cov = q.T @ q / points.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = np.sqrt(np.maximum(evals, 0.0))
    if scale[0] <= 0.0 or scale[1] < 1e-9 * scale[0]:
        raise DegenerateGeometryError("degenerate control-point system (collinear points)")
    planar = scale[2] < 1e-6 * scale[0]
    n_dirs = 2 if planar else 3
    ctrl = [c0] + [c0 + scale[i] * evecs[:, i] for i in range(n_dirs)]
    return np.array(ctrl)


def _barycentric(points: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Coordinates alpha with points = alpha @ ctrl and rows summing to 1."""
    nc = ctrl.shape[0]
    basis = (ctrl[1:] - ctrl[0]).T            # 3 x (nc-1)
    rel = (points - ctrl[0]).T                # 3 x K
    coef, *_ = np.linalg.lstsq(basis, rel, rcond=None)
    alpha = np.empty((points.shape[0], nc))
    alpha[:, 1:] = coef.T
    alpha[:, 0] = 1.0 - coef.sum(axis=0)
    return alpha


def _solve_rigid(src: np.ndarray, dst: np.ndarray):
    """Rotation/translation with dst ~= R @ src + t (no scaling)."""
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    t = dc - R @ sc
    return R, t


def _rho(ctrl: np.ndarray) -> np.ndarray:
    nc = ctrl.shape[0]
    out = []
    for i in range(nc):
        for j in range(i + 1, nc):
            d = ctrl[i] - ctrl[j]
            out.append(d @ d)
    return np.array(out)


def _pair_diffs(V: np.ndarray, nc: int) -> np.ndarray:
    """(npairs, n_candidates, 3) control-point differences per null vector."""
    ctrl = V.T.reshape(V.shape[1], nc, 3)  # (n_cand, nc, 3)
    rows = []
    for i in range(nc):
        for j in range(i + 1, nc):
            rows.append(ctrl[:, i, :] - ctrl[:, j, :])
    return np.stack(rows, axis=0)


def _gauss_newton_betas(diffs, rho, betas, iters=8):
    """Refine betas so candidate control-point distances match rho."""
    n = betas.shape[0]
    for _ in range(iters):
        dv = np.einsum("pkd,k->pd", diffs, betas)
        res = np.einsum("pd,pd->p", dv, dv) - rho
        Jac = 2.0 * np.einsum("pd,pkd->pk", dv, diffs)
        try:
            step, *_ = np.linalg.lstsq(Jac, res, rcond=None)
        except np.linalg.LinAlgError:
            break
        betas = betas - step
    return betas


def _reproj_error(points3d, points2d, intr, R, t) -> float:
    cam = _intr_cam(intr, R, t)
    pix, valid = project(cam, points3d)
    if not valid.all():
        return np.inf
    return float(np.sqrt(((pix - points2d) ** 2).sum(axis=1)).mean())


def _intr_cam(intr, R, t) -> CameraFrame:
    fx, fy, cx, cy, size = intr
    return CameraFrame(fx=fx, fy=fy, cx=cx, cy=cy, rotation=R, translation=t, image_size=size)


def epnp(points3d: np.ndarray, points2d: np.ndarray, intrinsics) -> tuple[np.ndarray, np.ndarray, float]:
    """EPnP camera pose from 2D-3D correspondences.

    `intrinsics` is (fx, fy, cx, cy, (W, H)). Returns (rotation, translation,
    mean reprojection error in pixels). Needs K >= 6; raises
    DegenerateGeometryError when the control-point system is rank deficient.
    """
    pts3 = np.asarray(points3d, dtype=np.float64)
    pts2 = np.asarray(points2d, dtype=np.float64)
    K = pts3.shape[0]
    if K < 6:
        raise InputError(f"epnp needs at least 6 correspondences, got {K}")
    fx, fy, cx, cy, _ = intrinsics

    ctrl = _control_points(pts3)
    nc = ctrl.shape[0]
    alpha = _barycentric(pts3, ctrl)

    M = np.zeros((2 * K, 3 * nc))
    u = pts2[:, 0] - cx
    v = pts2[:, 1] - cy
    for j in range(nc):
        M[0::2, 3 * j] = alpha[:, j] * fx
        M[0::2, 3 * j + 2] = -alpha[:, j] * u
        M[1::2, 3 * j + 1] = alpha[:, j] * fy
        M[1::2, 3 * j + 2] = -alpha[:, j] * v

    MtM = M.T @ M
    evals, evecs = np.linalg.eigh(MtM)
    V = evecs[:, :4]  # candidates, smallest eigenvalues first

    rho = _rho(ctrl)
    diffs_all = _pair_diffs(V, nc)  # (npairs, 4, 3)

    best = None
    for n_b in (1, 2, 3):
        betas0 = _initial_betas(diffs_all, rho, n_b)
        if betas0 is None:
            continue
        betas = np.zeros(4)
        betas[:n_b] = betas0
        betas = _gauss_newton_betas(diffs_all, rho, betas)
        x = V @ betas
        ctrl_cam = x.reshape(nc, 3)
        pts_cam = alpha @ ctrl_cam
        if pts_cam[:, 2].mean() < 0:
            pts_cam = -pts_cam
        R, t = _solve_rigid(pts3, pts_cam)
        err = _reproj_error(pts3, pts2, intrinsics, R, t)
        if best is None or err < best[2]:
            best = (R, t, err)
    if best is None or not np.isfinite(best[2]):
        raise DegenerateGeometryError("epnp failed to produce a finite pose")
    return best


def _initial_betas(diffs, rho, n_b):
    """Closed-form beta seeds following the usual case split."""
    dots = {}
    for a in range(n_b):
        for b in range(a, n_b):
            dots[(a, b)] = np.einsum("pd,pd->p", diffs[:, a], diffs[:, b])
    if n_b == 1:
        denom = (dots[(0, 0)] ** 2).sum()
        if denom <= 0:
            return None
        b0 = np.sqrt(max((rho * dots[(0, 0)]).sum() / denom, 0.0))
        return np.array([b0])
    if n_b == 2:
        L = np.stack([dots[(0, 0)], 2 * dots[(0, 1)], dots[(1, 1)]], axis=1)
        sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
        b11, b12, b22 = sol
        b0 = np.sqrt(abs(b11))
        b1 = np.sqrt(abs(b22)) * (1.0 if b12 >= 0 else -1.0)
        if b11 < 0:
            return None
        return np.array([b0, b1])
    L = np.stack([dots[(0, 0)], 2 * dots[(0, 1)], dots[(1, 1)],
                  2 * dots[(0, 2)], 2 * dots[(1, 2)], dots[(2, 2)]], axis=1)
    if L.shape[0] < 6:
        return None
    sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
    b11, b12, b22, b13, b23, b33 = sol
    b0 = np.sqrt(abs(b11))
    b1 = np.sqrt(abs(b22)) * (1.0 if b12 >= 0 else -1.0)
    b2 = np.sqrt(abs(b33)) * (1.0 if b13 >= 0 else -1.0)
    return np.array([b0, b1, b2])


def ransac_pnp(points3d: np.ndarray, points2d: np.ndarray, intrinsics, *,
               iters: int = 256, inlier_px: float = 8.0, seed: int = 0,
               sample_pool: np.ndarray = None):
    """RANSAC-wrapped EPnP: best-consensus pose refit on its inliers.

    Returns (rotation, translation, inlier_mask). Deterministic for a fixed
    seed. Raises NoConsensusError when no sampled model reaches 6 inliers.

    `sample_pool` optionally restricts minimal-sample draws to a subset of
    correspondence indices (a precise stratum); consensus scoring and the
    final refit always use all correspondences.
    """
    if iters < 1:
        raise InputError("ransac iters must be >= 1")
    if inlier_px <= 0:
        raise InputError("inlier threshold must be positive")
    pts3 = np.asarray(points3d, dtype=np.float64)
    pts2 = np.asarray(points2d, dtype=np.float64)
    K = pts3.shape[0]
    if K < 6:
        raise InputError(f"ransac_pnp needs at least 6 correspondences, got {K}")
    pool = np.arange(K) if sample_pool is None else np.asarray(sample_pool, dtype=np.int64)
    if len(pool) < 6:
        raise InputError("ransac sample pool needs at least 6 correspondences")
    rng = np.random.default_rng(seed)
    fx, fy, cx, cy, size = intrinsics

    best_mask = None
    best_count = 0
    best_err = np.inf
    for _ in range(iters):
        sel = pool[rng.choice(len(pool), size=6, replace=False)]
        try:
            R, t, _ = epnp(pts3[sel], pts2[sel], intrinsics)
        except (DegenerateGeometryError, InputError):
            continue
        cam = _intr_cam(intrinsics, R, t)
        pix, valid = project(cam, pts3)
        err = np.sqrt(((pix - pts2) ** 2).sum(axis=1))
        mask = valid & (err < inlier_px)
        count = int(mask.sum())
        if count < 6:
            continue
        mean_err = float(err[mask].mean())
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_err = mean_err
            best_mask = mask
    if best_mask is None:
        raise NoConsensusError(f"no pose with >= 6 inliers after {iters} iterations")
    refit = best_mask.copy()
    if sample_pool is not None:
        in_pool = np.zeros(K, dtype=bool)
        in_pool[pool] = True
        if (best_mask & in_pool).sum() >= 6:
            refit = best_mask & in_pool
    R, t, _ = epnp(pts3[refit], pts2[refit], intrinsics)
    return R, t, best_mask


# ---------------------------------------------------------------------------
# per-frame initializer


def _org_camera(intrinsics, posed: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    """Identity-rotation placement: centroid on the optical axis at the depth
    where the mesh radius matches the mask radius."""
    fx, fy, cx, cy, size = intrinsics
    centroid = posed.mean(axis=0)
    r_mesh = np.linalg.norm(posed - centroid, axis=1).max()
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise InputError("org initialization needs a nonempty mask")
    mx, my = xs.mean() + 0.5, ys.mean() + 0.5
    r_px = np.sqrt(((xs + 0.5 - mx) ** 2 + (ys + 0.5 - my) ** 2)).max()
    r_px = max(r_px, 1.0)
    depth = r_mesh * 0.5 * (fx + fy) / r_px
    t = np.array([0.0, 0.0, depth]) - centroid
    return np.eye(3), t


def build_init_pairs(cues, template: QuadTemplate, init_params: FrameParams,
                     frame: int, mode: str):
    """2D-3D pairs for one frame: part samples pair with their part centroid,
    pixel correspondences pair with their template vertex.

    Returns (pts3, pts2, sample_pool): the pool indexes the pixel-type pairs
    when both strata are present, so RANSAC draws hypotheses from the precise
    stratum while scoring consensus over everything.
    """
    posed = pose_mesh(template, init_params)
    pts2, pts3 = [], []
    n_part = 0
    if mode in ("part", "part+pixel"):
        pix, labels, _ = cues.part_samples[frame]
        if len(pix) == 0 and mode == "part":
            raise InputError(f"frame {frame}: part samples missing for part-mode camera init")
        centroids = np.zeros((len(PART_NAMES), 3))
        for pi, pname in enumerate(PART_NAMES):
            ids = part_vertex_ids(template, pname)
            if len(ids):
                centroids[pi] = posed[ids].mean(axis=0)
        if len(pix):
            pts2.append(pix)
            pts3.append(centroids[labels])
            n_part = len(pix)
    if mode in ("pixel", "part+pixel"):
        pix, vids, _ = cues.pixel_corrs[frame]
        if len(pix) == 0 and mode == "pixel":
            raise InputError(f"frame {frame}: pixel correspondences missing for pixel-mode camera init")
        if len(pix):
            pts2.append(pix)
            pts3.append(posed[vids])
    if not pts2:
        raise InputError(f"frame {frame}: no cues available for mode {mode!r}")
    pts3 = np.concatenate(pts3, axis=0)
    pts2 = np.concatenate(pts2, axis=0)
    n_total = len(pts3)
    if mode == "part+pixel" and n_total - n_part >= 6:
        pool = np.arange(n_part, n_total)
    else:
        pool = np.arange(n_total)
    return pts3, pts2, pool


def init_cameras(cues, template: QuadTemplate, init_params: FrameParams, intrinsics,
                 mode: str = "part+pixel", solver: str = "epnp-ransac", *,
                 ransac_iters: int = 256, inlier_px: float = 8.0, seed: int = 0) -> list[CameraFrame]:
    """One CameraFrame per frame from cue correspondences.

    Frames whose solve fails inherit the previous frame's camera; a frame-0
    failure aborts the whole video.
    """
    if mode not in INIT_MODES:
        raise InputError(f"unknown camera init mode {mode!r}")
    if solver not in SOLVERS:
        raise InputError(f"unknown solver {solver!r}")
    fx, fy, cx, cy, size = intrinsics
    cams: list[CameraFrame] = []
    n_frames = cues.n_frames
    for f in range(n_frames):
        try:
            if mode == "org":
                posed = pose_mesh(template, init_params)
                R, t = _org_camera(intrinsics, posed, cues.masks[f].grid)
            else:
                pts3, pts2, pool = build_init_pairs(cues, template, init_params, f, mode)
                if solver == "epnp":
                    R, t, _ = epnp(pts3, pts2, intrinsics)
                else:
                    R, t, _ = ransac_pnp(pts3, pts2, intrinsics, iters=ransac_iters,
                                         inlier_px=inlier_px, seed=seed + f,
                                         sample_pool=pool)
            cam = _intr_cam(intrinsics, R, t)
        except (DegenerateGeometryError, NoConsensusError, InputError) as e:
            if not cams:
                kind = NoConsensusError if isinstance(e, NoConsensusError) else InputError
                raise kind(f"camera init failed on frame 0 with no fallback: {e}") from e
            cam = cams[-1]
        cams.append(cam)
    return cams
