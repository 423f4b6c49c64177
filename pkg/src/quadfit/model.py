"""Articulated quadruped template: blendshapes + linear blend skinning.

The posing convention, for joint j with parent p and rest bone offset d_j:

    R_j^g = R_p^g @ rodrigues(theta_j)          (root: rodrigues(theta_root))
    t_j^g = R_p^g @ (s_j * d_j) + t_p^g         (root: s_root * d_root)

where s_j is the limb scale mapped to j (1 when unmapped). Skinning blends
joint transforms taken relative to the unscaled rest pose, so limb scales
translate the skinned surface along with the stretched skeleton and s=1
reproduces plain LBS bit for bit:

    v' = sum_j w_vj * (R_j^g @ (v - t_j^rest) + t_j^g) + translation

with v = rest + shape_basis . beta + vertex_offsets. Rotating theta_root by a
global R (and translation by R) rotates the output rigidly provided the root
rest offset is zero, which the bundled templates guarantee.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError

PART_NAMES = ("head", "body", "feet", "tail")


@dataclass
class QuadTemplate:
    """Rest mesh, skeleton, skin weights, shape basis, part labels, limits."""

    rest_vertices: np.ndarray          # (N,3)
    faces: np.ndarray                  # (F,3) int
    joint_parents: np.ndarray          # (J,) int, -1 for root
    joint_offsets: np.ndarray          # (J,3) rest bone vectors
    skin_weights: np.ndarray           # (N,J), rows sum to 1
    shape_basis: np.ndarray            # (K,N,3)
    part_labels: np.ndarray            # (N,) int index into PART_NAMES
    pose_limits: np.ndarray            # (J,3,2) [min,max] radians
    limb_scale_map: np.ndarray         # (J,) int, -1 = unscaled, else scale slot
    n_limb_scales: int
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = "quadruped"

    def __post_init__(self):
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.joint_parents = np.asarray(self.joint_parents, dtype=np.int64)
        self.joint_offsets = np.asarray(self.joint_offsets, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.pose_limits = np.asarray(self.pose_limits, dtype=np.float64)
        self.limb_scale_map = np.asarray(self.limb_scale_map, dtype=np.int64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64)
        self.validate()

    # basic sizes ----------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_parents.shape[0]

    @property
    def n_shapes(self) -> int:
        return self.shape_basis.shape[0]

    def validate(self) -> None:
        n, j = self.n_vertices, self.n_joints
        if self.skin_weights.shape != (n, j):
            raise InputError(f"skin_weights shape {self.skin_weights.shape} != ({n},{j})")
        if np.any(self.skin_weights < -1e-12):
            raise InputError("skin_weights must be nonnegative")
        if np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0)) > 1e-9:
            raise InputError("skin_weights rows must sum to 1")
        if self.faces.size and self.faces.max() >= n:
            raise InputError("face index out of range")
        for c, p in enumerate(self.joint_parents):
            if c == 0:
                if p != -1:
                    raise InputError("joint 0 must be the root (parent -1)")
            elif not 0 <= p < c:
                raise InputError(f"joint {c} parent {p} must precede it")
        if self.part_labels.shape != (n,):
            raise InputError("part_labels must label every vertex")
        if self.part_labels.min(initial=0) < 0 or self.part_labels.max(initial=0) >= len(PART_NAMES):
            raise InputError("part label out of range")
        if self.pose_limits.shape != (j, 3, 2):
            raise InputError("pose_limits must be (J,3,2)")
        if np.any(self.pose_limits[..., 0] > self.pose_limits[..., 1]):
            raise InputError("pose_limits min must be <= max")
        if self.limb_scale_map.shape != (j,):
            raise InputError("limb_scale_map must have one entry per joint")
        if self.limb_scale_map.max(initial=-1) >= self.n_limb_scales:
            raise InputError("limb_scale_map refers past n_limb_scales")

    def rest_joint_positions(self) -> np.ndarray:
        """Global joint positions in the unscaled rest pose."""
        cached = getattr(self, "_rest_joint_pos", None)
        if cached is not None:
            return cached
        pos = np.zeros((self.n_joints, 3))
        for c, p in enumerate(self.joint_parents):
            pos[c] = self.joint_offsets[c] + (pos[p] if p >= 0 else 0.0)
        object.__setattr__(self, "_rest_joint_pos", pos)
        return pos

    def body_length(self) -> float:
        ext = self.rest_vertices.max(axis=0) - self.rest_vertices.min(axis=0)
        return float(ext.max())


@dataclass
class FrameParams:
    """Per-frame pose state: shape coeffs, joint angles, limb scales, etc."""

    beta: np.ndarray           # (K,)
    theta: np.ndarray          # (J,3) axis-angle radians
    limb_scales: np.ndarray    # (L,) positive
    translation: np.ndarray    # (3,)
    vertex_offsets: np.ndarray  # (N,3)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.limb_scales = np.asarray(self.limb_scales, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.vertex_offsets = np.asarray(self.vertex_offsets, dtype=np.float64)
        if np.any(self.limb_scales <= 0.0):
            raise InputError("limb_scales must be positive")

    @classmethod
    def rest(cls, template: QuadTemplate) -> "FrameParams":
        return cls(beta=np.zeros(template.n_shapes),
                   theta=np.zeros((template.n_joints, 3)),
                   limb_scales=np.ones(template.n_limb_scales),
                   translation=np.zeros(3),
                   vertex_offsets=np.zeros((template.n_vertices, 3)))

    def copy(self) -> "FrameParams":
        return FrameParams(self.beta.copy(), self.theta.copy(), self.limb_scales.copy(),
                           self.translation.copy(), self.vertex_offsets.copy())


def _check_dims(template: QuadTemplate, params: FrameParams) -> None:
    checks = (("beta", params.beta.shape, (template.n_shapes,)),
              ("theta", params.theta.shape, (template.n_joints, 3)),
              ("limb_scales", params.limb_scales.shape, (template.n_limb_scales,)),
              ("translation", params.translation.shape, (3,)),
              ("vertex_offsets", params.vertex_offsets.shape, (template.n_vertices, 3)))
    for name, got, want in checks:
        if tuple(got) != want:
            raise InputError(f"params.{name} has shape {tuple(got)}, template expects {want}")


# ---------------------------------------------------------------------------
# Rodrigues rotation and its Jacobian

_SKEW_BASIS = np.zeros((3, 3, 3))
_SKEW_BASIS[0] = [[0, 0, 0], [0, 0, -1], [0, 1, 0]]
_SKEW_BASIS[1] = [[0, 0, 1], [0, 0, 0], [-1, 0, 0]]
_SKEW_BASIS[2] = [[0, -1, 0], [1, 0, 0], [0, 0, 0]]


def rodrigues(theta: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector."""
    return rodrigues_with_jac(theta)[0]


def rodrigues_batch(thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotations (J,3,3) and Jacobians dR/dtheta (J,3,3,3) for axis-angle rows.

    Series expansions of sin(phi)/phi and (1-cos(phi))/phi^2 in u = phi^2
    keep the Jacobian accurate through the phi -> 0 limit.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    J = thetas.shape[0]
    u = np.einsum("jd,jd->j", thetas, thetas)
    K = np.zeros((J, 3, 3))
    K[:, 0, 1] = -thetas[:, 2]
    K[:, 0, 2] = thetas[:, 1]
    K[:, 1, 0] = thetas[:, 2]
    K[:, 1, 2] = -thetas[:, 0]
    K[:, 2, 0] = -thetas[:, 1]
    K[:, 2, 1] = thetas[:, 0]
    K2 = K @ K

    small = u < 1e-5
    us = np.where(small, 1.0, u)  # guard the exact branch against /0
    phi = np.sqrt(us)
    s, c = np.sin(phi), np.cos(phi)
    a = np.where(small, 1.0 - u / 6.0 * (1.0 - u / 20.0 * (1.0 - u / 42.0)), s / phi)
    b = np.where(small, 0.5 * (1.0 - u / 12.0 * (1.0 - u / 30.0 * (1.0 - u / 56.0))),
                 (1.0 - c) / us)
    da = np.where(small, -1.0 / 6.0 + u / 60.0 - u * u / 1680.0,
                  (phi * c - s) / (2.0 * us * phi))
    db = np.where(small, -1.0 / 24.0 + u / 360.0 - u * u / 13440.0,
                  (phi * s - 2.0 * (1.0 - c)) / (2.0 * us * us))

    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    # dR[j,i] = 2 th[j,i] (da K + db K2) + a E_i + b (E_i K + K E_i)
    core = da[:, None, None] * K + db[:, None, None] * K2          # (J,3,3)
    EK = np.einsum("iab,jbc->jiac", _SKEW_BASIS, K)
    KE = np.einsum("jab,ibc->jiac", K, _SKEW_BASIS)
    dR = (2.0 * thetas[:, :, None, None] * core[:, None, :, :]
          + a[:, None, None, None] * _SKEW_BASIS[None]
          + b[:, None, None, None] * (EK + KE))
    return R, dR


def rodrigues_with_jac(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-rotation convenience wrapper around rodrigues_batch."""
    R, dR = rodrigues_batch(np.asarray(theta, dtype=np.float64).reshape(1, 3))
    return R[0], dR[0]


# ---------------------------------------------------------------------------
# forward kinematics + skinning


def _forward_transforms(template: QuadTemplate, theta: np.ndarray, scales: np.ndarray,
                        apply_limb_scales: bool = True):
    """Global joint rotations/positions plus local caches for the backward pass."""
    J = template.n_joints
    Rl, dRl = rodrigues_batch(theta)
    Rg = np.empty((J, 3, 3))
    tg = np.empty((J, 3))
    off = template.joint_offsets.copy()
    if apply_limb_scales:
        mapped = template.limb_scale_map >= 0
        off[mapped] *= scales[template.limb_scale_map[mapped]][:, None]
    for j in range(J):
        p = template.joint_parents[j]
        if p < 0:
            Rg[j] = Rl[j]
            tg[j] = off[j]
        else:
            Rg[j] = Rg[p] @ Rl[j]
            tg[j] = Rg[p] @ off[j] + tg[p]
    return Rl, dRl, Rg, tg, off


def _basis_flat(template: QuadTemplate) -> np.ndarray:
    cached = getattr(template, "_basis_flat", None)
    if cached is None:
        cached = template.shape_basis.reshape(template.n_shapes, -1)
        object.__setattr__(template, "_basis_flat", cached)
    return cached


def _pose_core(template: QuadTemplate, beta, theta, scales, translation, offsets,
               apply_limb_scales: bool = True):
    """Forward pose plus every intermediate the VJP needs."""
    n = template.n_vertices
    shaped = template.rest_vertices + (beta @ _basis_flat(template)).reshape(n, 3) + offsets
    Rl, dRl, Rg, tg, off = _forward_transforms(template, theta, scales, apply_limb_scales)
    t_rest = template.rest_joint_positions()
    b = tg - np.einsum("jab,jb->ja", Rg, t_rest)
    W = template.skin_weights
    # blend as a delta from the shaped vertices so the rest pose reproduces
    # them bit for bit (Rg - I and b are exactly zero there)
    Rdelta = Rg - np.eye(3)
    K = np.concatenate([Rdelta.reshape(-1, 9), b], axis=1)   # (J,12)
    blend = W @ K                                            # (N,12)
    sx, sy, sz = shaped[:, 0], shaped[:, 1], shaped[:, 2]
    posed = shaped + translation + np.stack([
        blend[:, 0] * sx + blend[:, 1] * sy + blend[:, 2] * sz + blend[:, 9],
        blend[:, 3] * sx + blend[:, 4] * sy + blend[:, 5] * sz + blend[:, 10],
        blend[:, 6] * sx + blend[:, 7] * sy + blend[:, 8] * sz + blend[:, 11],
    ], axis=1)
    cache = (shaped, Rl, dRl, Rg, tg, off, t_rest, blend)
    return posed, cache


def _pose_vjp(template: QuadTemplate, cache, G: np.ndarray, apply_limb_scales: bool = True):
    """Backward pass of _pose_core for upstream gradient G (N,3)."""
    shaped, Rl, dRl, Rg, tg, off, t_rest, blend = cache
    W = template.skin_weights
    J = template.n_joints
    n = template.n_vertices

    d_translation = G.sum(axis=0)
    gx, gy, gz = G[:, 0], G[:, 1], G[:, 2]
    sx, sy, sz = shaped[:, 0], shaped[:, 1], shaped[:, 2]
    # d(blend): columns 0..8 pair G rows with shaped columns, 9..11 copy G
    d_blend = np.stack([gx * sx, gx * sy, gx * sz,
                        gy * sx, gy * sy, gy * sz,
                        gz * sx, gz * sy, gz * sz,
                        gx, gy, gz], axis=1)
    dK = W.T @ d_blend                                       # (J,12)
    d_shaped = G + np.stack([
        gx * blend[:, 0] + gy * blend[:, 3] + gz * blend[:, 6],
        gx * blend[:, 1] + gy * blend[:, 4] + gz * blend[:, 7],
        gx * blend[:, 2] + gy * blend[:, 5] + gz * blend[:, 8],
    ], axis=1)

    dRg = dK[:, :9].reshape(J, 3, 3).copy()
    db = dK[:, 9:]
    # b_j = tg_j - Rg_j @ t_rest_j
    dRg -= db[:, :, None] * t_rest[:, None, :]
    dtg = db.copy()

    d_theta = np.zeros((J, 3))
    d_scales = np.zeros(template.n_limb_scales)
    dRl_flat = np.empty((J, 9))
    for j in range(J - 1, -1, -1):
        p = template.joint_parents[j]
        if p >= 0:
            dRl_j = Rg[p].T @ dRg[j]
            dRg[p] += dRg[j] @ Rl[j].T
            d_off = Rg[p].T @ dtg[j]
            dRg[p] += np.outer(dtg[j], off[j])
            dtg[p] += dtg[j]
        else:
            dRl_j = dRg[j]
            d_off = dtg[j]
        s_idx = template.limb_scale_map[j]
        if apply_limb_scales and s_idx >= 0:
            d_scales[s_idx] += d_off @ template.joint_offsets[j]
        dRl_flat[j] = dRl_j.reshape(9)
    # dL/dtheta_j,i = <dRl_j, dR_j[i]>
    d_theta = np.einsum("jik,jk->ji", dRl.reshape(J, 3, 9), dRl_flat)

    d_beta = _basis_flat(template) @ d_shaped.reshape(-1)
    d_offsets = d_shaped
    return d_beta, d_theta, d_scales, d_translation, d_offsets


def pose_mesh(template: QuadTemplate, params: FrameParams, *,
              apply_limb_scales: bool = True) -> np.ndarray:
    """Posed vertex positions (N,3) for one frame."""
    _check_dims(template, params)
    posed, _ = _pose_core(template, params.beta, params.theta, params.limb_scales,
                          params.translation, params.vertex_offsets, apply_limb_scales)
    return posed


def pose_mesh_op(template: QuadTemplate, beta: ad.Var, theta: ad.Var, scales: ad.Var,
                 translation: ad.Var, offsets: ad.Var) -> ad.Var:
    """Differentiable posing node for the fitting graph.

    theta is accepted flat (J*3,) or (J,3); gradients flow into all five
    inputs through a single fused vector-Jacobian product.
    """
    beta, theta, scales = ad.as_var(beta), ad.as_var(theta), ad.as_var(scales)
    translation, offsets = ad.as_var(translation), ad.as_var(offsets)
    theta_mat = theta.value.reshape(template.n_joints, 3)
    posed, cache = _pose_core(template, beta.value, theta_mat, scales.value,
                              translation.value, offsets.value)

    def vjp(G):
        d_beta, d_theta, d_scales, d_trans, d_off = _pose_vjp(template, cache, G)
        return d_beta, d_theta.reshape(theta.value.shape), d_scales, d_trans, d_off

    return ad.custom(posed, (beta, theta, scales, translation, offsets), vjp, name="pose_mesh")


def part_vertex_ids(template: QuadTemplate, part: str) -> np.ndarray:
    """All vertex indices labeled with `part` (head/body/feet/tail)."""
    if part not in PART_NAMES:
        raise InputError(f"unknown part label {part!r}; expected one of {PART_NAMES}")
    return np.flatnonzero(template.part_labels == PART_NAMES.index(part))


# ---------------------------------------------------------------------------
# template file I/O and OBJ export


def save_template(template: QuadTemplate, path) -> None:
    doc = {
        "name": template.name,
        "rest_vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "joints": [{"parent": int(p), "offset": template.joint_offsets[j].tolist()}
                   for j, p in enumerate(template.joint_parents)],
        "skin_weights": template.skin_weights.tolist(),
        "shape_basis": template.shape_basis.tolist(),
        "part_labels": [PART_NAMES[i] for i in template.part_labels],
        "pose_limits": template.pose_limits.tolist(),
        "limb_scale_map": template.limb_scale_map.tolist(),
        "n_limb_scales": template.n_limb_scales,
        "landmarks": template.landmarks.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_template(path) -> QuadTemplate:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read template {path}: {e}") from e
    try:
        labels = doc["part_labels"]
        bad = sorted({l for l in labels if l not in PART_NAMES})
        if bad:
            raise InputError(f"template {path}: unknown part labels {bad}")
        return QuadTemplate(
            rest_vertices=np.array(doc["rest_vertices"], dtype=np.float64),
            faces=np.array(doc["faces"], dtype=np.int64).reshape(-1, 3),
            joint_parents=np.array([j["parent"] for j in doc["joints"]], dtype=np.int64),
            joint_offsets=np.array([j["offset"] for j in doc["joints"]], dtype=np.float64),
            skin_weights=np.array(doc["skin_weights"], dtype=np.float64),
            shape_basis=np.array(doc["shape_basis"], dtype=np.float64),
            part_labels=np.array([PART_NAMES.index(l) for l in labels], dtype=np.int64),
            pose_limits=np.array(doc["pose_limits"], dtype=np.float64),
            limb_scale_map=np.array(doc["limb_scale_map"], dtype=np.int64),
            n_limb_scales=int(doc["n_limb_scales"]),
            landmarks=np.array(doc.get("landmarks", []), dtype=np.int64),
            name=doc.get("name", "quadruped"),
        )
    except KeyError as e:
        raise InputError(f"template {path} is missing field {e}") from e


def export_obj(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    """Write a posed mesh as Wavefront OBJ (1-based face indices)."""
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def save_params(path, params_list: list[FrameParams]) -> None:
    doc = {"frames": [{"beta": p.beta.tolist(), "theta": p.theta.tolist(),
                       "limb_scales": p.limb_scales.tolist(),
                       "translation": p.translation.tolist(),
                       "vertex_offsets": p.vertex_offsets.tolist()}
                      for p in params_list]}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_params(path) -> list[FrameParams]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read params {path}: {e}") from e
    out = []
    for i, rec in enumerate(doc["frames"]):
        try:
            out.append(FrameParams(beta=np.array(rec["beta"]),
                                   theta=np.array(rec["theta"]),
                                   limb_scales=np.array(rec["limb_scales"]),
                                   translation=np.array(rec["translation"]),
                                   vertex_offsets=np.array(rec["vertex_offsets"])))
        except KeyError as e:
            raise InputError(f"params {path} frame {i} missing field {e}") from e
    return out
