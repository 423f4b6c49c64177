"""Synthetic scene generator: the ground-truth oracle for the whole pipeline.

Builds a procedural quadruped (a deformed icosphere with a 19-joint skeleton,
four limb scale slots, part labels and a small blendshape basis), animates it
with smooth joint curves, orbits a camera around it, and derives perfectly
self-consistent cue files: rasterized masks and part masks, pixel-to-vertex
correspondences of depth-visible vertices, and vertex tracks seeded at the
key frames. Optional Gaussian pixel noise, outlier replacement, and frame
dropout corrupt the cues on request. Fixed seeds give byte-identical scenes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraFrame, project, project_depths
from .cues import (ObjectMask, save_cue_files, save_manifest, write_depth_maps,
                   write_features, TRACK_ANCHORS_1BASED)
from .errors import InputError
from .kernels import rasterize
from .model import (FrameParams, QuadTemplate, PART_NAMES, pose_mesh,
                    save_params, save_template)


# ---------------------------------------------------------------------------
# procedural template

_LEG_DIRS = {
    "fl": np.array([0.48, -0.75, 0.5]),
    "fr": np.array([0.48, -0.75, -0.5]),
    "bl": np.array([-0.48, -0.75, 0.5]),
    "br": np.array([-0.48, -0.75, -0.5]),
}
_ELLIPSOID = np.array([1.1, 0.52, 0.42])
_LEG_DROP = 0.62
_HEAD_DIR = np.array([0.92, 0.38, 0.0])
_TAIL_DIR = np.array([-0.95, 0.3, 0.0])


def icosphere(subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere by repeated edge-midpoint subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def _angular_weight(units: np.ndarray, direction: np.ndarray, width: float) -> np.ndarray:
    d = direction / np.linalg.norm(direction)
    ang = np.arccos(np.clip(units @ d, -1.0, 1.0))
    return np.exp(-((ang / width) ** 2))


def _quadruped_surface(units: np.ndarray) -> np.ndarray:
    """Deform unit-sphere directions into a quadruped-shaped closed surface."""
    pts = units * _ELLIPSOID
    for name, d in _LEG_DIRS.items():
        w = _angular_weight(units, d, 0.34)
        sign_z = 1.0 if d[2] > 0 else -1.0
        pts = pts + w[:, None] * np.array([0.0, -_LEG_DROP, sign_z * 0.05])
    w = _angular_weight(units, _HEAD_DIR, 0.45)
    pts = pts + w[:, None] * np.array([0.55, 0.32, 0.0])
    w = _angular_weight(units, _TAIL_DIR, 0.28)
    pts = pts + w[:, None] * np.array([-0.5, 0.22, 0.0])
    # one small off-axis ear keeps the shape slightly asymmetric
    w = _angular_weight(units, np.array([0.8, 0.55, 0.28]), 0.17)
    pts = pts + w[:, None] * np.array([0.02, 0.12, 0.07])
    return pts


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def synthetic_template(subdivisions: int = 3) -> QuadTemplate:
    """Procedural ~600-vertex quadruped used by tests and the `synth` command."""
    units, faces = icosphere(subdivisions)
    verts = _quadruped_surface(units)

    def leg_anchor(key):
        d = _LEG_DIRS[key] / np.linalg.norm(_LEG_DIRS[key])
        s = d * _ELLIPSOID
        tip = s + np.array([0.0, -_LEG_DROP, np.sign(d[2]) * 0.05])
        return s, tip

    joints: list[tuple[int, np.ndarray]] = []   # (parent, position)
    names: list[str] = []

    def add(name, parent, pos):
        names.append(name)
        joints.append((parent, np.asarray(pos, dtype=np.float64)))
        return len(joints) - 1

    root = add("root", -1, [0.0, 0.0, 0.0])
    spine_f = add("spine_f", root, [0.5, 0.05, 0.0])
    neck = add("neck", spine_f, [0.95, 0.22, 0.0])
    head = add("head", neck, [1.35, 0.52, 0.0])
    spine_b = add("spine_b", root, [-0.5, 0.05, 0.0])
    tail1 = add("tail1", spine_b, [-1.0, 0.3, 0.0])
    tail2 = add("tail2", tail1, [-1.35, 0.45, 0.0])
    leg_joints: dict[str, list[int]] = {}
    for key, parent in (("fl", spine_f), ("fr", spine_f), ("bl", spine_b), ("br", spine_b)):
        s, tip = leg_anchor(key)
        hip = add(f"hip_{key}", parent, [s[0], s[1] * 0.6, s[2] * 0.85])
        knee = add(f"knee_{key}", hip, [tip[0], (s[1] * 0.6 + tip[1]) * 0.5, tip[2] * 0.95])
        foot = add(f"foot_{key}", knee, [tip[0], tip[1] + 0.03, tip[2]])
        leg_joints[key] = [hip, knee, foot]

    J = len(joints)
    parents = np.array([p for p, _ in joints], dtype=np.int64)
    positions = np.array([pos for _, pos in joints])
    offsets = positions - np.where(parents[:, None] >= 0, positions[np.maximum(parents, 0)], 0.0)

    # bone segments (parent position -> joint position); root is a point
    seg_a = np.where(parents[:, None] >= 0, positions[np.maximum(parents, 0)], positions)
    dists = np.stack([_segment_distances(verts, seg_a[j], positions[j]) for j in range(J)], axis=1)

    k = 3
    nearest = np.argsort(dists, axis=1)[:, :k]
    h = 0.22
    w = np.exp(-((np.take_along_axis(dists, nearest, axis=1) / h) ** 2))
    w = np.maximum(w, 1e-6)
    w /= w.sum(axis=1, keepdims=True)
    skin = np.zeros((len(verts), J))
    np.put_along_axis(skin, nearest, w, axis=1)

    nearest_bone = np.argmin(dists, axis=1)
    label_of_joint = np.full(J, PART_NAMES.index("body"), dtype=np.int64)
    label_of_joint[[neck, head]] = PART_NAMES.index("head")
    label_of_joint[[tail1, tail2]] = PART_NAMES.index("tail")
    for key in _LEG_DIRS:
        label_of_joint[leg_joints[key][2]] = PART_NAMES.index("feet")
    part_labels = label_of_joint[nearest_bone]

    head_center = positions[head]
    basis = np.zeros((6, len(verts), 3))
    basis[0, :, 0] = 0.12 * verts[:, 0]
    basis[1, :, 1] = 0.06 * (verts[:, 1] - 0.05)
    basis[1, :, 2] = 0.1 * verts[:, 2]
    g_head = np.exp(-(np.linalg.norm(verts - head_center, axis=1) / 0.45) ** 2)
    basis[2] = 0.4 * g_head[:, None] * (verts - head_center)
    g_leg = 1.0 / (1.0 + np.exp(-(-verts[:, 1] - 0.35) / 0.08))
    basis[3, :, 1] = -0.12 * g_leg
    g_tail = _angular_weight(units, _TAIL_DIR, 0.3)
    basis[4, :, 1] = 0.12 * g_tail
    g_belly = np.exp(-(np.linalg.norm(verts - np.array([0.0, -0.35, 0.0]), axis=1) / 0.5) ** 2)
    basis[5, :, 1] = -0.1 * g_belly

    limb_scale_map = np.full(J, -1, dtype=np.int64)
    for i, key in enumerate(("fl", "fr", "bl", "br")):
        limb_scale_map[leg_joints[key][1]] = i
        limb_scale_map[leg_joints[key][2]] = i

    limits = np.tile(np.array([-2.5, 2.5]), (J, 3, 1))

    landmarks = np.array([
        int(np.argmax(verts[:, 0])),                       # nose
        int(np.argmin(verts[:, 0])),                       # tail tip
        int(np.argmin(np.where((verts[:, 2] > 0.1) & (verts[:, 0] > 0.1),
                               verts[:, 1], np.inf))),     # front-left foot
        int(np.argmax(verts[:, 1])),                       # top of back
    ], dtype=np.int64)

    return QuadTemplate(rest_vertices=verts, faces=faces, joint_parents=parents,
                        joint_offsets=offsets, skin_weights=skin, shape_basis=basis,
                        part_labels=part_labels, pose_limits=limits,
                        limb_scale_map=limb_scale_map, n_limb_scales=4,
                        landmarks=landmarks, name="synthetic-quadruped")


# ---------------------------------------------------------------------------
# motion


@dataclass
class JointCurve:
    joint: int
    axis: int
    amplitude: float
    cycles: float
    phase: float = 0.0


@dataclass
class MotionSpec:
    curves: list[JointCurve] = field(default_factory=list)
    translation_amp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray | None = None

    def params_at(self, template: QuadTemplate, t: int, total: int) -> FrameParams:
        for c in self.curves:
            if not 0 <= c.joint < template.n_joints:
                raise InputError(f"motion curve names joint {c.joint}, template has "
                                 f"{template.n_joints}")
        p = FrameParams.rest(template)
        if self.beta is not None:
            p.beta = np.asarray(self.beta, dtype=np.float64).copy()
        u = t / max(total, 1)
        for c in self.curves:
            p.theta[c.joint, c.axis] += c.amplitude * np.sin(2 * np.pi * c.cycles * u + c.phase)
        p.translation = self.translation_amp * np.sin(2 * np.pi * u)
        return p


def default_motion(template: QuadTemplate, amplitude: float = 0.25) -> MotionSpec:
    """Trot-like gait: diagonal leg pairs in antiphase, neck bob, tail wag."""
    legs = {}
    for j in range(template.n_joints):
        s = template.limb_scale_map[j]
        if s >= 0:
            legs.setdefault(int(s), []).append(j)
    curves = []
    for leg_idx, js in sorted(legs.items()):
        phase = 0.0 if leg_idx in (0, 3) else np.pi
        hip = min(js) - 1
        curves.append(JointCurve(hip, 2, amplitude, 2.0, phase))
        curves.append(JointCurve(min(js), 2, amplitude * 0.6, 2.0, phase + np.pi / 2))
    curves.append(JointCurve(2, 2, amplitude * 0.5, 1.0, 0.3))   # neck
    curves.append(JointCurve(5, 1, amplitude * 0.8, 3.0, 0.0))   # tail wag
    curves.append(JointCurve(0, 1, amplitude * 0.25, 1.0, 0.0))  # slight root yaw
    return MotionSpec(curves=curves, translation_amp=np.array([0.06, 0.02, 0.06]))


def orbit_camera(t: int, total: int, intrinsics, *, radius: float = 3.4,
                 height: float = 0.9, arc_deg: float = 140.0,
                 start_deg: float = -20.0, target=np.zeros(3)) -> CameraFrame:
    fx, fy, cx, cy, size = intrinsics
    az = np.radians(start_deg + arc_deg * (t / max(total - 1, 1)))
    pos = np.asarray(target) + np.array([radius * np.sin(az), height, radius * np.cos(az)])
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    tvec = -R @ pos
    return CameraFrame(fx=fx, fy=fy, cx=cx, cy=cy, rotation=R, translation=tvec,
                       image_size=size)


# ---------------------------------------------------------------------------
# rasterization-backed cue derivation


def rasterize_mesh(vertices: np.ndarray, faces: np.ndarray, cam: CameraFrame):
    """(zbuf, face_id) at the camera's image size."""
    pix, _ = project(cam, vertices)
    depth = project_depths(cam, vertices)
    w, h = cam.image_size
    return rasterize(pix, depth, faces, w, h)


def rasterize_silhouette(vertices: np.ndarray, faces: np.ndarray, cam: CameraFrame) -> ObjectMask:
    """Depth-tested silhouette: any covered pixel is foreground."""
    _, fid = rasterize_mesh(vertices, faces, cam)
    return ObjectMask(fid >= 0)


def visible_vertices(vertices: np.ndarray, faces: np.ndarray, cam: CameraFrame,
                     zbuf: np.ndarray = None) -> np.ndarray:
    """Indices of depth-visible vertices (projection near the front surface)."""
    if zbuf is None:
        zbuf, _ = rasterize_mesh(vertices, faces, cam)
    pix, valid = project(cam, vertices)
    depth = project_depths(cam, vertices)
    w, h = cam.image_size
    xi = np.floor(pix[:, 0]).astype(int)
    yi = np.floor(pix[:, 1]).astype(int)
    ok = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    idx = np.flatnonzero(ok)
    buf = zbuf[yi[idx], xi[idx]]
    near = depth[idx] <= buf * (1.0 + 1e-3) + 1e-4
    return idx[near]


@dataclass
class NoiseSpec:
    sigma_px: float = 0.0        # Gaussian noise on pixel corrs and tracks
    outlier_frac: float = 0.0    # fraction of pixel corrs moved to random mask pixels
    dropout_frac: float = 0.0    # fraction of frames with emptied part/pixel cues

    def any(self) -> bool:
        return self.sigma_px > 0 or self.outlier_frac > 0 or self.dropout_frac > 0


def _face_part_labels(template: QuadTemplate) -> np.ndarray:
    lab = template.part_labels[template.faces]  # (F,3)
    out = np.empty(len(lab), dtype=np.int64)
    for i, row in enumerate(lab):
        vals, counts = np.unique(row, return_counts=True)
        out[i] = vals[np.argmax(counts)]
    return out


def _mask_feature(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    gh, gw = 8, 8
    hc, wc = (h // gh) * gh, (w // gw) * gw
    cells = grid[:hc, :wc].reshape(gh, hc // gh, gw, wc // gw).mean(axis=(1, 3))
    ys, xs = np.nonzero(grid)
    area = grid.mean()
    cx = xs.mean() / w if len(xs) else 0.0
    cy = ys.mean() / h if len(ys) else 0.0
    return np.concatenate([cells.reshape(-1), [cx, cy, area]])


def generate_scene(out_dir, template: QuadTemplate = None, *, frames: int = 20,
                   seed: int = 0, noise: NoiseSpec = None, motion: MotionSpec = None,
                   image_size=(256, 256), focal: float = 300.0,
                   orbit_radius: float = 3.4, orbit_height: float = 0.9,
                   orbit_arc_deg: float = 140.0, n_pixel_corrs: int = 300,
                   n_track_points: int = 500, pixel_corr_parts=None,
                   emit_features: bool = True, emit_depth: bool = True) -> dict:
    """Write a complete scene directory and return its manifest dict.

    `pixel_corr_parts` optionally restricts pixel correspondences to vertices
    of the named parts (dense-embedding predictors cover torso-like regions
    far better than extremities, and this mimics that spatial bias).
    """
    if frames < 1:
        raise InputError("frames must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if template is None:
        template = synthetic_template()
    if noise is None:
        noise = NoiseSpec()
    if motion is None:
        motion = default_motion(template)
    rng = np.random.default_rng(seed)
    w, h = image_size
    intr = (focal, focal, w / 2.0, h / 2.0, tuple(image_size))

    face_parts = _face_part_labels(template)
    gt_params, cams, posed_all = [], [], []
    for t in range(frames):
        p = motion.params_at(template, t, frames)
        cam = orbit_camera(t, frames, intr, radius=orbit_radius, height=orbit_height,
                           arc_deg=orbit_arc_deg)
        posed = pose_mesh(template, p)
        cam_pos = -cam.rotation.T @ cam.translation
        clearance = np.linalg.norm(posed - cam_pos, axis=1).min()
        if clearance < 0.2:
            raise InputError(f"camera path intersects the mesh at frame {t} "
                             f"(clearance {clearance:.3f})")
        gt_params.append(p)
        cams.append(cam)
        posed_all.append(posed)

    n_drop = int(round(noise.dropout_frac * frames))
    drop_frames = set(rng.choice(np.arange(1, frames), size=min(n_drop, frames - 1),
                                 replace=False).tolist()) if n_drop else set()

    masks, depth_maps = [], []
    part_masks = {p: [] for p in PART_NAMES}
    pixel_rows, track_rows = [], []
    feats = []
    anchors0 = [a - 1 for a in TRACK_ANCHORS_1BASED if a - 1 < frames]
    track_specs = []  # (traj_id, anchor0, vertex_id)
    next_traj = 0

    vis_cache = {}
    for t in range(frames):
        zbuf, fid = rasterize_mesh(posed_all[t], template.faces, cams[t])
        grid = fid >= 0
        masks.append(ObjectMask(grid))
        dm = np.where(grid, zbuf, 0.0)
        depth_maps.append(dm)
        pix_part = np.where(grid, face_parts[np.maximum(fid, 0)], -1)
        for pi, pname in enumerate(PART_NAMES):
            part_grid = pix_part == pi if t not in drop_frames else np.zeros_like(grid)
            part_masks[pname].append(ObjectMask(part_grid))
        if emit_features:
            feats.append(_mask_feature(grid))
        vis_cache[t] = (zbuf, visible_vertices(posed_all[t], template.faces, cams[t], zbuf))

    mask_pixel_centers = {}
    for t in range(frames):
        ys, xs = np.nonzero(masks[t].grid)
        mask_pixel_centers[t] = np.stack([xs + 0.5, ys + 0.5], axis=1)

    corr_pool_mask = np.ones(template.n_vertices, dtype=bool)
    if pixel_corr_parts is not None:
        corr_pool_mask[:] = False
        for pname in pixel_corr_parts:
            if pname not in PART_NAMES:
                raise InputError(f"unknown part {pname!r} in pixel_corr_parts")
            corr_pool_mask[template.part_labels == PART_NAMES.index(pname)] = True

    for t in range(frames):
        if t in drop_frames:
            continue
        _, vis = vis_cache[t]
        vis = vis[corr_pool_mask[vis]]
        take = min(n_pixel_corrs, len(vis))
        sel = rng.choice(vis, size=take, replace=False)
        pix, _ = project(cams[t], posed_all[t][sel])
        if noise.sigma_px > 0:
            pix = pix + rng.normal(scale=noise.sigma_px, size=pix.shape)
        if noise.outlier_frac > 0:
            n_out = int(round(noise.outlier_frac * take))
            if n_out:
                which = rng.choice(take, size=n_out, replace=False)
                centers = mask_pixel_centers[t]
                pix[which] = centers[rng.integers(0, len(centers), size=n_out)]
        inb = (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
        inb &= masks[t].contains(pix)
        for v, (x, y), ok in zip(sel, pix, inb):
            if ok:
                pixel_rows.append((t, x, y, int(v), 1.0))

    for a in anchors0:
        _, vis = vis_cache[a]
        pix_a, _ = project(cams[a], posed_all[a][vis])
        vis = vis[masks[a].contains(pix_a)]
        take = min(n_track_points, len(vis))
        sel = rng.choice(vis, size=take, replace=False)
        for v in sel:
            track_specs.append((next_traj, a, int(v)))
            next_traj += 1
    for traj_id, anchor0, v in track_specs:
        for t in range(frames):
            pix, valid = project(cams[t], posed_all[t][v:v + 1])
            x, y = pix[0]
            if noise.sigma_px > 0:
                x += rng.normal(scale=noise.sigma_px)
                y += rng.normal(scale=noise.sigma_px)
            ok = bool(valid[0]) and 0 <= x < w and 0 <= y < h and masks[t].grid[int(y), int(x)]
            track_rows.append((traj_id, anchor0 + 1, t, x, y, int(ok)))

    save_template(template, out_dir / "template.json")
    save_cue_files(out_dir, masks, part_masks, pixel_rows, track_rows)
    save_params(out_dir / "gt_params.json", gt_params)
    manifest = {
        "frames": frames,
        "image_size": list(image_size),
        "intrinsics": {"fx": intr[0], "fy": intr[1], "cx": intr[2], "cy": intr[3]},
        "template": "template.json",
        "masks": "masks.rle",
        "part_masks": {p: f"part_{p}.rle" for p in PART_NAMES},
        "pixel_corrs": "pixel_corrs.csv",
        "tracks": "tracks.csv",
        "gt_params": "gt_params.json",
        "cameras": [c.to_dict() for c in cams],
        "seed": seed,
        "noise": {"sigma_px": noise.sigma_px, "outlier_frac": noise.outlier_frac,
                  "dropout_frac": noise.dropout_frac},
    }
    if emit_features:
        write_features(out_dir / "features.f32", np.array(feats))
        manifest["features"] = "features.f32"
    if emit_depth:
        write_depth_maps(out_dir / "depth.f32", np.array(depth_maps))
        manifest["depth"] = "depth.f32"
    save_manifest(manifest, out_dir)
    manifest["_dir"] = str(out_dir)
    return manifest
