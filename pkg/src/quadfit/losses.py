"""Alignment losses between a posed mesh and 2D cues, plus regularizers.

Four levels: whole-silhouette Chamfer, semantic part samples, pixel-to-vertex
correspondences, and cross-frame tracks. Each has a graph-building op (used
by the fitting loop) and a plain float wrapper. Assignment choices (nearest
neighbors) are recomputed every call and treated as constants inside a step,
so gradients flow only through vertex positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .camera import CameraFrame, project_op
from .errors import InputError, NumericalError
from .kernels import nn_indices
from .model import QuadTemplate, FrameParams, pose_mesh_op

NO_PROJECTION_PENALTY = 1e4  # constant loss when every vertex is behind the camera

GEO_TERMS = ("obj", "part", "pix", "time")
REG_TERMS = ("lap", "vol", "arap", "prior", "limit", "betavar")


@dataclass
class LossWeights:
    """Multipliers for the geometric terms and regularizers.

    lambda_tex is accepted for config compatibility but pinned to zero; the
    texture path is out of scope here.
    """

    lambda_obj: float = 1.0
    lambda_part: float = 5e-4
    lambda_pix: float = 5.0
    lambda_time: float = 5e-4
    lambda_tex: float = 0.0
    w_lap: float = 1e-2
    w_vol: float = 1e-2
    w_arap: float = 1e-2
    w_prior: float = 1e-4
    w_limit: float = 1.0
    w_betavar: float = 0.0

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if v < 0:
                raise InputError(f"loss weight {name} must be nonnegative")
        self.lambda_tex = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"obj": self.lambda_obj, "part": self.lambda_part, "pix": self.lambda_pix,
                "time": self.lambda_time, "tex": self.lambda_tex, "lap": self.w_lap,
                "vol": self.w_vol, "arap": self.w_arap, "prior": self.w_prior,
                "limit": self.w_limit, "betavar": self.w_betavar}


@dataclass
class LossReport:
    values: dict[str, float]
    weighted: dict[str, float]
    total: float
    grad_norms: dict[str, float] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# mesh structure cache (adjacency, edges) per template


class _MeshStructure:
    def __init__(self, template: QuadTemplate):
        n = template.n_vertices
        f = template.faces
        pairs = set()
        for a, b, c in f:
            pairs.update(((a, b), (b, a), (b, c), (c, b), (a, c), (c, a)))
        if pairs:
            rows, cols = map(np.array, zip(*sorted(pairs)))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        deg = np.maximum(np.asarray(adj.sum(axis=1)).ravel(), 1.0)
        self.uniform_lap = sp.eye(n, format="csr") - sp.diags(1.0 / deg) @ adj
        self.uniform_lap_t = self.uniform_lap.T.tocsr()
        self.edge_src = rows     # directed edges, both orientations
        self.edge_dst = cols
        self.n_edges = len(rows)


def _structure(template: QuadTemplate) -> _MeshStructure:
    cached = getattr(template, "_mesh_structure", None)
    if cached is None:
        cached = _MeshStructure(template)
        object.__setattr__(template, "_mesh_structure", cached)
    return cached


# ---------------------------------------------------------------------------
# object level: symmetric Chamfer between mask samples and projected vertices


def sample_mask_pixels(mask, budget: int, seed: int, boundary: bool = False) -> np.ndarray:
    """Seeded uniform sample of foreground pixel centers (all of them when the
    budget covers the area). boundary=True restricts to pixels with a
    4-neighbor background pixel."""
    grid = mask.grid
    if boundary:
        pad = np.pad(grid, 1)
        interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        sel_grid = grid & ~interior
        if not sel_grid.any():
            sel_grid = grid
    else:
        sel_grid = grid
    ys, xs = np.nonzero(sel_grid)
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
    if len(pts) > budget:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(len(pts), size=budget, replace=False)]
    return pts


def chamfer_op(mask_pts: np.ndarray, proj: ad.Var, valid: np.ndarray):
    """Symmetric unsquared Chamfer: average of the two directional means.

    Returns (loss Var, flagged) where flagged marks the no-valid-projection
    fallback (constant penalty, zero gradient).
    """
    vidx = np.flatnonzero(valid)
    if len(vidx) == 0 or len(mask_pts) == 0:
        return ad.Var(NO_PROJECTION_PENALTY), True
    pv = proj[vidx]
    ref = pv.value
    fwd_idx = nn_indices(mask_pts, ref)
    bwd_idx = nn_indices(ref, mask_pts)
    fwd = ad.vmean(ad.rownorm(pv[fwd_idx] - mask_pts))
    bwd = ad.vmean(ad.rownorm(pv - mask_pts[bwd_idx]))
    return (fwd + bwd) * 0.5, False


def chamfer_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """O(n*m) double-loop oracle with the same symmetric-mean convention."""
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def loss_obj(mask, projected: np.ndarray, budget: int = 512, seed: int = 0, *,
             valid: np.ndarray = None, boundary: bool = False) -> float:
    """Silhouette Chamfer between sampled mask pixels and projected vertices."""
    if mask.area() == 0:
        raise InputError("loss_obj needs a nonempty mask")
    projected = np.asarray(projected, dtype=np.float64)
    if valid is None:
        valid = np.ones(len(projected), dtype=bool)
    pts = sample_mask_pixels(mask, budget, seed, boundary)
    val, _ = chamfer_op(pts, ad.Var(projected), valid)
    return float(val.value)


# ---------------------------------------------------------------------------
# part level


def part_loss_op(sample_pix: np.ndarray, sample_labels: np.ndarray, proj: ad.Var,
                 valid: np.ndarray, part_labels: np.ndarray):
    """Mean squared distance from each part sample to the nearest validly
    projected vertex of the same part. Samples whose part has no valid
    projection are excluded and counted."""
    terms = []
    excluded = 0
    assign = np.full(len(sample_pix), -1, dtype=np.int64)
    for part in np.unique(sample_labels):
        s_idx = np.flatnonzero(sample_labels == part)
        v_idx = np.flatnonzero((part_labels == part) & valid)
        if len(v_idx) == 0:
            excluded += len(s_idx)
            continue
        nn = nn_indices(sample_pix[s_idx], proj.value[v_idx])
        assign[s_idx] = v_idx[nn]
    used = assign >= 0
    if not used.any():
        return ad.Var(0.0), excluded, assign
    diffs = proj[assign[used]] - sample_pix[used]
    return ad.vmean(ad.sqnorm(diffs)), excluded, assign


def loss_part(samples, template: QuadTemplate, params: FrameParams, cam: CameraFrame) -> float:
    """Part-sample alignment for one frame (plain value)."""
    pix, labels, _ = samples
    if len(pix) == 0:
        raise InputError("loss_part needs nonempty part samples (run fallback_fill)")
    proj, valid = _project_frame(template, params, cam)
    val, _, _ = part_loss_op(pix, labels, proj, valid, template.part_labels)
    return float(val.value)


# ---------------------------------------------------------------------------
# pixel level


def pixel_loss_op(cue_pix: np.ndarray, vertex_ids: np.ndarray, proj: ad.Var,
                  valid: np.ndarray):
    """Mean squared distance between cue pixels and their designated vertex
    projections; invalidly projected entries are excluded and counted."""
    ok = valid[vertex_ids]
    excluded = int((~ok).sum())
    if not ok.any():
        return ad.Var(0.0), excluded
    diffs = proj[vertex_ids[ok]] - cue_pix[ok]
    return ad.vmean(ad.sqnorm(diffs)), excluded


def loss_pix(corrs, template: QuadTemplate, params: FrameParams, cam: CameraFrame) -> float:
    pix, vids, _ = corrs
    if len(pix) == 0:
        raise InputError("loss_pix needs nonempty correspondences (run fallback_fill)")
    proj, valid = _project_frame(template, params, cam)
    val, _ = pixel_loss_op(pix, vids, proj, valid)
    return float(val.value)


# ---------------------------------------------------------------------------
# temporal level


def assign_track_vertices(tracks, proj_by_frame: dict[int, np.ndarray],
                          valid_by_frame: dict[int, np.ndarray]):
    """Nearest validly-projected vertex to each trajectory at its anchor frame.

    Trajectories invalid at their anchor (or with no valid frames) get -1.
    """
    n = tracks.n_tracks
    assign = np.full(n, -1, dtype=np.int64)
    for anchor in np.unique(tracks.anchors):
        t_idx = np.flatnonzero(tracks.anchors == anchor)
        t_idx = t_idx[tracks.valid[t_idx, anchor]]
        if len(t_idx) == 0:
            continue
        proj = proj_by_frame[int(anchor)]
        valid = valid_by_frame[int(anchor)]
        v_idx = np.flatnonzero(valid)
        if len(v_idx) == 0:
            continue
        nn = nn_indices(tracks.positions[t_idx, anchor], proj[v_idx])
        assign[t_idx] = v_idx[nn]
    return assign


def track_loss_op(tracks, assign: np.ndarray, frames: list[int],
                  proj_vars: dict[int, ad.Var], valid_by_frame: dict[int, np.ndarray]):
    """Mean squared distance over all valid (trajectory, frame) pairs within
    `frames`, using the anchor-frame vertex assignment."""
    per_frame = []
    n_pairs = 0
    skipped = int((assign < 0).sum())
    for f in frames:
        ok = (assign >= 0) & tracks.valid[:, f]
        ok &= valid_by_frame[f][np.where(assign >= 0, assign, 0)] & (assign >= 0)
        t_idx = np.flatnonzero(ok)
        if len(t_idx) == 0:
            continue
        diffs = proj_vars[f][assign[t_idx]] - tracks.positions[t_idx, f]
        per_frame.append(ad.vsum(ad.sqnorm(diffs)))
        n_pairs += len(t_idx)
    if n_pairs == 0:
        return ad.Var(0.0), skipped, 0
    total = per_frame[0]
    for term in per_frame[1:]:
        total = total + term
    return total * (1.0 / n_pairs), skipped, n_pairs


def loss_time(tracks, template: QuadTemplate, params_list, cams) -> float:
    if tracks.n_tracks == 0:
        raise InputError("loss_time needs nonempty tracks")
    frames = list(range(len(params_list)))
    proj_vars, valids = {}, {}
    for f in frames:
        proj_vars[f], valids[f] = _project_frame(template, params_list[f], cams[f])
    proj_np = {f: v.value for f, v in proj_vars.items()}
    assign = assign_track_vertices(tracks, proj_np, valids)
    val, _, _ = track_loss_op(tracks, assign, frames, proj_vars, valids)
    return float(val.value)


# ---------------------------------------------------------------------------
# regularizers


def laplacian_residual_op(offsets: ad.Var, structure: _MeshStructure) -> ad.Var:
    """Mean squared uniform-Laplacian residual of the offset field."""
    L = structure.uniform_lap
    Lt = structure.uniform_lap_t
    offsets = ad.as_var(offsets)
    res = L @ offsets.value
    n = offsets.value.shape[0]
    val = (res * res).sum() / n

    def vjp(g):
        return ((2.0 * float(g) / n) * (Lt @ res),)

    return ad.custom(np.asarray(val), (offsets,), vjp, name="laplacian")


def mesh_volume_op(vertices: ad.Var, faces: np.ndarray) -> ad.Var:
    """Signed volume via the divergence theorem (sum of origin tetrahedra)."""
    vertices = ad.as_var(vertices)
    v = vertices.value
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    cross_bc = np.cross(b, c)
    vol = np.einsum("fd,fd->f", a, cross_bc).sum() / 6.0

    def vjp(g):
        gs = float(g) / 6.0
        grad = ad._scatter_add(v.shape, faces[:, 0], gs * cross_bc)
        grad += ad._scatter_add(v.shape, faces[:, 1], gs * np.cross(c, a))
        grad += ad._scatter_add(v.shape, faces[:, 2], gs * np.cross(a, b))
        return (grad,)

    return ad.custom(np.asarray(vol), (vertices,), vjp, name="volume")


def mesh_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    return float(mesh_volume_op(ad.Var(vertices), faces).value)


def arap_energy_op(offsets: ad.Var, rest: np.ndarray, structure: _MeshStructure) -> ad.Var:
    """As-rigid-as-possible energy of the offset field over 1-rings.

    Per-vertex rotations are fit by SVD each evaluation and held constant in
    the backward pass (they sit at the argmin, so the envelope theorem makes
    this the exact gradient).
    """
    offsets = ad.as_var(offsets)
    src, dst = structure.edge_src, structure.edge_dst
    if structure.n_edges == 0:
        return ad.Var(0.0)
    deformed = rest + offsets.value
    d_rest = rest[src] - rest[dst]
    d_def = deformed[src] - deformed[dst]
    n = rest.shape[0]
    S = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(3):
            S[:, a, b] = np.bincount(src, weights=d_rest[:, a] * d_def[:, b], minlength=n)
    U, _, Vt = np.linalg.svd(S)
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    R0 = V @ Ut
    det = (R0[:, 0, 0] * (R0[:, 1, 1] * R0[:, 2, 2] - R0[:, 1, 2] * R0[:, 2, 1])
           - R0[:, 0, 1] * (R0[:, 1, 0] * R0[:, 2, 2] - R0[:, 1, 2] * R0[:, 2, 0])
           + R0[:, 0, 2] * (R0[:, 1, 0] * R0[:, 2, 1] - R0[:, 1, 1] * R0[:, 2, 0]))
    flip = det < 0
    if flip.any():
        Vf = V.copy()
        Vf[flip, :, 2] = -Vf[flip, :, 2]
        R = Vf @ Ut
    else:
        R = R0
    e = d_def - (R[src] @ d_rest[:, :, None])[:, :, 0]
    m = structure.n_edges
    val = (e * e).sum() / m

    def vjp(g):
        gg = 2.0 * float(g) / m
        grad = ad._scatter_add(deformed.shape, src, gg * e)
        grad -= ad._scatter_add(deformed.shape, dst, gg * e)
        return (grad,)

    return ad.custom(np.asarray(val), (offsets,), vjp, name="arap")


def limit_penalty_op(theta: ad.Var, limits: np.ndarray) -> ad.Var:
    """Sum of softplus(theta - max) + softplus(min - theta) over joints."""
    theta = ad.as_var(theta)
    lo = limits[..., 0].reshape(-1)
    hi = limits[..., 1].reshape(-1)
    flat = ad.reshape(theta, (-1,))
    return ad.vsum(ad.softplus(flat - hi)) + ad.vsum(ad.softplus(lo - flat))


def regularizer_ops(template: QuadTemplate, beta: ad.Var, theta: ad.Var,
                    offsets: ad.Var) -> dict[str, ad.Var]:
    """Unweighted regularizer terms for one frame.

    The volume term is the squared relative deviation of the offset mesh's
    volume from the blendshaped mesh's, differentiable through both; ARAP
    measures the offset field against the template rest mesh. A constant
    all-zero offset field (the pre-gate stage) makes all three offset
    regularizers identically zero with zero gradients, so they short-circuit.
    """
    struct = _structure(template)
    beta, theta, offsets = ad.as_var(beta), ad.as_var(theta), ad.as_var(offsets)
    terms = {
        "prior": ad.vsum(ad.square(beta)),
        "limit": limit_penalty_op(theta, template.pose_limits),
    }
    if offsets.vjp is None and not offsets.parents and not offsets.value.any():
        zero = ad.Var(0.0)
        terms.update({"lap": zero, "vol": zero, "arap": zero})
        return terms
    n = template.n_vertices
    basis_flat = template.shape_basis.reshape(template.n_shapes, -1)
    shaped_beta = ad.reshape(ad.matmul(beta, basis_flat), (n, 3)) + template.rest_vertices
    shaped = shaped_beta + offsets
    vol_beta = mesh_volume_op(shaped_beta, template.faces)
    vol = mesh_volume_op(shaped, template.faces)
    rel_dev = (vol - vol_beta) / vol_beta
    terms.update({
        "lap": laplacian_residual_op(offsets, struct),
        "vol": ad.square(rel_dev),
        "arap": arap_energy_op(offsets, template.rest_vertices, struct),
    })
    return terms


def regularizers(template: QuadTemplate, params_list) -> dict[str, float]:
    """Mean unweighted regularizer values across frames (plain floats)."""
    if isinstance(params_list, FrameParams):
        params_list = [params_list]
    acc = {k: 0.0 for k in ("lap", "vol", "arap", "prior", "limit")}
    for p in params_list:
        terms = regularizer_ops(template, ad.Var(p.beta), ad.Var(p.theta),
                                ad.Var(p.vertex_offsets))
        for k, v in terms.items():
            acc[k] += float(v.value)
    n = len(params_list)
    return {k: v / n for k, v in acc.items()}


# ---------------------------------------------------------------------------
# total objective


def _project_frame(template, params: FrameParams, cam: CameraFrame):
    posed = pose_mesh_op(template, ad.Var(params.beta), ad.Var(params.theta),
                         ad.Var(params.limb_scales), ad.Var(params.translation),
                         ad.Var(params.vertex_offsets))
    return project_op(posed, cam)


def build_total_loss(cues, template: QuadTemplate, frames: list[int],
                     proj_vars: dict[int, ad.Var], valid_by_frame: dict[int, np.ndarray],
                     reg_terms_by_frame: list[dict[str, ad.Var]],
                     beta_vars: list[ad.Var], weights: LossWeights, *,
                     chamfer_budget: int = 512, chamfer_boundary: bool = False,
                     seed: int = 0, track_assign: np.ndarray = None,
                     mask_pts_by_frame: dict[int, np.ndarray] = None):
    """Assemble the weighted objective over a batch of frames.

    Every term is a mean over the batch, so the schedule's weight ratios
    are independent of batch size. Returns (total Var, term Vars, excluded
    counts, flags).
    """
    n = len(frames)
    terms: dict[str, ad.Var] = {}
    excluded = {"pix": 0, "part": 0, "time": 0}
    flags: list[str] = []

    def checked(term, f, v):
        if not np.isfinite(v.value):
            raise NumericalError(f"loss term {term!r} is not finite at frame {f}")
        return v

    obj_parts, part_parts, pix_parts = [], [], []
    for f in frames:
        proj, valid = proj_vars[f], valid_by_frame[f]
        if weights.lambda_obj > 0:
            if mask_pts_by_frame is not None:
                pts = mask_pts_by_frame[f]
            else:
                pts = sample_mask_pixels(cues.masks[f], chamfer_budget, seed * 7919 + f,
                                         chamfer_boundary)
            c, flagged = chamfer_op(pts, proj, valid)
            if flagged:
                flags.append(f"frame {f}: no valid projections for silhouette term")
            obj_parts.append(checked("obj", f, c))
        if weights.lambda_part > 0:
            pix, labels, _ = cues.part_samples[f]
            if len(pix):
                v, exc, _ = part_loss_op(pix, labels, proj, valid, template.part_labels)
                part_parts.append(checked("part", f, v))
                excluded["part"] += exc
        if weights.lambda_pix > 0:
            pix, vids, _ = cues.pixel_corrs[f]
            if len(pix):
                v, exc = pixel_loss_op(pix, vids, proj, valid)
                pix_parts.append(checked("pix", f, v))
                excluded["pix"] += exc

    def mean_of(parts):
        if not parts:
            return ad.Var(0.0)
        tot = parts[0]
        for p in parts[1:]:
            tot = tot + p
        return tot * (1.0 / len(parts))

    terms["obj"] = mean_of(obj_parts)
    terms["part"] = mean_of(part_parts)
    terms["pix"] = mean_of(pix_parts)

    if weights.lambda_time > 0 and cues.tracks.n_tracks > 0:
        if track_assign is None:
            proj_np = {f: proj_vars[f].value for f in frames}
            track_assign = assign_track_vertices(cues.tracks, proj_np, valid_by_frame)
        v, skipped, _ = track_loss_op(cues.tracks, track_assign, frames, proj_vars,
                                      valid_by_frame)
        terms["time"] = v
        excluded["time"] = skipped
    else:
        terms["time"] = ad.Var(0.0)

    for name in ("lap", "vol", "arap", "prior", "limit"):
        terms[name] = mean_of([rt[name] for rt in reg_terms_by_frame])

    if weights.w_betavar > 0 and n > 1:
        stacked = ad.concat([ad.reshape(b, (1, -1)) for b in beta_vars], axis=0)
        mean_b = ad.vmean(stacked, axis=0)
        terms["betavar"] = ad.vmean(ad.square(stacked - ad.reshape(mean_b, (1, -1))))
    else:
        terms["betavar"] = ad.Var(0.0)

    wmap = weights.as_dict()
    weighted = {k: terms[k] * wmap[k] for k in terms}
    total = None
    for k in list(GEO_TERMS) + list(REG_TERMS):
        total = weighted[k] if total is None else total + weighted[k]
    return total, terms, excluded, flags


def total_loss(cues, template: QuadTemplate, params_list, cams, weights: LossWeights, *,
               chamfer_budget: int = 512, chamfer_boundary: bool = False, seed: int = 0,
               with_grad_norms: bool = False) -> LossReport:
    """Weighted objective over all frames, with per-term values and optional
    per-term gradient norms (w.r.t. all frame parameters)."""
    frames = list(range(len(params_list)))
    param_vars = []
    proj_vars, valids, reg_terms, beta_vars = {}, {}, [], []
    for f, p in zip(frames, params_list):
        vb, vt = ad.Var(p.beta), ad.Var(p.theta)
        vs, vtr, vo = ad.Var(p.limb_scales), ad.Var(p.translation), ad.Var(p.vertex_offsets)
        param_vars.extend([vb, vt, vs, vtr, vo])
        posed = pose_mesh_op(template, vb, vt, vs, vtr, vo)
        proj_vars[f], valids[f] = project_op(posed, cams[f])
        reg_terms.append(regularizer_ops(template, vb, vt, vo))
        beta_vars.append(vb)
    total, terms, excluded, flags = build_total_loss(
        cues, template, frames, proj_vars, valids, reg_terms, beta_vars, weights,
        chamfer_budget=chamfer_budget, chamfer_boundary=chamfer_boundary, seed=seed)

    values = {}
    for k, v in terms.items():
        x = float(v.value)
        if not np.isfinite(x):
            raise NumericalError(f"loss term {k!r} is not finite")
        values[k] = x
    wmap = weights.as_dict()
    weighted = {k: wmap[k] * values[k] for k in values}
    grad_norms = {}
    if with_grad_norms:
        for k, v in terms.items():
            if wmap[k] == 0.0:
                grad_norms[k] = 0.0
                continue
            gs = ad.grad(v * wmap[k], param_vars)
            grad_norms[k] = float(np.sqrt(sum(float((g * g).sum()) for g in gs)))
    return LossReport(values=values, weighted=weighted, total=float(total.value),
                      grad_norms=grad_norms, excluded=excluded, flags=flags)
