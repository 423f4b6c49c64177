"""Silhouette and depth metrics between fitted meshes and reference data.

IoU is computed per frame between the rasterized fitted silhouette and the
reference mask; IoUw5 averages the worst 5% of frames (ceil(0.05*T) of them).
Depth metrics follow the median-ratio scale alignment: per frame the rendered
depth is divided by median(rendered/reference) over the joint foreground
before computing AbsRel and the delta-threshold accuracies, which makes them
invariant to any global depth scaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import QuadTemplate, pose_mesh
from .synth import rasterize_mesh

DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


@dataclass
class IoUResult:
    mean: float
    worst5: float
    per_frame: np.ndarray
    excluded: int = 0


@dataclass
class DepthResult:
    abs_rel: float
    deltas: tuple[float, float, float]
    per_frame_abs_rel: np.ndarray
    excluded: int = 0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 1.0


def worst_fraction_mean(values: np.ndarray, frac: float = 0.05) -> float:
    k = max(1, math.ceil(frac * len(values)))
    return float(np.sort(values)[:k].mean())


def iou_series(meshes, cams, reference_masks, faces: np.ndarray = None) -> IoUResult:
    """Per-frame silhouette IoU of posed meshes against reference masks.

    `meshes` is a list of (N,3) vertex arrays (or (verts, faces) tuples when
    `faces` is None). Frames with an empty reference mask are excluded and
    counted.
    """
    if len(meshes) != len(reference_masks) or len(cams) != len(reference_masks):
        raise InputError("iou_series: frame counts disagree")
    vals = []
    excluded = 0
    for mesh, cam, ref in zip(meshes, cams, reference_masks):
        verts, f = (mesh if faces is None else (mesh, faces))
        grid = ref.grid if hasattr(ref, "grid") else ref
        if not grid.any():
            excluded += 1
            continue
        _, fid = rasterize_mesh(verts, f, cam)
        vals.append(mask_iou(fid >= 0, grid))
    if not vals:
        raise InputError("iou_series: every reference mask was empty")
    vals = np.array(vals)
    return IoUResult(mean=float(vals.mean()), worst5=worst_fraction_mean(vals),
                     per_frame=vals, excluded=excluded)


def iou_for_params(template: QuadTemplate, params_list, cams, reference_masks) -> IoUResult:
    meshes = [pose_mesh(template, p) for p in params_list]
    return iou_series(meshes, cams, reference_masks, template.faces)


def depth_metrics(meshes, cams, reference_depths, faces: np.ndarray = None) -> DepthResult:
    """Scale-aligned depth error metrics over joint-foreground pixels.

    reference_depths are (T,H,W) with zero marking background; rendered depth
    comes from the same rasterizer as the silhouettes. Frames with empty
    joint foreground are excluded and counted.
    """
    if len(meshes) != len(reference_depths) or len(cams) != len(reference_depths):
        raise InputError("depth_metrics: frame counts disagree")
    abs_rels = []
    delta_hits = [[] for _ in DELTA_THRESHOLDS]
    excluded = 0
    for mesh, cam, ref in zip(meshes, cams, reference_depths):
        verts, f = (mesh if faces is None else (mesh, faces))
        zbuf, fid = rasterize_mesh(verts, f, cam)
        rendered = np.where(fid >= 0, zbuf, 0.0)
        joint = (rendered > 0) & (ref > 0)
        if not joint.any():
            excluded += 1
            continue
        ratio = rendered[joint] / ref[joint]
        scale = np.median(ratio)
        d = rendered[joint] / scale
        r = ref[joint]
        abs_rels.append(float(np.mean(np.abs(d - r) / r)))
        m = np.maximum(d / r, r / d)
        for i, thr in enumerate(DELTA_THRESHOLDS):
            delta_hits[i].append(float(np.mean(m < thr)))
    if not abs_rels:
        raise InputError("depth_metrics: no frame had joint foreground")
    abs_rels = np.array(abs_rels)
    deltas = tuple(float(np.mean(hits)) for hits in delta_hits)
    return DepthResult(abs_rel=float(abs_rels.mean()), deltas=deltas,
                       per_frame_abs_rel=abs_rels, excluded=excluded)


def depth_for_params(template: QuadTemplate, params_list, cams, reference_depths) -> DepthResult:
    meshes = [pose_mesh(template, p) for p in params_list]
    return depth_metrics(meshes, cams, reference_depths, template.faces)
