"""Cue ingestion: masks, part samples, pixel correspondences, point tracks.

Scene manifest is a JSON document naming the per-family files:

    masks           RLE text, one line per frame: "W H run,run,..." where runs
                    alternate background/foreground starting with background,
                    over row-major pixel order (index = y * W + x)
    part_masks      same RLE, one file per part (head/body/feet/tail)
    pixel_corrs     CSV frame,x,y,vertex_id,confidence
    tracks          CSV traj_id,anchor,frame,x,y,valid (anchor is 1-based)
    features        optional binary: uint32 LE frame count + dimension header,
                    then frame-major float32 payload
    depth           optional binary float32 grids with a uint32 (W,H) header
    part_confidences optional CSV frame,part,confidence (defaults to 1.0)

Loading validates structure (hard errors carry file and frame locations),
applies the confidence and inside-mask filters, and reports filtered counts.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import PART_NAMES

TRACK_ANCHORS_1BASED = (1, 51, 101, 151)
DEFAULT_PART_SAMPLES = 200          # per-frame part sample budget
PART_CONF_THRESHOLD = 0.3           # feet/tail masks below this are dropped
PIXEL_CONF_THRESHOLD = 0.5          # pixel correspondences below this are dropped
DEFAULT_TRACK_POINTS = 500          # per anchor frame


@dataclass
class ObjectMask:
    grid: np.ndarray  # (H,W) bool

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    def area(self) -> int:
        return int(self.grid.sum())

    def contains(self, pix: np.ndarray) -> np.ndarray:
        """Membership of continuous pixel coordinates (floor to cell)."""
        if len(pix) == 0:
            return np.zeros(0, dtype=bool)
        x = np.floor(pix[:, 0]).astype(np.int64)
        y = np.floor(pix[:, 1]).astype(np.int64)
        ok = (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)
        out = np.zeros(len(pix), dtype=bool)
        out[ok] = self.grid[y[ok], x[ok]]
        return out


def rle_encode(grid: np.ndarray) -> str:
    h, w = grid.shape
    flat = np.asarray(grid, dtype=bool).reshape(-1)
    # runs alternate starting with background
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return f"{w} {h} " + ",".join(str(r) for r in runs)


def rle_decode(line: str, where: str = "") -> ObjectMask:
    try:
        head, runs_s = line.strip().split(" ", 2)[0:2], line.strip().split(" ", 2)[2]
        w, h = int(head[0]), int(head[1])
        runs = [int(r) for r in runs_s.split(",")] if runs_s else []
    except (ValueError, IndexError) as e:
        raise InputError(f"corrupt RLE line {where}: {e}") from e
    total = sum(runs)
    if total != w * h or any(r < 0 for r in runs):
        raise InputError(f"RLE {where} decodes to {total} bits, expected {w * h}")
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    fg = False
    for r in runs:
        if fg:
            flat[pos:pos + r] = True
        pos += r
        fg = not fg
    return ObjectMask(flat.reshape(h, w))


def read_mask_file(path, n_frames: int) -> list[ObjectMask]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) != n_frames:
        raise InputError(f"{path}: has {len(lines)} frames, manifest says {n_frames}")
    return [rle_decode(ln, where=f"{path}:{i}") for i, ln in enumerate(lines)]


def write_mask_file(path, masks) -> None:
    with open(path, "w") as fh:
        for m in masks:
            fh.write(rle_encode(m.grid if isinstance(m, ObjectMask) else m) + "\n")


# ---------------------------------------------------------------------------
# cue container

Frame2D = tuple[np.ndarray, np.ndarray, np.ndarray]  # pixels, ids/labels, confidence


@dataclass
class TrackSet:
    anchors: np.ndarray      # (n,) 0-based anchor frame
    positions: np.ndarray    # (n,T,2)
    valid: np.ndarray        # (n,T) bool

    @property
    def n_tracks(self) -> int:
        return self.anchors.shape[0]


@dataclass
class CueSet:
    n_frames: int
    image_size: tuple[int, int]
    masks: list[ObjectMask]
    part_samples: list[Frame2D]       # per frame (pix, part label idx, conf)
    pixel_corrs: list[Frame2D]        # per frame (pix, vertex id, conf)
    tracks: TrackSet
    inherited_parts: np.ndarray = None   # bool per frame, set by fallback_fill
    inherited_pixels: np.ndarray = None
    load_report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inherited_parts is None:
            self.inherited_parts = np.zeros(self.n_frames, dtype=bool)
        if self.inherited_pixels is None:
            self.inherited_pixels = np.zeros(self.n_frames, dtype=bool)


def sample_part_points(part_masks: dict[str, ObjectMask], n_samples: int,
                       seed: int) -> Frame2D:
    """Uniform in-mask samples allocated per part proportionally to area.

    Counts are round(n * area / total) with the rounding residual assigned to
    the largest part; points are drawn uniformly over each part's pixels
    (with replacement) and positioned at pixel centers.
    """
    if n_samples < 4:
        raise InputError("part sampling needs a budget of at least 4")
    areas = {p: m.area() for p, m in part_masks.items()}
    total = sum(areas.values())
    if total == 0:
        return (np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(0))
    present = [p for p in PART_NAMES if areas.get(p, 0) > 0]
    counts = {p: int(round(n_samples * areas[p] / total)) for p in present}
    largest = max(present, key=lambda p: areas[p])
    counts[largest] += n_samples - sum(counts.values())
    rng = np.random.default_rng(seed)
    pix_out, lab_out = [], []
    for p in present:
        k = counts[p]
        if k <= 0:
            continue
        ys, xs = np.nonzero(part_masks[p].grid)
        sel = rng.integers(0, len(xs), size=k)
        pts = np.stack([xs[sel] + 0.5, ys[sel] + 0.5], axis=1).astype(np.float64)
        pix_out.append(pts)
        lab_out.append(np.full(k, PART_NAMES.index(p), dtype=np.int64))
    pix = np.concatenate(pix_out, axis=0)
    labels = np.concatenate(lab_out, axis=0)
    return pix, labels, np.ones(len(pix))


def fallback_fill(cues: CueSet) -> CueSet:
    """Copy the previous frame's part samples / pixel correspondences into any
    frame where they are empty, flagging the frame as inherited."""
    if len(cues.part_samples[0][0]) == 0:
        raise InputError("frame 0 has no part samples; nothing to inherit from")
    if len(cues.pixel_corrs[0][0]) == 0:
        raise InputError("frame 0 has no pixel correspondences; nothing to inherit from")
    parts = list(cues.part_samples)
    pixels = list(cues.pixel_corrs)
    inherited_p = cues.inherited_parts.copy()
    inherited_x = cues.inherited_pixels.copy()
    for f in range(1, cues.n_frames):
        if len(parts[f][0]) == 0:
            parts[f] = tuple(a.copy() for a in parts[f - 1])
            inherited_p[f] = True
        if len(pixels[f][0]) == 0:
            pixels[f] = tuple(a.copy() for a in pixels[f - 1])
            inherited_x[f] = True
    return CueSet(n_frames=cues.n_frames, image_size=cues.image_size, masks=cues.masks,
                  part_samples=parts, pixel_corrs=pixels, tracks=cues.tracks,
                  inherited_parts=inherited_p, inherited_pixels=inherited_x,
                  load_report=dict(cues.load_report))


# ---------------------------------------------------------------------------
# manifest + scene loading


def load_manifest(scene_dir) -> dict:
    scene_dir = Path(scene_dir)
    path = scene_dir / "manifest.json" if scene_dir.is_dir() else scene_dir
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read manifest {path}: {e}") from e
    for key in ("frames", "image_size", "intrinsics", "masks", "part_masks",
                "pixel_corrs", "tracks", "template"):
        if key not in doc:
            raise InputError(f"manifest {path} is missing field {key!r}")
    doc["_dir"] = str(path.parent)
    return doc


def save_manifest(doc: dict, scene_dir) -> None:
    out = {k: v for k, v in doc.items() if not k.startswith("_")}
    with open(Path(scene_dir) / "manifest.json", "w") as fh:
        json.dump(out, fh, sort_keys=True, indent=1)


def _read_pixel_corrs(path, n_frames, n_vertices, image_size, masks, report):
    per_frame = [[] for _ in range(n_frames)]
    w, h = image_size
    with open(path) as fh:
        rdr = csv.reader(fh)
        header = next(rdr, None)
        for lineno, row in enumerate(rdr, start=2):
            if not row:
                continue
            try:
                f, x, y, vid, conf = int(row[0]), float(row[1]), float(row[2]), int(row[3]), float(row[4])
            except (ValueError, IndexError) as e:
                raise InputError(f"{path}:{lineno}: bad pixel correspondence row: {e}") from e
            if not 0 <= f < n_frames:
                raise InputError(f"{path}:{lineno}: frame {f} out of range")
            if not 0 <= vid < n_vertices:
                raise InputError(f"{path}:{lineno}: vertex_id {vid} out of range (N={n_vertices})")
            if not (0 <= x < w and 0 <= y < h):
                raise InputError(f"{path}:{lineno}: pixel ({x},{y}) outside image")
            per_frame[f].append((x, y, vid, conf))
    out = []
    for f in range(n_frames):
        rows = np.array(per_frame[f], dtype=np.float64).reshape(-1, 4)
        pix = rows[:, 0:2]
        vids = rows[:, 2].astype(np.int64)
        conf = rows[:, 3]
        keep = conf > PIXEL_CONF_THRESHOLD
        report["pixel_conf_filtered"] += int((~keep).sum())
        inside = masks[f].contains(pix)
        drop_outside = keep & ~inside
        report["pixel_outside_mask_filtered"] += int(drop_outside.sum())
        keep &= inside
        out.append((pix[keep], vids[keep], conf[keep]))
    return out


def _read_tracks(path, n_frames, masks, report) -> TrackSet:
    rows_by_id: dict[int, dict] = {}
    with open(path) as fh:
        rdr = csv.reader(fh)
        next(rdr, None)
        for lineno, row in enumerate(rdr, start=2):
            if not row:
                continue
            try:
                tid, anchor, f, x, y, valid = (int(row[0]), int(row[1]), int(row[2]),
                                               float(row[3]), float(row[4]), int(row[5]))
            except (ValueError, IndexError) as e:
                raise InputError(f"{path}:{lineno}: bad track row: {e}") from e
            if anchor not in TRACK_ANCHORS_1BASED or anchor > n_frames:
                raise InputError(f"{path}:{lineno}: anchor {anchor} not a valid key frame")
            if not 0 <= f < n_frames:
                raise InputError(f"{path}:{lineno}: frame {f} out of range")
            rec = rows_by_id.setdefault(tid, {"anchor": anchor - 1,
                                              "pos": np.zeros((n_frames, 2)),
                                              "valid": np.zeros(n_frames, dtype=bool)})
            rec["pos"][f] = (x, y)
            rec["valid"][f] = bool(valid)
    anchors, positions, valids = [], [], []
    for tid in sorted(rows_by_id):
        rec = rows_by_id[tid]
        ok = rec["valid"]
        if not ok.any():
            report["tracks_empty_dropped"] += 1
            continue
        inside = np.ones(n_frames, dtype=bool)
        idx = np.flatnonzero(ok)
        inside_chk = np.array([masks[f].contains(rec["pos"][f:f + 1])[0] for f in idx])
        if not inside_chk.all():
            report["tracks_outside_mask_dropped"] += 1
            continue
        anchors.append(rec["anchor"])
        positions.append(rec["pos"])
        valids.append(ok)
    if anchors:
        return TrackSet(np.array(anchors, dtype=np.int64), np.stack(positions), np.stack(valids))
    return TrackSet(np.zeros(0, dtype=np.int64), np.zeros((0, n_frames, 2)),
                    np.zeros((0, n_frames), dtype=bool))


def _read_part_confidences(path, n_frames) -> dict[tuple[int, str], float]:
    conf = {}
    with open(path) as fh:
        rdr = csv.reader(fh)
        next(rdr, None)
        for lineno, row in enumerate(rdr, start=2):
            if not row:
                continue
            try:
                f, part, c = int(row[0]), row[1].strip(), float(row[2])
            except (ValueError, IndexError) as e:
                raise InputError(f"{path}:{lineno}: bad confidence row: {e}") from e
            if part not in PART_NAMES:
                raise InputError(f"{path}:{lineno}: unknown part {part!r}")
            conf[(f, part)] = c
    return conf


def load_cues(manifest, n_vertices: int, *, part_sample_budget: int = DEFAULT_PART_SAMPLES,
              seed: int = 0) -> CueSet:
    """Load and validate every cue family referenced by a manifest.

    `manifest` is a path or an already-parsed manifest dict. Structural
    violations raise InputError with file and frame locations; soft
    violations (confidence, inside-mask) are filtered and counted in
    cues.load_report.
    """
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    base = Path(manifest["_dir"])
    n_frames = int(manifest["frames"])
    image_size = tuple(manifest["image_size"])
    report = {"pixel_conf_filtered": 0, "pixel_outside_mask_filtered": 0,
              "tracks_outside_mask_dropped": 0, "tracks_empty_dropped": 0,
              "part_masks_low_conf": 0}

    masks = read_mask_file(base / manifest["masks"], n_frames)
    for f, m in enumerate(masks):
        if (m.width, m.height) != image_size:
            raise InputError(f"mask frame {f}: size {(m.width, m.height)} != manifest {image_size}")
        if m.area() == 0:
            raise InputError(f"mask frame {f} has no foreground")

    part_mask_files = manifest["part_masks"]
    missing = [p for p in PART_NAMES if p not in part_mask_files]
    if missing:
        raise InputError(f"manifest part_masks missing parts {missing}")
    part_masks = {p: read_mask_file(base / part_mask_files[p], n_frames) for p in PART_NAMES}

    part_conf = {}
    if manifest.get("part_confidences"):
        part_conf = _read_part_confidences(base / manifest["part_confidences"], n_frames)

    part_samples = []
    for f in range(n_frames):
        frame_masks = {}
        for p in PART_NAMES:
            c = part_conf.get((f, p), 1.0)
            if p in ("feet", "tail") and c <= PART_CONF_THRESHOLD:
                if part_masks[p][f].area() > 0:
                    report["part_masks_low_conf"] += 1
                continue
            frame_masks[p] = part_masks[p][f]
        part_samples.append(sample_part_points(frame_masks, part_sample_budget,
                                               seed=seed * 100003 + f))

    pixel_corrs = _read_pixel_corrs(base / manifest["pixel_corrs"], n_frames,
                                    n_vertices, image_size, masks, report)
    tracks = _read_tracks(base / manifest["tracks"], n_frames, masks, report)

    return CueSet(n_frames=n_frames, image_size=image_size, masks=masks,
                  part_samples=part_samples, pixel_corrs=pixel_corrs, tracks=tracks,
                  load_report=report)


def save_cue_files(scene_dir, masks, part_masks, pixel_rows, track_rows) -> None:
    """Write the cue files referenced by a manifest (used by the generator)."""
    scene_dir = Path(scene_dir)
    write_mask_file(scene_dir / "masks.rle", masks)
    for p in PART_NAMES:
        write_mask_file(scene_dir / f"part_{p}.rle", part_masks[p])
    with open(scene_dir / "pixel_corrs.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "x", "y", "vertex_id", "confidence"])
        for row in pixel_rows:
            wr.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", row[3], f"{row[4]:.3f}"])
    with open(scene_dir / "tracks.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["traj_id", "anchor", "frame", "x", "y", "valid"])
        for row in track_rows:
            wr.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", f"{row[4]:.6f}", row[5]])


# ---------------------------------------------------------------------------
# binary sidecars


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise InputError(f"{path}: truncated feature header")
        t, d = struct.unpack("<II", head)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * d:
        raise InputError(f"{path}: payload {data.size} != {t}x{d}")
    return data.reshape(t, d).astype(np.float64)


# ---------------------------------------------------------------------------
# full scene bundle


@dataclass
class Scene:
    manifest: dict
    scene_dir: Path
    template: "object"
    cues: CueSet
    cameras: "list | None"
    features: "np.ndarray | None"
    intrinsics: tuple
    gt_params: "list | None"

    @property
    def n_frames(self) -> int:
        return self.cues.n_frames


def load_scene(path, *, part_sample_budget: int = DEFAULT_PART_SAMPLES, seed: int = 0,
               require_cameras: bool = False) -> Scene:
    """Load manifest, template, cues, cameras, features, and reference params."""
    from .camera import CameraFrame
    from .model import load_template, load_params

    manifest = load_manifest(path)
    base = Path(manifest["_dir"])
    template = load_template(base / manifest["template"])
    cueset = load_cues(manifest, template.n_vertices,
                       part_sample_budget=part_sample_budget, seed=seed)
    intr = manifest["intrinsics"]
    image_size = tuple(manifest["image_size"])
    intrinsics = (float(intr["fx"]), float(intr["fy"]), float(intr["cx"]),
                  float(intr["cy"]), image_size)
    cameras = None
    if manifest.get("cameras"):
        recs = manifest["cameras"]
        if len(recs) != cueset.n_frames:
            raise InputError(f"manifest has {len(recs)} cameras for {cueset.n_frames} frames")
        cameras = [CameraFrame.from_dict(r, intr, image_size) for r in recs]
    elif require_cameras:
        raise InputError("scene has no cameras; run init-cameras first")
    features = None
    if manifest.get("features"):
        features = read_features(base / manifest["features"])
        if features.shape[0] != cueset.n_frames:
            raise InputError(f"feature file has {features.shape[0]} frames, "
                             f"manifest says {cueset.n_frames}")
    gt = None
    if manifest.get("gt_params"):
        gt = load_params(base / manifest["gt_params"])
    return Scene(manifest=manifest, scene_dir=base, template=template, cues=cueset,
                 cameras=cameras, features=features, intrinsics=intrinsics, gt_params=gt)


def write_depth_maps(path, depths: np.ndarray) -> None:
    depths = np.asarray(depths, dtype=np.float32)  # (T,H,W)
    h, w = depths.shape[1:]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(depths.astype("<f4").tobytes())


def read_depth_maps(path, n_frames: int) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise InputError(f"{path}: truncated depth header")
        w, h = struct.unpack("<II", head)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n_frames * w * h:
        raise InputError(f"{path}: payload {data.size} != {n_frames}x{h}x{w}")
    return data.reshape(n_frames, h, w).astype(np.float64)
