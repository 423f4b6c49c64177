"""Staged fitting: milestone loss-weight schedule, Adam, and the epoch loop.

Default schedule (10000 epochs, batch 32):

    obj   1, 100, 500, 800   at epochs 300, 1000, 6000
    part  5e-4, 5e-8         at epoch 300
    pix   5, 1e-1, 1e-2      at epochs 1000, 6000
    time  5e-4, 5e-2         at epoch 300

with learning-rate decay gamma=0.5 at epochs [9000, 9500] and vertex offsets
gated off until epoch 300. `Schedule.scaled()` shrinks every milestone
proportionally for short desk-scale runs. Lookup is piecewise constant and
right-continuous at milestones.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import featnet as fn
from .autodiff import ParamStore
from .camera import apply_camera_delta, project_op
from .cues import CueSet, fallback_fill
from .errors import InputError, NumericalError
from .losses import (LossWeights, assign_track_vertices, build_total_loss,
                     regularizer_ops, sample_mask_pixels)
from .model import FrameParams, QuadTemplate, pose_mesh_op
from .model import _pose_core

log = logging.getLogger("quadfit")

DEFAULT_TABLES = {
    "obj": ([1.0, 100.0, 500.0, 800.0], [300, 1000, 6000]),
    "part": ([5e-4, 5e-8], [300]),
    "pix": ([5.0, 1e-1, 1e-2], [1000, 6000]),
    "time": ([5e-4, 5e-2], [300]),
    "tex": ([0.0], []),
    "lap": ([1e-2], []),
    "vol": ([1e-2], []),
    "arap": ([1e-2], []),
    "prior": ([1e-4], []),
    "limit": ([1.0], []),
    "betavar": ([0.0], []),
}

_TABLE_TO_FIELD = {"obj": "lambda_obj", "part": "lambda_part", "pix": "lambda_pix",
                   "time": "lambda_time", "tex": "lambda_tex", "lap": "w_lap",
                   "vol": "w_vol", "arap": "w_arap", "prior": "w_prior",
                   "limit": "w_limit", "betavar": "w_betavar"}


PARAM_GROUPS = ("beta", "theta_raw", "log_scales", "trans", "offsets", "net", "cam")


def _group_of(slot: str) -> str:
    return slot.split(".", 1)[0]


@dataclass
class Schedule:
    epochs: int = 10000
    batch_size: int = 32
    lr: float = 1e-3
    lr_gamma: float = 0.5
    lr_milestones: list[int] = field(default_factory=lambda: [9000, 9500])
    offset_enable_epoch: int = 300
    tables: dict[str, tuple[list[float], list[int]]] = field(
        default_factory=lambda: {k: (list(v[0]), list(v[1])) for k, v in DEFAULT_TABLES.items()})
    # optional per-parameter-group learning-rate multipliers
    lr_groups: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be positive")
        for name, (values, miles) in self.tables.items():
            if len(values) != len(miles) + 1:
                raise InputError(f"table {name!r}: need len(values) == len(milestones)+1")
            if any(b <= a for a, b in zip(miles, miles[1:])):
                raise InputError(f"table {name!r}: milestones must increase strictly")
            if miles and self.epochs <= max(miles):
                raise InputError(f"table {name!r}: milestone {max(miles)} >= epochs {self.epochs}")
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise InputError("lr_milestones must increase strictly")
        for g, m in self.lr_groups.items():
            if g not in PARAM_GROUPS:
                raise InputError(f"unknown parameter group {g!r} in lr_groups")
            if m < 0:
                raise InputError(f"lr multiplier for {g!r} must be nonnegative")

    def scaled(self, epochs: int) -> "Schedule":
        """Proportionally rescale every milestone to a new epoch count.

        Milestones that collide after rounding are nudged apart; any that
        land at or past the new epoch count are dropped (with their segment).
        """
        ratio = epochs / self.epochs

        def rescale(miles):
            out = []
            for m in miles:
                nm = max(1, int(round(m * ratio)))
                if out and nm <= out[-1]:
                    nm = out[-1] + 1
                if nm >= epochs:
                    break
                out.append(nm)
            return out

        tables = {}
        for name, (values, miles) in self.tables.items():
            new_miles = rescale(miles)
            tables[name] = (list(values)[:len(new_miles) + 1], new_miles)
        return Schedule(epochs=epochs, batch_size=self.batch_size, lr=self.lr,
                        lr_gamma=self.lr_gamma, lr_milestones=rescale(self.lr_milestones),
                        offset_enable_epoch=max(1, int(round(self.offset_enable_epoch * ratio))),
                        tables=tables, lr_groups=dict(self.lr_groups))

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * (self.lr_gamma ** drops)

    @classmethod
    def for_synthetic(cls, epochs: int = 2000) -> "Schedule":
        """Desk-scale recipe tuned on the synthetic oracle suite.

        Exact cues deserve a constant, dominant pixel term; the track term
        ramps up to pin limbs through self-occlusion; shape coefficients and
        limb scales move slowly (they start at truth and only absorb
        similarity ambiguity otherwise); offsets unlock late.
        """
        return cls(
            epochs=epochs, batch_size=32, lr=5e-3, lr_gamma=0.5,
            lr_milestones=[int(epochs * 0.5), int(epochs * 0.75)],
            offset_enable_epoch=int(epochs * 0.75),
            tables={
                "obj": ([1.0], []),
                "part": ([5e-4, 5e-8], [max(1, int(epochs * 0.15))]),
                "pix": ([5.0], []),
                "time": ([5e-4, 1.0], [max(1, int(epochs * 0.15))]),
                "tex": ([0.0], []),
                "lap": ([1e-2], []),
                "vol": ([1e-2], []),
                "arap": ([1e-2], []),
                "prior": ([1.0], []),
                "limit": ([1.0], []),
                "betavar": ([0.2], []),
            },
            lr_groups={"log_scales": 0.05, "beta": 0.1},
        )

    @classmethod
    def from_json(cls, path) -> "Schedule":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read schedule {path}: {e}") from e
        tables = {k: (list(v[0]), list(v[1])) for k, v in DEFAULT_TABLES.items()}
        for name, spec in doc.get("weights", {}).items():
            if name not in tables:
                raise InputError(f"schedule {path}: unknown weight table {name!r}")
            tables[name] = (list(spec["values"]), list(spec.get("milestones", [])))
        return cls(epochs=int(doc.get("epochs", 10000)),
                   batch_size=int(doc.get("batch_size", 32)),
                   lr=float(doc.get("lr", 1e-3)),
                   lr_gamma=float(doc.get("lr_gamma", 0.5)),
                   lr_milestones=list(doc.get("lr_milestones", [9000, 9500])),
                   offset_enable_epoch=int(doc.get("offset_enable_epoch", 300)),
                   tables=tables,
                   lr_groups={k: float(v) for k, v in doc.get("lr_groups", {}).items()})


def _lookup(values, miles, epoch: int) -> float:
    i = 0
    for m in miles:
        if epoch >= m:
            i += 1
    return values[i]


def weights_at(schedule: Schedule, epoch: int) -> LossWeights:
    """Piecewise-constant weight lookup, right-continuous at milestones."""
    if not 0 <= epoch < schedule.epochs:
        raise InputError(f"epoch {epoch} outside [0,{schedule.epochs})")
    kw = {}
    for name, (values, miles) in schedule.tables.items():
        kw[_TABLE_TO_FIELD[name]] = _lookup(values, miles, epoch)
    return LossWeights(**kw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              lr_groups: dict[str, float] | None = None) -> None:
    """One bias-corrected Adam update, in place on `values`.

    `lr_groups` optionally scales the step per parameter group (slot name
    prefix before the first dot).
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"NaN gradient in slot {name!r}")
        x = values[name]
        if g.shape != x.shape:
            raise InputError(f"gradient shape {g.shape} != param shape {x.shape} for {name!r}")
        slot_lr = lr
        if lr_groups:
            slot_lr = lr * lr_groups.get(_group_of(name), 1.0)
        m = state.m.setdefault(name, np.zeros_like(x))
        v = state.v.setdefault(name, np.zeros_like(x))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x -= slot_lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# parameterization shared by direct and amortized modes

_PI = np.pi


def _theta_raw_from(theta: np.ndarray) -> np.ndarray:
    clipped = np.clip(theta / _PI, -1 + 1e-9, 1 - 1e-9)
    return _PI * np.arctanh(clipped)


@dataclass
class FitResult:
    params: list[FrameParams]
    loss_log: list[dict]
    store: ParamStore
    net: "fn.FeatNet | None"
    total_history: list[float]
    cameras: "list | None" = None


def _init_direct_store(store: ParamStore, template: QuadTemplate, n_frames: int,
                       init: list[FrameParams]) -> None:
    for f in range(n_frames):
        p = init[f]
        store.register(f"beta.{f}", p.beta)
        store.register(f"theta_raw.{f}", _theta_raw_from(p.theta).reshape(-1))
        store.register(f"log_scales.{f}", np.log(p.limb_scales))
        store.register(f"trans.{f}", p.translation)
        store.register(f"offsets.{f}", p.vertex_offsets)


def _frame_param_vars(store: ParamStore, template: QuadTemplate, f: int,
                      offsets_on: bool, mode: str, net, features, n_frames: int,
                      net_offsets: bool):
    """Raw slots -> (beta, theta, scales, trans, offsets) Vars for one frame."""
    if mode == "direct":
        beta = store.leaf(f"beta.{f}")
        theta = fn.soft_clamp_op(store.leaf(f"theta_raw.{f}"))
        scales = ad.exp(store.leaf(f"log_scales.{f}"))
        trans = store.leaf(f"trans.{f}")
        offsets = store.leaf(f"offsets.{f}") if offsets_on else ad.Var(
            np.zeros((template.n_vertices, 3)))
    else:
        wv = {k: store.leaf(f"net.{k}") for k in net.slot_names()}
        enc = fn.pos_encode(f, n_frames)
        raw = fn.forward_op(net, wv, features[f], enc)
        beta = raw["beta"]
        theta = fn.soft_clamp_op(raw["theta_raw"])
        scales = ad.exp(raw["log_scales"])
        trans = raw["translation"]
        if net_offsets:
            offsets = (ad.reshape(raw["offsets"], (template.n_vertices, 3))
                       if offsets_on else ad.Var(np.zeros((template.n_vertices, 3))))
        else:
            offsets = store.leaf(f"offsets.{f}") if offsets_on else ad.Var(
                np.zeros((template.n_vertices, 3)))
    return beta, theta, scales, trans, offsets


def _materialize_params(store: ParamStore, template: QuadTemplate, n_frames: int,
                        mode: str, net, features, net_offsets: bool,
                        offsets_on: bool) -> list[FrameParams]:
    out = []
    for f in range(n_frames):
        store.new_step()
        b, t, s, tr, o = _frame_param_vars(store, template, f, offsets_on, mode,
                                           net, features, n_frames, net_offsets)
        out.append(FrameParams(beta=b.value.copy(),
                               theta=t.value.reshape(-1, 3).copy(),
                               limb_scales=s.value.copy(),
                               translation=tr.value.copy(),
                               vertex_offsets=o.value.copy()))
    return out


def contiguous_batches(n_frames: int, batch_size: int) -> list[list[int]]:
    """Contiguous frame windows, so tracks find anchor and target co-resident."""
    return [list(range(s, min(s + batch_size, n_frames)))
            for s in range(0, n_frames, batch_size)]


def fit(scene, schedule: Schedule, mode: str = "direct", *, seed: int = 0,
        init_params: list[FrameParams] | None = None,
        chamfer_budget: int = 512, chamfer_boundary: bool = False,
        optimize_cameras: bool = False, net_offsets: bool = False,
        resample_parts_every: int = 0, log_every: int = 50,
        checkpoint_every: int = 0, out_dir=None,
        resume: str | None = None, d_feat: int | None = None) -> FitResult:
    """Run the staged optimization over all frames of a scene.

    `scene` bundles template, cues, cameras, and optional features (see
    cues.load_scene). Deterministic for a fixed seed. Raises NumericalError
    if the total loss exceeds 1e6x its initial value for 100 straight epochs.
    """
    if mode not in ("direct", "amortized"):
        raise InputError(f"unknown fit mode {mode!r}")
    template: QuadTemplate = scene.template
    cues: CueSet = fallback_fill(scene.cues)
    cams = scene.cameras
    if cams is None:
        raise InputError("scene has no cameras; run init-cameras first")
    n_frames = cues.n_frames

    features = scene.features
    if mode == "amortized" and features is None:
        log.info("no feature file in scene; falling back to direct mode")
        mode = "direct"

    if init_params is None:
        init_params = [FrameParams.rest(template) for _ in range(n_frames)]

    store = ParamStore()
    net = None
    if optimize_cameras:
        for f in range(n_frames):
            store.register(f"cam.{f}", np.zeros(6))
    if mode == "direct":
        _init_direct_store(store, template, n_frames, init_params)
    else:
        net = fn.FeatNet.create(template, features.shape[1], net_offsets=net_offsets,
                                seed=seed)
        for k in net.slot_names():
            store.register(f"net.{k}", net.weights[k])
        if not net_offsets:
            for f in range(n_frames):
                store.register(f"offsets.{f}", init_params[f].vertex_offsets)

    if resume:
        saved = fn.load_weights(resume)
        for name, arr in saved.items():
            if name not in store.values:
                raise InputError(f"checkpoint slot {name!r} does not match this run")
            if store.values[name].shape != arr.shape:
                raise InputError(f"checkpoint slot {name!r} has shape {arr.shape}, "
                                 f"expected {store.values[name].shape}")
            store.values[name][...] = arr

    # fixed per-run mask samples (reseeded only via --resample-parts-every)
    def draw_mask_pts(round_idx: int):
        return {f: sample_mask_pixels(cues.masks[f], chamfer_budget,
                                      seed * 7919 + f + 104729 * round_idx,
                                      chamfer_boundary)
                for f in range(n_frames)}

    mask_pts = draw_mask_pts(0)
    batches = contiguous_batches(n_frames, schedule.batch_size)
    state = AdamState()
    loss_log: list[dict] = []
    total_history: list[float] = []
    initial_total = None
    diverged_for = 0

    for epoch in range(schedule.epochs):
        weights = weights_at(schedule, epoch)
        offsets_on = epoch >= schedule.offset_enable_epoch
        lr = schedule.lr_at(epoch)
        if resample_parts_every and epoch and epoch % resample_parts_every == 0:
            mask_pts = draw_mask_pts(epoch // resample_parts_every)

        # refresh anchor-frame track assignments from current poses
        track_assign = None
        if weights.lambda_time > 0 and cues.tracks.n_tracks > 0:
            proj_np, valid_np = {}, {}
            for f in np.unique(cues.tracks.anchors):
                f = int(f)
                store.new_step()
                b, t, s, tr, o = _frame_param_vars(store, template, f, offsets_on,
                                                   mode, net, features, n_frames,
                                                   net_offsets)
                posed, _ = _pose_core(template, b.value, t.value.reshape(-1, 3),
                                      s.value, tr.value, o.value)
                delta = store.leaf(f"cam.{f}") if optimize_cameras else None
                pv, ok = project_op(ad.Var(posed), cams[f], cam_delta=delta)
                proj_np[f], valid_np[f] = pv.value, ok
            track_assign = assign_track_vertices(cues.tracks, proj_np, valid_np)

        epoch_terms: dict[str, float] = {}
        epoch_total = 0.0
        want_log = (epoch % log_every == 0) or epoch == schedule.epochs - 1
        grad_norm_acc: dict[str, float] = {}
        for batch in batches:
            store.new_step()
            proj_vars, valids, reg_terms, beta_vars = {}, {}, [], []
            for f in batch:
                b, t, s, tr, o = _frame_param_vars(store, template, f, offsets_on,
                                                   mode, net, features, n_frames,
                                                   net_offsets)
                posed = pose_mesh_op(template, b, t, s, tr, o)
                delta = store.leaf(f"cam.{f}") if optimize_cameras else None
                proj_vars[f], valids[f] = project_op(posed, cams[f], cam_delta=delta)
                reg_terms.append(regularizer_ops(template, b, t, o))
                beta_vars.append(b)
            total, terms, _, _ = build_total_loss(
                cues, template, batch, proj_vars, valids, reg_terms, beta_vars,
                weights, chamfer_budget=chamfer_budget,
                chamfer_boundary=chamfer_boundary, seed=seed,
                track_assign=track_assign, mask_pts_by_frame=mask_pts)
            grads = store.grads(total)
            adam_step(store.values, grads, state, lr, lr_groups=schedule.lr_groups)
            w_batch = len(batch) / n_frames
            epoch_total += float(total.value) * w_batch
            for k, v in terms.items():
                epoch_terms[k] = epoch_terms.get(k, 0.0) + float(v.value) * w_batch
            if want_log:
                wmap = weights.as_dict()
                for k, v in terms.items():
                    if wmap[k] == 0.0:
                        continue
                    gs = ad.grad(v * wmap[k], [store.leaf(nm) for nm in store.names()])
                    gn = float(np.sqrt(sum(float((g * g).sum()) for g in gs)))
                    grad_norm_acc[k] = grad_norm_acc.get(k, 0.0) + gn * w_batch

        total_history.append(epoch_total)
        if want_log:
            for k in sorted(epoch_terms):
                loss_log.append({"epoch": epoch, "term": k, "value": epoch_terms[k],
                                 "grad_norm": grad_norm_acc.get(k, 0.0)})
            loss_log.append({"epoch": epoch, "term": "total", "value": epoch_total,
                             "grad_norm": 0.0})
            log.info("epoch %d total %.6g lr %.3g", epoch, epoch_total, lr)

        if initial_total is None:
            initial_total = max(abs(epoch_total), 1e-12)
        if abs(epoch_total) > 1e6 * initial_total:
            diverged_for += 1
            if diverged_for >= 100:
                raise NumericalError(
                    f"divergence: total {epoch_total:.3g} above 1e6x initial "
                    f"{initial_total:.3g} for 100 consecutive epochs (epoch {epoch})")
        else:
            diverged_for = 0

        if checkpoint_every and out_dir and epoch and epoch % checkpoint_every == 0:
            fn.save_weights(Path(out_dir) / f"checkpoint_{epoch:06d}.bin", store.values)

    final_on = schedule.epochs - 1 >= schedule.offset_enable_epoch
    params = _materialize_params(store, template, n_frames, mode, net, features,
                                 net_offsets, final_on)
    fitted_cams = None
    if optimize_cameras:
        fitted_cams = [apply_camera_delta(cams[f], store.values[f"cam.{f}"])
                       for f in range(n_frames)]
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fn.save_weights(out_dir / "checkpoint.bin", store.values)
        write_loss_log(out_dir / "loss_log.csv", loss_log)
        if fitted_cams is not None:
            with open(out_dir / "cameras.json", "w") as fh:
                json.dump([c.to_dict() for c in fitted_cams], fh, sort_keys=True)
    return FitResult(params=params, loss_log=loss_log, store=store, net=net,
                     total_history=total_history, cameras=fitted_cams)


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "term", "value", "grad_norm"])
        for r in rows:
            wr.writerow([r["epoch"], r["term"], repr(r["value"]), repr(r["grad_norm"])])
