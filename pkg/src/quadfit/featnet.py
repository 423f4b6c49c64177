"""Amortized regression from per-frame features to pose parameters.

Three affine layers with tanh between them (purely linear stacks collapse to
one map, so a smooth nonlinearity keeps the depth meaningful): a reduction
layer from (d_feat + 8) to 64, a 64->64 hidden layer, and an output layer to
the parameter vector. The output layer starts at zero weights with a
rest-pose bias, so an untrained network reproduces the rest pose. Raw joint
angles pass through pi*tanh(x/pi) to stay inside the principal range, and
limb scales go through exp() to stay positive.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InputError
from .model import QuadTemplate

HIDDEN = 64
ENC_DIM = 8


def pos_encode(t: int, total: int) -> np.ndarray:
    """Sinusoidal frame-index encoding at 4 dyadic frequencies of t/total."""
    if not 0 <= t < total:
        raise InputError(f"frame index {t} outside [0,{total})")
    phase = 2.0 * np.pi * t / total
    out = np.empty(ENC_DIM)
    for k in range(4):
        out[2 * k] = np.sin(phase * (2 ** k))
        out[2 * k + 1] = np.cos(phase * (2 ** k))
    return out


def soft_clamp_op(x: ad.Var, bound: float = np.pi) -> ad.Var:
    """Smooth clamp bound*tanh(x/bound); identity-like near zero."""
    return ad.tanh(ad.as_var(x) * (1.0 / bound)) * bound


def param_layout(template: QuadTemplate, net_offsets: bool = False) -> dict[str, tuple[int, int]]:
    """Slices of the flat output vector: beta, theta, log scales, translation,
    and optionally per-vertex offsets."""
    sizes = [("beta", template.n_shapes), ("theta_raw", template.n_joints * 3),
             ("log_scales", template.n_limb_scales), ("translation", 3)]
    if net_offsets:
        sizes.append(("offsets", template.n_vertices * 3))
    layout = {}
    pos = 0
    for name, size in sizes:
        layout[name] = (pos, pos + size)
        pos += size
    return layout


@dataclass
class FeatNet:
    d_feat: int
    layout: dict[str, tuple[int, int]]
    weights: dict[str, np.ndarray]

    @property
    def out_dim(self) -> int:
        return max(e for _, e in self.layout.values())

    @classmethod
    def create(cls, template: QuadTemplate, d_feat: int, *, net_offsets: bool = False,
               seed: int = 0) -> "FeatNet":
        layout = param_layout(template, net_offsets)
        out_dim = max(e for _, e in layout.values())
        rng = np.random.default_rng(seed)
        d_in = d_feat + ENC_DIM

        def xavier(n_in, n_out):
            return rng.normal(size=(n_in, n_out)) / np.sqrt(n_in)

        weights = {
            "W1": xavier(d_in, HIDDEN), "b1": np.zeros(HIDDEN),
            "W2": xavier(HIDDEN, HIDDEN), "b2": np.zeros(HIDDEN),
            # zero output weights + rest-pose bias: epoch 0 emits the rest pose
            "W3": np.zeros((HIDDEN, out_dim)), "b3": np.zeros(out_dim),
        }
        return cls(d_feat=d_feat, layout=layout, weights=weights)

    def slot_names(self) -> list[str]:
        return ["W1", "b1", "W2", "b2", "W3", "b3"]


def forward_op(net: FeatNet, weight_vars: dict[str, ad.Var], feature: np.ndarray,
               encoding: np.ndarray) -> dict[str, ad.Var]:
    """Differentiable forward pass; returns raw parameter field Vars.

    theta_raw is returned before clamping and log_scales before exp so the
    caller applies the same transforms as direct mode.
    """
    if feature.shape != (net.d_feat,):
        raise InputError(f"feature has shape {feature.shape}, net expects ({net.d_feat},)")
    if encoding.shape != (ENC_DIM,):
        raise InputError(f"encoding must have {ENC_DIM} entries")
    x = ad.Var(np.concatenate([feature, encoding]))
    h1 = ad.tanh(ad.matmul(x, weight_vars["W1"]) + weight_vars["b1"])
    h2 = ad.tanh(ad.matmul(h1, weight_vars["W2"]) + weight_vars["b2"])
    out = ad.matmul(h2, weight_vars["W3"]) + weight_vars["b3"]
    return {name: out[slice(s, e)] for name, (s, e) in net.layout.items()}


def forward(net: FeatNet, feature: np.ndarray, encoding: np.ndarray):
    """Plain forward pass to concrete parameter fields (theta clamped, scales
    exponentiated)."""
    wv = {k: ad.Var(v) for k, v in net.weights.items()}
    raw = forward_op(net, wv, np.asarray(feature, dtype=np.float64),
                     np.asarray(encoding, dtype=np.float64))
    theta = soft_clamp_op(raw["theta_raw"])
    out = {"beta": raw["beta"].value,
           "theta": theta.value.reshape(-1, 3),
           "limb_scales": np.exp(raw["log_scales"].value),
           "translation": raw["translation"].value}
    if "offsets" in raw:
        out["vertex_offsets"] = raw["offsets"].value.reshape(-1, 3)
    return out


# ---------------------------------------------------------------------------
# checkpoint format: little-endian f32 arrays with a shape header


def save_weights(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(b"QFCK")
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != b"QFCK":
            raise InputError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4")
            if data.size != size:
                raise InputError(f"{path}: truncated array {name!r}")
            out[name] = data.reshape(shape).astype(np.float64)
    return out
