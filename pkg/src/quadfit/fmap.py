"""Spectral shape correspondence: cotangent Laplacian, eigenbasis, ZoomOut.

Used once, offline, to transfer vertex indices from an external embedding
mesh onto the fitting template. The map is seeded from a handful of landmark
pairs (ridge-regularized by operator commutativity), then upsampled by
alternating point-map extraction and spectral re-expression at growing
basis size.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, NumericalError
from .kernels import nn_indices

EIG_TOL = 1e-8


@dataclass
class SpectralBasis:
    eigenvalues: np.ndarray    # (k,) ascending, nonnegative
    eigenfunctions: np.ndarray  # (N,k) mass-orthonormal
    mass: np.ndarray           # (N,) lumped vertex areas

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]


def cotan_laplacian(vertices: np.ndarray, faces: np.ndarray):
    """Cotangent stiffness matrix and lumped (barycentric) mass vector.

    Stiffness rows sum to zero and the matrix is symmetric positive
    semidefinite. Faces with (near-)zero area are an error, reported with
    their indices.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = vertices.shape[0]
    vi, vj, vk = (vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]])
    cross = np.cross(vj - vi, vk - vi)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    scale = max(float(areas.max(initial=0.0)), 1e-300)
    bad = np.flatnonzero(areas < 1e-12 * scale)
    if len(bad):
        raise InputError(f"degenerate (zero-area) faces: {bad.tolist()[:20]}")

    rows, cols, vals = [], [], []
    for corner in range(3):
        a = faces[:, corner]
        b = faces[:, (corner + 1) % 3]
        c = faces[:, (corner + 2) % 3]
        # cot of the angle at `a`, weighting edge (b, c)
        u = vertices[b] - vertices[a]
        v = vertices[c] - vertices[a]
        cot = np.einsum("fd,fd->f", u, v) / (2.0 * areas)
        w = 0.5 * cot
        rows.extend([b, c])
        cols.extend([c, b])
        vals.extend([-w, -w])
        rows.extend([b, c])
        cols.extend([b, c])
        vals.extend([w, w])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    stiffness = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    mass = np.zeros(n)
    third = areas / 3.0
    for corner in range(3):
        np.add.at(mass, faces[:, corner], third)
    if np.any(mass <= 0):
        orphan = np.flatnonzero(mass <= 0)
        raise InputError(f"vertices with no incident area: {orphan.tolist()[:20]}")
    return stiffness, mass


def compute_basis(vertices: np.ndarray, faces: np.ndarray, k: int) -> SpectralBasis:
    """Smallest-k generalized eigenpairs of the cotan Laplacian (shift-invert)."""
    stiffness, mass = cotan_laplacian(vertices, faces)
    n = vertices.shape[0]
    if k >= n:
        raise InputError(f"requested {k} eigenpairs from a {n}-vertex mesh")
    M = sp.diags(mass)
    try:
        evals, evecs = spla.eigsh(stiffness, k=k, M=M, sigma=-1e-4, which="LM",
                                  tol=EIG_TOL)
    except (RuntimeError, spla.ArpackNoConvergence) as e:
        raise NumericalError(f"eigensolver failed: {e}") from e
    order = np.argsort(evals)
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    # deterministic sign: largest-magnitude entry positive
    for i in range(evecs.shape[1]):
        j = np.argmax(np.abs(evecs[:, i]))
        if evecs[j, i] < 0:
            evecs[:, i] = -evecs[:, i]
    return SpectralBasis(eigenvalues=evals, eigenfunctions=evecs, mass=mass)


# ---------------------------------------------------------------------------
# functional maps

# Convention: the k_S x k_T matrix C maps target coefficients to source
# coefficients, C = Phi_S^T M_S Pi Phi_T for a point map Pi taking each
# source vertex to a target vertex (source_to_target).


def pointmap_to_fmap(src: SpectralBasis, tgt: SpectralBasis, s2t: np.ndarray,
                     k: int) -> np.ndarray:
    phi_s = src.eigenfunctions[:, :k]
    phi_t = tgt.eigenfunctions[:, :k]
    return phi_s.T @ (src.mass[:, None] * phi_t[s2t])


def fmap_to_pointmap(src: SpectralBasis, tgt: SpectralBasis, C: np.ndarray) -> np.ndarray:
    k_s, k_t = C.shape
    emb_src = src.eigenfunctions[:, :k_s] @ C
    return nn_indices(emb_src, tgt.eigenfunctions[:, :k_t])


def commutativity_energy(C: np.ndarray, src: SpectralBasis, tgt: SpectralBasis) -> float:
    k_s, k_t = C.shape
    lam_s = src.eigenvalues[:k_s]
    lam_t = tgt.eigenvalues[:k_t]
    return float(np.linalg.norm(lam_s[:, None] * C - C * lam_t[None, :]))


def landmark_init(src: SpectralBasis, tgt: SpectralBasis, src_ids, tgt_ids,
                  k0: int, ridge: float = 1e-2) -> np.ndarray:
    """Initial k0 x k0 map from landmark pairs.

    Aligns landmark spectral embeddings in least squares, with a per-entry
    ridge weighted by the commutativity mismatch (lam_t[j] - lam_s[i])^2 so
    the underdetermined directions default to near-diagonal maps.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    tgt_ids = np.asarray(tgt_ids, dtype=np.int64)
    if len(src_ids) != len(tgt_ids) or len(src_ids) < 1:
        raise InputError("landmark_init needs matching nonempty landmark lists")
    Y = tgt.eigenfunctions[tgt_ids, :k0]           # (L,k0)
    X = src.eigenfunctions[src_ids, :k0]           # (L,k0)
    lam_s = src.eigenvalues[:k0]
    lam_t = tgt.eigenvalues[:k0]
    scale = max(float(lam_s.max()), 1e-12)
    C = np.zeros((k0, k0))
    G = Y.T @ Y                                    # (k0,k0), shared across rows
    for i in range(k0):
        d = ridge * ((lam_t - lam_s[i]) / scale) ** 2 + 1e-9
        A = G + np.diag(d)
        b = Y.T @ X[:, i] + d * (np.arange(k0) == i) * 1.0
        C[i] = np.linalg.solve(A, b)
    return C


def zoomout(src: SpectralBasis, tgt: SpectralBasis, C0: np.ndarray, k_final: int,
            step: int = 1):
    """Iterative spectral upsampling of an initial functional map.

    Alternates point-map extraction with re-expression at k+step until
    k_final, then returns (C, source_to_target vertex map).
    """
    C0 = np.asarray(C0, dtype=np.float64)
    k0 = C0.shape[0]
    if C0.shape[0] != C0.shape[1]:
        raise InputError("C0 must be square")
    if k0 < 4:
        raise InputError("initial map must be at least 4x4")
    if step < 1:
        raise InputError("step must be >= 1")
    if k_final > src.k or k_final > tgt.k:
        raise InputError(f"k_final {k_final} exceeds available eigenpairs "
                         f"({src.k} source, {tgt.k} target)")
    if k_final < k0:
        raise InputError("k_final must be >= the initial map size")
    C = C0
    k = k0
    while k < k_final:
        s2t = fmap_to_pointmap(src, tgt, C)
        k = min(k + step, k_final)
        C = pointmap_to_fmap(src, tgt, s2t, k)
    s2t = fmap_to_pointmap(src, tgt, C)
    return C, s2t


def save_vertex_map(path, s2t: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["source_id", "target_id"])
        for i, j in enumerate(s2t):
            wr.writerow([i, int(j)])


def load_vertex_map(path, n_target: int) -> np.ndarray:
    out = []
    with open(path) as fh:
        rdr = csv.reader(fh)
        next(rdr, None)
        for lineno, row in enumerate(rdr, start=2):
            if not row:
                continue
            try:
                i, j = int(row[0]), int(row[1])
            except (ValueError, IndexError) as e:
                raise InputError(f"{path}:{lineno}: bad vertex map row: {e}") from e
            if not 0 <= j < n_target:
                raise InputError(f"{path}:{lineno}: target id {j} out of range")
            out.append((i, j))
    out.sort()
    if [i for i, _ in out] != list(range(len(out))):
        raise InputError(f"{path}: source ids must be 0..N-1 exactly once")
    return np.array([j for _, j in out], dtype=np.int64)


def one_ring_adjacency(faces: np.ndarray, n: int) -> list[set]:
    rings = [set() for _ in range(n)]
    for a, b, c in faces:
        rings[a].update((b, c))
        rings[b].update((a, c))
        rings[c].update((a, b))
    return rings
