#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each kernel on fitting-sized workloads and prints a timing table. The
numba column is skipped when numba is unavailable or disabled via
QUADFIT_DISABLE_NUMBA=1 (in which case only the fallback is timed).
"""
import time

import numpy as np

from quadfit import kernels


def timeit(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_nn():
    rng = np.random.default_rng(0)
    cases = [("chamfer 512x600 (2d)", rng.uniform(0, 256, (512, 2)),
              rng.uniform(0, 256, (600, 2))),
             ("spectral 642x642 (100d)", rng.normal(size=(642, 100)),
              rng.normal(size=(642, 100)))]
    rows = []
    for name, q, r in cases:
        t_np = timeit(kernels._nn_indices_np, q, r)
        row = {"kernel": f"nn_indices {name}", "numpy": t_np}
        if kernels.USING_NUMBA:
            qc, rc = np.ascontiguousarray(q), np.ascontiguousarray(r)
            row["numba"] = timeit(kernels._nn_indices_impl, qc, rc)
        rows.append(row)
    return rows


def bench_rasterize():
    from quadfit.synth import synthetic_template, orbit_camera
    from quadfit.camera import project, project_depths
    from quadfit.model import FrameParams, pose_mesh

    tpl = synthetic_template()
    intr = (300.0, 300.0, 128.0, 128.0, (256, 256))
    cam = orbit_camera(0, 10, intr)
    posed = pose_mesh(tpl, FrameParams.rest(tpl))
    pix, _ = project(cam, posed)
    zinv = 1.0 / project_depths(cam, posed)
    faces = tpl.faces.astype(np.int64)
    rows = [{"kernel": "rasterize 1280 tris @256^2",
             "numpy": timeit(kernels._rasterize_np, pix, zinv, faces, 256, 256)}]
    if kernels.USING_NUMBA:
        pc = np.ascontiguousarray(pix)
        rows[0]["numba"] = timeit(kernels._rasterize_impl, pc, zinv, faces, 256, 256)
    return rows


def main():
    print(f"active backend: {kernels.backend_name()}")
    rows = bench_nn() + bench_rasterize()
    width = max(len(r["kernel"]) for r in rows) + 2
    header = f"{'kernel':{width}s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for r in rows:
        np_ms = r["numpy"] * 1e3
        if "numba" in r:
            nb_ms = r["numba"] * 1e3
            print(f"{r['kernel']:{width}s} {np_ms:10.3f}ms {nb_ms:10.3f}ms "
                  f"{np_ms / nb_ms:8.1f}x")
        else:
            print(f"{r['kernel']:{width}s} {np_ms:10.3f}ms {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
