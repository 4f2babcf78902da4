"""Assembly of view-factor matrix blocks in CSR format."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from hvf.linalg import SparseCsr
from hvf.mesh import TriangleMesh
from hvf.raytrace import MAX_DEPTH, T_EPS, Bvh, _any_hit

__all__ = ["SparseCsr", "vf_entry", "assemble_block", "assemble_full"]


def vf_entry(mesh: TriangleMesh, i: int, j: int, visible: bool) -> float:
    """Centroid-rule view factor from face i to face j (zero if not visible)."""
    if i == j:
        raise ValueError("view factor of a face with itself is undefined")
    if not visible:
        return 0.0
    d = mesh.centroids[j] - mesh.centroids[i]
    ci = mesh.normals[i] @ d
    cj = -(mesh.normals[j] @ d)
    if ci <= 0.0 or cj <= 0.0:
        return 0.0
    r2 = d @ d
    return float(ci * cj / (math.pi * r2 * r2) * mesh.areas[j])


@nb.njit(cache=True, error_model="numpy")
def _assemble(rows, cols, centroids, normals, areas,
              lo, hi, left, right, start, count, perm, tri):
    m = rows.shape[0]
    indptr = np.zeros(m + 1, np.uint64)
    cap = 1024
    idx = np.empty(cap, np.uint32)
    val = np.empty(cap, np.float32)
    nnz = 0
    stack = np.empty(2 * MAX_DEPTH + 8, np.int64)
    d = np.empty(3)
    inv_pi = 1.0 / math.pi
    for r in range(m):
        i = rows[r]
        xi = centroids[i]
        ni = normals[i]
        for c in range(cols.shape[0]):
            j = cols[c]
            if j == i:
                continue
            d[0] = centroids[j, 0] - xi[0]
            d[1] = centroids[j, 1] - xi[1]
            d[2] = centroids[j, 2] - xi[2]
            ci = ni[0] * d[0] + ni[1] * d[1] + ni[2] * d[2]
            if ci <= 0.0:
                continue
            cj = -(normals[j, 0] * d[0] + normals[j, 1] * d[1] + normals[j, 2] * d[2])
            if cj <= 0.0:
                continue
            if _any_hit(lo, hi, left, right, start, count, perm, tri, xi, d,
                        T_EPS, 1.0 - T_EPS, i, j, stack):
                continue
            r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
            v = ci * cj * inv_pi / (r2 * r2) * areas[j]
            if nnz == cap:
                cap *= 2
                idx2 = np.empty(cap, np.uint32)
                val2 = np.empty(cap, np.float32)
                idx2[:nnz] = idx[:nnz]
                val2[:nnz] = val[:nnz]
                idx, val = idx2, val2
            idx[nnz] = c
            val[nnz] = v
            nnz += 1
        indptr[r + 1] = nnz
    return indptr, idx[:nnz].copy(), val[:nnz].copy()


def assemble_block(mesh: TriangleMesh, bvh: Bvh, rows, cols) -> SparseCsr:
    """Block F[rows, cols] in the local orderings of ``rows`` and ``cols``.

    Each candidate pair is culled by the two cosine tests before any ray is
    cast; the diagonal is never stored.
    """
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    n = mesh.num_faces
    for name, ix in (("rows", rows), ("cols", cols)):
        if ix.size and (ix.min() < 0 or ix.max() >= n):
            raise IndexError(f"{name} index out of range [0, {n})")
    indptr, indices, data = _assemble(
        rows, cols, mesh.centroids, mesh.normals, mesh.areas,
        bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.perm, bvh.tri)
    return SparseCsr(len(rows), len(cols), indptr, indices, data)


def assemble_full(mesh: TriangleMesh, bvh: Bvh | None = None) -> SparseCsr:
    """The whole N x N matrix in original face order."""
    from hvf.raytrace import build_bvh

    bvh = build_bvh(mesh) if bvh is None else bvh
    everything = np.arange(mesh.num_faces)
    return assemble_block(mesh, bvh, everything, everything)
