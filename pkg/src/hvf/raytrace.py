"""Bounding volume hierarchy and segment/ray occlusion queries (double precision)."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from hvf.mesh import TriangleMesh

T_EPS = 1e-5
LEAF_SIZE = 4
MAX_DEPTH = 64


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened AABB tree. Node k is a leaf when ``left[k] < 0``; its
    triangles are ``perm[start[k]:start[k] + count[k]]``."""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    perm: np.ndarray
    tri: np.ndarray  # (N, 3, 3) vertex coordinates in original face order

    @property
    def num_nodes(self) -> int:
        return len(self.left)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            k, d = stack.pop()
            best = max(best, d)
            if self.left[k] >= 0:
                stack += [(self.left[k], d + 1), (self.right[k], d + 1)]
        return best


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Median split on the longest axis of the centroid box; leaves hold <= 4 triangles."""
    tri = mesh.vertices[mesh.faces]
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    cen = mesh.centroids
    n = len(tri)
    perm = np.arange(n)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(a, b):
        idx = perm[a:b]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(a)
        count.append(b - a)
        return len(left) - 1

    stack = [(new_node(0, n), 0, n, 0)]
    while stack:
        k, a, b, depth = stack.pop()
        if b - a <= LEAF_SIZE or depth >= MAX_DEPTH:
            continue
        idx = perm[a:b]
        ext = np.ptp(cen[idx], axis=0)
        axis = int(np.argmax(ext))
        order = np.argsort(cen[idx, axis], kind="stable")
        perm[a:b] = idx[order]
        mid = (a + b) // 2
        l_child, r_child = new_node(a, mid), new_node(mid, b)
        left[k], right[k] = l_child, r_child
        count[k] = 0
        stack += [(r_child, mid, b, depth + 1), (l_child, a, mid, depth + 1)]

    return Bvh(np.array(lo), np.array(hi), np.array(left, np.int64), np.array(right, np.int64),
               np.array(start, np.int64), np.array(count, np.int64), perm.astype(np.int64),
               np.ascontiguousarray(tri))


# ---------------------------------------------------------------------------
# kernels

@nb.njit(cache=True, error_model="numpy", inline="always")
def _segment_hits_triangle(o, d, t0, t1, A, B, C):
    """Watertight ray/triangle test (shear + edge functions); hit iff t0 < t < t1."""
    a0, a1, a2 = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if a1 > a0:
        kz = 1
        a0 = a1
    if a2 > a0:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sz = 1.0 / d[kz]
    sx = d[kx] * sz
    sy = d[ky] * sz
    az = A[kz] - o[kz]
    bz = B[kz] - o[kz]
    cz = C[kz] - o[kz]
    axx = (A[kx] - o[kx]) - sx * az
    ayy = (A[ky] - o[ky]) - sy * az
    bxx = (B[kx] - o[kx]) - sx * bz
    byy = (B[ky] - o[ky]) - sy * bz
    cxx = (C[kx] - o[kx]) - sx * cz
    cyy = (C[ky] - o[ky]) - sy * cz
    U = cxx * byy - cyy * bxx
    V = axx * cyy - ayy * cxx
    W = bxx * ayy - byy * axx
    if (U < 0.0 or V < 0.0 or W < 0.0) and (U > 0.0 or V > 0.0 or W > 0.0):
        return False
    det = U + V + W
    if det == 0.0:
        return False
    T = (U * az + V * bz + W * cz) * sz
    t = T / det
    return t0 < t < t1


@nb.njit(cache=True, error_model="numpy", inline="always")
def _slab(o, inv, lo, hi, tmin, tmax):
    ta = (lo - o) * inv
    tb = (hi - o) * inv
    if ta > tb:
        ta, tb = tb, ta
    return max(tmin, ta), min(tmax, tb)


@nb.njit(cache=True, error_model="numpy")
def _any_hit(lo, hi, left, right, start, count, perm, tri, o, d, t0, t1, skip_a, skip_b, stack):
    ox, oy, oz = o[0], o[1], o[2]
    ix = 1.0 / d[0] if d[0] != 0.0 else np.inf
    iy = 1.0 / d[1] if d[1] != 0.0 else np.inf
    iz = 1.0 / d[2] if d[2] != 0.0 else np.inf
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        tmin, tmax = _slab(ox, ix, lo[k, 0], hi[k, 0], t0, t1)
        if tmin > tmax:
            continue
        tmin, tmax = _slab(oy, iy, lo[k, 1], hi[k, 1], tmin, tmax)
        if tmin > tmax:
            continue
        tmin, tmax = _slab(oz, iz, lo[k, 2], hi[k, 2], tmin, tmax)
        if tmin > tmax:
            continue
        if left[k] < 0:
            for q in range(start[k], start[k] + count[k]):
                f = perm[q]
                if f == skip_a or f == skip_b:
                    continue
                if _segment_hits_triangle(o, d, t0, t1, tri[f, 0], tri[f, 1], tri[f, 2]):
                    return True
        else:
            stack[sp] = left[k]
            stack[sp + 1] = right[k]
            sp += 2
    return False


def _args(bvh):
    return (bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.perm, bvh.tri)


@nb.njit(cache=True, error_model="numpy")
def _sun_visible_all(lo, hi, left, right, start, count, perm, tri, centroids, normals, sun, scale):
    n = centroids.shape[0]
    out = np.zeros(n, np.bool_)
    stack = np.empty(2 * 64 + 8, np.int64)
    far = 1e3 * scale
    d = sun * far
    o = np.empty(3)
    for i in range(n):
        if normals[i, 0] * sun[0] + normals[i, 1] * sun[1] + normals[i, 2] * sun[2] <= 0.0:
            continue
        for a in range(3):
            o[a] = centroids[i, a] + 1e-5 * scale * normals[i, a]
        out[i] = not _any_hit(lo, hi, left, right, start, count, perm, tri, o, d,
                              0.0, 1.0, i, -1, stack)
    return out


# ---------------------------------------------------------------------------
# public queries

def occluded(bvh: Bvh, origin, target, skip=(-1, -1)) -> bool:
    """True iff a triangle other than those in ``skip`` crosses the open segment
    origin + t (target - origin), T_EPS < t < 1 - T_EPS."""
    o = np.asarray(origin, float)
    d = np.asarray(target, float) - o
    a, b = (tuple(skip) + (-1, -1))[:2]
    stack = np.empty(2 * MAX_DEPTH + 8, np.int64)
    return bool(_any_hit(*_args(bvh), o, d, T_EPS, 1.0 - T_EPS, int(a), int(b), stack))


def visible(mesh: TriangleMesh, bvh: Bvh, i: int, j: int) -> bool:
    """Mutual visibility of face centroids: both facing each other and unoccluded."""
    if i == j:
        raise ValueError("visibility of a face with itself is undefined")
    d = mesh.centroids[j] - mesh.centroids[i]
    if mesh.normals[i] @ d <= 0.0 or -(mesh.normals[j] @ d) <= 0.0:
        return False
    return not occluded(bvh, mesh.centroids[i], mesh.centroids[j], (i, j))


def _scale(mesh):
    return float(np.ptp(mesh.vertices, axis=0).max())


def sun_visible(mesh: TriangleMesh, bvh: Bvh, i: int, sun_dir) -> bool:
    return bool(sun_visible_all(mesh, bvh, sun_dir, faces=[i])[0])


def sun_visible_all(mesh: TriangleMesh, bvh: Bvh, sun_dir, faces=None) -> np.ndarray:
    """Per-face direct sun visibility: facing the sun and no triangle along the ray.

    The ray starts T_EPS * (mesh size) above the centroid along the normal.
    """
    sun = np.asarray(sun_dir, float)
    if abs(np.linalg.norm(sun) - 1.0) > 1e-9:
        raise ValueError("sun direction must be a unit vector")
    idx = np.arange(mesh.num_faces) if faces is None else np.asarray(faces, np.int64)
    if faces is None:
        return _sun_visible_all(*_args(bvh), mesh.centroids, mesh.normals, sun, _scale(mesh))
    # face ids must match BVH ids, so evaluate on the full arrays and pick
    out = np.zeros(len(idx), bool)
    scale = _scale(mesh)
    stack = np.empty(2 * MAX_DEPTH + 8, np.int64)
    for k, i in enumerate(idx):
        if mesh.normals[i] @ sun <= 0.0:
            continue
        o = mesh.centroids[i] + T_EPS * scale * mesh.normals[i]
        out[k] = not _any_hit(*_args(bvh), o, sun * 1e3 * scale, 0.0, 1.0, int(i), -1, stack)
    return out


def occluded_brute_force(mesh: TriangleMesh, origin, target, skip=(-1, -1)) -> bool:
    """Reference test against every triangle (Moller-Trumbore, vectorized)."""
    o = np.asarray(origin, float)
    d = np.asarray(target, float) - o
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - tri[:, 0]
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > T_EPS) & (t < 1 - T_EPS)
    for f in skip:
        if f >= 0:
            hit[f] = False
    return bool(hit.any())
