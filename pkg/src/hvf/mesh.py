"""Triangle meshes: face geometry, the spherical-cap crater generator, OBJ and DEM input."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GROUND, CRATER_LIT, CRATER_SHADOW = 0, 1, 2
CRATER = 1
REGION_NAMES = {GROUND: "ground", CRATER_LIT: "crater-lit", CRATER_SHADOW: "crater-shadow"}


class MeshError(ValueError):
    pass


def _face_geometry(vertices, faces):
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    cross = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(cross, axis=1)
    return (p0 + p1 + p2) / 3.0, cross, norm


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh with per-face centroid, unit normal and area.

    ``orient`` controls normal orientation: ``"up"`` flips faces so that
    n_z > 0 (graph surfaces), ``"outward"`` flips every face of a closed
    body when its signed volume is negative, ``"keep"`` uses the winding
    as given. Flipping swaps two face indices so winding and normal agree.
    """

    vertices: np.ndarray
    faces: np.ndarray
    orient: str = "keep"
    labels: np.ndarray | None = None
    centroids: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must have shape (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise MeshError("no faces")
        if faces.min() < 0 or faces.max() >= len(vertices):
            bad = int(np.flatnonzero((faces < 0).any(1) | (faces >= len(vertices)).any(1))[0])
            raise MeshError(f"face {bad} has a vertex index out of range")

        centroids, cross, norm = _face_geometry(vertices, faces)
        scale = max(float(np.ptp(vertices, axis=0).max()), 1e-300)
        degenerate = (norm <= 1e-14 * scale * scale) | (faces[:, 0] == faces[:, 1]) \
            | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if degenerate.any():
            raise MeshError(f"face {int(np.flatnonzero(degenerate)[0])} is degenerate (zero area)")

        normals = cross / norm[:, None]
        if self.orient == "up":
            flip = normals[:, 2] < 0
        elif self.orient == "outward":
            signed_volume = np.einsum("ij,ij->", centroids, cross) / 6.0
            flip = np.full(len(faces), signed_volume < 0)
        elif self.orient == "keep":
            flip = np.zeros(len(faces), bool)
        else:
            raise MeshError(f"unknown orientation rule {self.orient!r}")
        faces[flip] = faces[flip][:, [0, 2, 1]]
        normals[flip] *= -1.0

        labels = None if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        if labels is not None and labels.shape != (len(faces),):
            raise MeshError("labels must have one entry per face")

        for name, value in [("vertices", vertices), ("faces", faces), ("labels", labels),
                            ("centroids", centroids), ("normals", normals), ("areas", norm / 2.0)]:
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def __len__(self):
        return len(self.faces)

    def boundary_edge_counts(self):
        """Return (interior, boundary, nonmanifold) undirected edge counts."""
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                        self.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return int((counts == 2).sum()), int((counts == 1).sum()), int((counts > 2).sum())


def derive_face_data(vertices, faces, orient="keep", labels=None) -> TriangleMesh:
    return TriangleMesh(vertices, faces, orient=orient, labels=labels)


# ---------------------------------------------------------------------------
# OBJ

def write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def read_obj(path, orient="keep") -> TriangleMesh:
    """Read the ``v``/``f`` subset of ASCII OBJ. Texture/normal indices (``1/2/3``) are ignored."""
    vertices, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError
                    vertices.append([float(t) for t in parts[1:4]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise MeshError(f"line {lineno}: non-triangular face")
                    idx = [int(t.split("/")[0]) for t in parts[1:]]
                    faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
                elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib", "l"):
                    continue
                else:
                    raise ValueError
            except MeshError:
                raise
            except ValueError:
                raise MeshError(f"line {lineno}: malformed record {line.strip()!r}") from None
    if not faces:
        raise MeshError("no faces")
    return TriangleMesh(np.array(vertices, float).reshape(-1, 3), np.array(faces), orient=orient)


# ---------------------------------------------------------------------------
# Spherical-cap crater

@dataclass(frozen=True)
class CapCraterSpec:
    """Spherical-cap crater in a square ground plane (z = 0).

    The sphere center sits at height ``H_c`` above the ground, so the bowl
    floor is at z = H_c - r. Angles are in degrees, lengths in meters. The
    sun azimuth is +x: d_sun = (cos e0, 0, sin e0).
    """

    beta: float = 40.0
    r_c: float = 0.8
    h: float = (2.0 / 3.0) ** 5
    e0: float = 15.0
    contour_shadow: bool = True
    ground_extent: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.beta < 90.0:
            raise MeshError("beta must lie in (0, 90) degrees")
        if self.r_c <= 0 or self.h <= 0:
            raise MeshError("r_c and h must be positive")
        if self.ground_extent <= self.r_c:
            raise MeshError("ground_extent must exceed the rim radius r_c")
        if self.contour_shadow and not 0.0 < self.e0 <= 90.0:
            raise MeshError("shadow contouring needs 0 < e0 <= 90 degrees")

    @property
    def r(self) -> float:
        return self.r_c / math.sin(math.radians(self.beta))

    @property
    def H_c(self) -> float:
        return self.r * math.cos(math.radians(self.beta))

    @property
    def depth(self) -> float:
        return self.r - self.H_c

    @property
    def sun_dir(self) -> np.ndarray:
        e = math.radians(self.e0)
        return np.array([math.cos(e), 0.0, math.sin(e)])

    def surface_z(self, x, y):
        """Height of the true surface (ground or sphere) above (x, y)."""
        rho2 = np.asarray(x, float) ** 2 + np.asarray(y, float) ** 2
        inside = rho2 < self.r_c ** 2 * (1.0 - 1e-12)
        z = self.H_c - np.sqrt(np.maximum(self.r ** 2 - rho2, 0.0))
        return np.where(inside, z, 0.0)


def _rim_x(y, spec):
    return math.sqrt(max(spec.r_c ** 2 - y * y, 0.0))


def silhouette_span(spec: CapCraterSpec) -> float:
    """Largest |y| on the silhouette (y_p); 0 when the bowl has no shadow.

    The silhouette and rim roots coalesce where the rim slope along x equals
    tan(e0), i.e. at sqrt(r_c^2 - y^2) = H_c tan(e0).
    """
    if spec.e0 >= 90.0:
        return 0.0
    t = spec.H_c * math.tan(math.radians(spec.e0))
    return math.sqrt(spec.r_c ** 2 - t * t) if t < spec.r_c else 0.0


def silhouette_residual(x, y, spec: CapCraterSpec) -> float:
    """Bowl depth below the rim plane minus the rise of a sun ray out to the rim."""
    return (math.sqrt(spec.r ** 2 - x * x - y * y) - spec.H_c
            - math.tan(math.radians(spec.e0)) * (_rim_x(y, spec) - x))


def _silhouette_root(y, spec):
    """Interior root of the concave residual, bracketed by [-x_rim, argmax]."""
    x_rim = _rim_x(y, spec)
    x_peak = math.sin(math.radians(spec.e0)) * math.sqrt(spec.r ** 2 - y * y)
    if x_peak >= x_rim:
        return None
    lo, hi = -x_rim, x_peak
    tol = 1e-10 * spec.r_c
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if silhouette_residual(mid, y, spec) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@functools.lru_cache(maxsize=64)
def _extrapolation(spec: CapCraterSpec, gap: float):
    """(cutoff |y|, slope, intercept) of the near-rim linear fit, or None if not needed."""
    y_p = silhouette_span(spec)

    def sep(yy):
        x = _silhouette_root(yy, spec)
        return -1.0 if x is None else _rim_x(yy, spec) - x

    if gap <= 0.0 or sep(0.0) <= gap:
        return None
    lo, hi = 0.0, y_p
    while hi - lo > 1e-8 * spec.r_c:
        mid = 0.5 * (lo + hi)
        if sep(mid) >= gap:
            lo = mid
        else:
            hi = mid
    step = max(lo, 1e-12) / 16.0
    ys = np.array([lo - k * step for k in range(4)])
    xs = np.array([_silhouette_root(v, spec) for v in ys])
    slope, intercept = np.polyfit(ys, xs, 1)
    return lo, float(slope), float(intercept)


def silhouette_x(y_s: float, spec: CapCraterSpec, coalesce_gap: float | None = None) -> float:
    """x-coordinate of the shadow line at ``y_s``.

    Where the silhouette and rim roots are closer than ``coalesce_gap``
    (default 10 h, capped at r_c/20) the root finder loses accuracy, so the
    value is linearly extrapolated from the last four well-separated samples.
    """
    y_p = silhouette_span(spec)
    ay = abs(y_s)
    if y_p == 0.0 or ay > y_p * (1 + 1e-12):
        raise MeshError("outside silhouette span")
    gap = min(10.0 * spec.h, 0.05 * spec.r_c) if coalesce_gap is None else coalesce_gap
    fit = _extrapolation(spec, gap)
    if fit is None or ay <= fit[0]:
        x = _silhouette_root(min(ay, y_p), spec)
        return _rim_x(ay, spec) if x is None else x
    _, slope, intercept = fit
    return min(slope * ay + intercept, _rim_x(ay, spec))


def cap_shadowed(x, y, spec: CapCraterSpec, sun_dir=None) -> np.ndarray:
    """Exact shadow test for points of the true bowl surface above (x, y).

    A point is lit when its inward normal faces the sun and the sun ray
    leaves the sphere at or above the rim plane.
    """
    d = spec.sun_dir if sun_dir is None else np.asarray(sun_dir, float)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    p = np.stack([x, y, spec.surface_z(x, y)], axis=-1)
    rel = p - np.array([0.0, 0.0, spec.H_c])
    along = rel @ d
    inward_dot = -along / spec.r
    z_exit = p[..., 2] - 2.0 * along * d[2]
    inside = x ** 2 + y ** 2 < spec.r_c ** 2
    return inside & ((inward_dot <= 0.0) | (z_exit < 0.0))


def _row_levels(breaks, curves_for_zone, h):
    """y-levels with spacing <= 0.8 h and boundary chords <= h on every active curve."""
    dy_max = 0.8 * h
    levels = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b - a <= 1e-12 * h:
            continue
        curves = curves_for_zone(0.5 * (a + b))
        zone = [a]
        y = a
        while b - y > 1e-9 * h:
            dy = min(dy_max, b - y)
            for _ in range(60):
                y1 = y + dy
                if all(math.hypot(c(y1) - c(y), dy) <= h for c in curves):
                    break
                dy *= 0.5
            y = b if b - (y + dy) <= 1e-9 * h else y + dy
            zone.append(y)
        if len(zone) >= 3:
            last, prev = zone[-1] - zone[-2], zone[-2] - zone[-3]
            if last < 0.3 * prev:
                mid = 0.5 * (zone[-3] + zone[-1])
                if all(math.hypot(c(mid) - c(zone[-3]), mid - zone[-3]) <= h
                       and math.hypot(c(zone[-1]) - c(mid), zone[-1] - mid) <= h for c in curves):
                    zone[-2] = mid
        levels.extend(zone[1:])
    return levels


def _chain(xl, xr, y, h):
    width = xr - xl
    if width <= 1e-12 * max(h, 1.0):
        return [(xr, y)]
    n = max(1, math.ceil(width / h - 1e-9))
    xs = [xl + width * k / n for k in range(n)] + [xr]
    return [(x, y) for x in xs]


def _stitch(lower, upper):
    """Triangulate the strip between two x-sorted point chains (CCW triangles)."""
    tris = []
    i = j = 0
    p, q = len(lower) - 1, len(upper) - 1
    while i < p or j < q:
        if j == q or (i < p and (i + 1) / max(p, 1) <= (j + 1) / max(q, 1)):
            tris.append((lower[i], lower[i + 1], upper[j]))
            i += 1
        else:
            tris.append((lower[i], upper[j + 1], upper[j]))
            j += 1
    return tris


def make_cap_crater_mesh(spec: CapCraterSpec) -> TriangleMesh:
    """Mesh the ground square, the bowl and (optionally) its shadow part.

    Regions are meshed with shared row levels and shared boundary vertices,
    so the union is conforming. Labels: 0 ground, 1 lit (or whole) crater,
    2 shadowed crater. Every 3D triangle has area <= (2/3) h^2.
    """
    h, G, r_c = spec.h, spec.ground_extent, spec.r_c
    y_p = silhouette_span(spec) if spec.contour_shadow else 0.0
    shadow = y_p > 0.0

    xs_cache: dict[float, float] = {}

    def x_sil(y):
        if y not in xs_cache:
            xs_cache[y] = min(silhouette_x(y, spec), _rim_x(y, spec))
        return xs_cache[y]

    def rim(y):
        return _rim_x(y, spec)

    def neg_rim(y):
        return -_rim_x(y, spec)

    breaks = [-G, -r_c, r_c, G]
    if shadow:
        breaks = [-G, -r_c, -y_p, y_p, r_c, G]

    def curves_for_zone(ym):
        if abs(ym) >= r_c:
            return []
        cs = [rim, neg_rim]
        if shadow and abs(ym) < y_p:
            cs.append(x_sil)
        return cs

    levels = _row_levels(breaks, curves_for_zone, h)

    def ground_left(y):
        return (-G, -rim(y)) if abs(y) < r_c else (-G, 0.0)

    def ground_right(y):
        return (rim(y), G) if abs(y) < r_c else (0.0, G)

    def crater_lit(y):
        if abs(y) > r_c:
            return None
        if shadow and abs(y) < y_p:
            return (-rim(y), x_sil(y))
        return (-rim(y), rim(y))

    def crater_shadow(y):
        if not shadow or abs(y) > y_p:
            return None
        if abs(y) == y_p:
            return (rim(y), rim(y))
        return (x_sil(y), rim(y))

    regions = [(GROUND, ground_left), (GROUND, ground_right), (CRATER_LIT, crater_lit)]
    if shadow:
        regions.append((CRATER_SHADOW, crater_shadow))

    tri_pts, tri_labels = [], []
    for label, interval in regions:
        prev = None
        for y in levels:
            iv = interval(y)
            chain = None if iv is None else _chain(iv[0], iv[1], y, h)
            if prev is not None and chain is not None:
                tris = _stitch(prev, chain)
                tri_pts.extend(tris)
                tri_labels.extend([label] * len(tris))
            prev = chain

    index: dict[tuple[float, float], int] = {}
    faces = np.empty((len(tri_pts), 3), np.int64)
    for t, tri in enumerate(tri_pts):
        for k, pt in enumerate(tri):
            faces[t, k] = index.setdefault(pt, len(index))
    xy = np.array(list(index.keys()), float)
    z = spec.surface_z(xy[:, 0], xy[:, 1])
    vertices = np.column_stack([xy, z])

    labels = np.array(tri_labels, np.int64)
    if not spec.contour_shadow:
        labels[labels == CRATER_LIT] = CRATER
    mesh = TriangleMesh(vertices, faces, orient="up", labels=labels)
    if mesh.areas.max() > (2.0 / 3.0) * h * h:
        raise MeshError("area bound violated; spec infeasible")
    return mesh


# ---------------------------------------------------------------------------
# Closed bodies

def make_icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere with outward normals; 20 * 4**subdivisions faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(radius * np.array(verts), np.array(faces), orient="outward")


# ---------------------------------------------------------------------------
# DEM

def read_dem(path):
    """Read a DEM text grid. Returns (x, y, z) with z of shape (ny, nx)."""
    tokens = Path(path).read_text().split()
    if len(tokens) < 6:
        raise MeshError("malformed DEM header: expected 'nx ny dx dy x0 y0'")
    try:
        nx, ny = int(tokens[0]), int(tokens[1])
        dx, dy, x0, y0 = (float(t) for t in tokens[2:6])
        z = np.array([float(t) for t in tokens[6:]])
    except ValueError:
        raise MeshError("malformed DEM header: expected 'nx ny dx dy x0 y0'") from None
    if nx < 2 or ny < 2 or dx <= 0 or dy <= 0:
        raise MeshError("malformed DEM header: need nx, ny >= 2 and positive spacing")
    if z.size != nx * ny:
        raise MeshError(f"DEM has {z.size} elevations, header promises nx*ny = {nx * ny}")
    return x0 + dx * np.arange(nx), y0 + dy * np.arange(ny), z.reshape(ny, nx)


def write_dem(path, x0, y0, dx, dy, z) -> None:
    z = np.asarray(z, float)
    ny, nx = z.shape
    header = " ".join(repr(float(v)) for v in (dx, dy, x0, y0))
    with open(path, "w") as f:
        f.write(f"{nx} {ny} {header}\n")
        np.savetxt(f, z, fmt="%.17g")


def dem_to_mesh(grid, max_area_inner: float, max_area_outer: float, roi_radius: float,
                max_rounds: int = 60) -> TriangleMesh:
    """Graded Delaunay triangulation of a DEM extent.

    Triangles touching the circular ROI (centered on the grid) get area
    <= ``max_area_inner``, all others <= ``max_area_outer``; areas are 3D,
    with heights bilinearly interpolated. Refinement inserts centroids of
    violating triangles and re-triangulates until every bound holds.
    """
    from scipy.interpolate import RegularGridInterpolator
    from scipy.spatial import Delaunay

    x, y, z = read_dem(grid) if isinstance(grid, (str, Path)) else grid
    if max_area_inner <= 0 or max_area_outer <= 0:
        raise MeshError("area bounds must be positive")
    interp = RegularGridInterpolator((y, x), z, method="linear")
    center = np.array([0.5 * (x[0] + x[-1]), 0.5 * (y[0] + y[-1])])

    s_out = math.sqrt(max_area_outer)
    s_in = math.sqrt(max_area_inner)
    nxb = max(2, math.ceil((x[-1] - x[0]) / s_out) + 1)
    nyb = max(2, math.ceil((y[-1] - y[0]) / s_out) + 1)
    gx, gy = np.meshgrid(np.linspace(x[0], x[-1], nxb), np.linspace(y[0], y[-1], nyb))
    pts = [np.column_stack([gx.ravel(), gy.ravel()])]
    if roi_radius > 0 and max_area_inner < max_area_outer:
        n_in = math.ceil(2 * roi_radius / s_in) + 1
        ix, iy = np.meshgrid(np.linspace(-roi_radius, roi_radius, n_in),
                             np.linspace(-roi_radius, roi_radius, n_in))
        inner = np.column_stack([ix.ravel(), iy.ravel()]) + center
        keep = (np.hypot(*(inner - center).T) <= roi_radius) \
            & (inner[:, 0] > x[0]) & (inner[:, 0] < x[-1]) & (inner[:, 1] > y[0]) & (inner[:, 1] < y[-1])
        pts.append(inner[keep])
    pts = np.unique(np.concatenate(pts), axis=0)

    def lift(p):
        return np.column_stack([p, interp(p[:, ::-1])])

    for _ in range(max_rounds):
        tri = Delaunay(pts).simplices
        xyz = lift(pts)
        a, b, c = xyz[tri[:, 0]], xyz[tri[:, 1]], xyz[tri[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        probe = np.concatenate([pts[tri], ((pts[tri] + np.roll(pts[tri], 1, axis=1)) / 2)], axis=1)
        probe = np.concatenate([probe, pts[tri].mean(axis=1, keepdims=True)], axis=1)
        touches = (np.hypot(probe[..., 0] - center[0], probe[..., 1] - center[1]) <= roi_radius).any(1)
        touches &= roi_radius > 0
        bound = np.where(touches, max_area_inner, max_area_outer)
        bad = area > bound
        if not bad.any():
            break
        pts = np.concatenate([pts, pts[tri[bad]].mean(axis=1)])
    else:
        raise MeshError("DEM refinement did not converge")

    p2 = pts[tri]
    signed = (p2[:, 1, 0] - p2[:, 0, 0]) * (p2[:, 2, 1] - p2[:, 0, 1]) \
        - (p2[:, 2, 0] - p2[:, 0, 0]) * (p2[:, 1, 1] - p2[:, 0, 1])
    tri = tri[np.abs(signed) > 1e-12 * (x[-1] - x[0]) * (y[-1] - y[0])]
    return TriangleMesh(xyz, tri, orient="up")
