from dataclasses import dataclass

import numpy as np
import pytest

from hvf.mesh import CapCraterSpec, TriangleMesh, dem_to_mesh, make_cap_crater_mesh, make_icosphere
from hvf.raytrace import build_bvh
from hvf.viewfactor import assemble_full


@dataclass
class Scene:
    mesh: TriangleMesh
    bvh: object
    F: object
    spec: CapCraterSpec | None = None


def rough_dem(seed=0, n=65, width=2.0, bumps=14, relief=0.9):
    """Gaussian hills and bowls on a square grid centred on the origin."""
    rng = np.random.default_rng(seed)
    x = np.linspace(-width / 2, width / 2, n)
    X, Y = np.meshgrid(x, x)
    z = np.zeros_like(X)
    for _ in range(bumps):
        cx, cy = rng.uniform(-width / 2, width / 2, 2)
        s = rng.uniform(0.08, 0.3) * width / 2
        z += rng.uniform(-relief, relief) * s * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * s * s))
    return x, x.copy(), z


def flat_plane(n=6, size=1.0):
    g = np.linspace(0, size, n + 1)
    X, Y = np.meshgrid(g, g)
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    faces = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            faces += [(a, a + 1, a + n + 2), (a, a + n + 2, a + n + 1)]
    return TriangleMesh(verts, np.array(faces), orient="up")


def _scene(mesh, spec=None):
    bvh = build_bvh(mesh)
    return Scene(mesh, bvh, assemble_full(mesh, bvh), spec)


@pytest.fixture(scope="session")
def crater_small():
    """Cap crater with N = 880 faces."""
    spec = CapCraterSpec(h=0.2)
    return _scene(make_cap_crater_mesh(spec), spec)


@pytest.fixture(scope="session")
def crater_medium():
    """Cap crater with N = 1958 faces (the default edge length)."""
    spec = CapCraterSpec()
    return _scene(make_cap_crater_mesh(spec), spec)


@pytest.fixture(scope="session")
def crater_tiny():
    """Cap crater with N < 500 for brute-force comparisons."""
    spec = CapCraterSpec(h=0.3, ground_extent=1.2)
    return _scene(make_cap_crater_mesh(spec), spec)


@pytest.fixture(scope="session")
def rough_terrain():
    return _scene(dem_to_mesh(rough_dem(), 0.004, 0.02, 0.5))


@pytest.fixture(scope="session")
def rough_terrain_tiny():
    return _scene(dem_to_mesh(rough_dem(seed=3, n=33), 0.02, 0.05, 0.5))


@pytest.fixture(scope="session")
def plane():
    return _scene(flat_plane())


@pytest.fixture(scope="session")
def sphere():
    return _scene(make_icosphere(2))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
