"""Insolation, scattered fluxes, equilibrium and time-dependent surface temperatures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from hvf.linalg import fixed_point_solve, tridiag_solve
from hvf.mesh import CRATER_LIT, CRATER_SHADOW, GROUND, CapCraterSpec, TriangleMesh, cap_shadowed
from hvf.raytrace import Bvh, sun_visible_all

SIGMA_SB = 5.670374419e-8
FLUX_HEADER = ["face", "Q_direct", "Q_refl", "Q_IR", "Q_abs", "T"]
TRAJECTORY_HEADER = ["t", "dx", "dy", "dz", "r_au"]


class ThermalError(ValueError):
    pass


@dataclass(frozen=True)
class PhysParams:
    """Surface and subsurface material constants (SI units, distances in AU).

    ``albedo`` may be a scalar or a per-face array.
    """

    albedo: float | np.ndarray = 0.3
    emissivity: float = 0.99
    solar_constant: float = 1361.0
    r_au: float = 1.0
    geothermal_flux: float = 0.0
    rhoc: float = 1.2e6
    conductivity: float = 1.5e-3
    sigma: float = SIGMA_SB

    def __post_init__(self):
        a = np.asarray(self.albedo, float)
        if np.any(a < 0) or np.any(a >= 1):
            raise ValueError("albedo must lie in [0, 1)")
        if not 0 < self.emissivity <= 1:
            raise ValueError("emissivity must lie in (0, 1]")
        for name in ("solar_constant", "r_au", "rhoc", "conductivity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.geothermal_flux < 0:
            raise ValueError("geothermal_flux must be nonnegative")

    def albedo_vector(self, n: int) -> np.ndarray:
        a = np.asarray(self.albedo, float)
        if a.ndim == 0:
            return np.full(n, float(a))
        if a.shape != (n,):
            raise ValueError(f"albedo has {a.size} entries for {n} faces")
        return a


@dataclass
class FluxState:
    Q_direct: np.ndarray
    Q_refl: np.ndarray
    Q_IR: np.ndarray
    Q_abs: np.ndarray
    Q_rad: np.ndarray
    T: np.ndarray
    profile: np.ndarray | None = None  # (N, M + 1), column 0 is the surface
    iterations: dict = field(default_factory=dict)


def _apply(F, x):
    """F x with negative components set to zero."""
    return np.maximum(F.matvec(x), 0.0)


# ---------------------------------------------------------------------------
# direct and scattered flux

def direct_flux(mesh: TriangleMesh, bvh: Bvh, params: PhysParams, sun_dir,
                r_au: float | None = None) -> np.ndarray:
    """Point-sun insolation (S / R^2) max(n . d, 0) on faces that see the sun."""
    sun = np.asarray(sun_dir, float)
    r = params.r_au if r_au is None else r_au
    lit = sun_visible_all(mesh, bvh, sun)
    cosine = np.maximum(mesh.normals @ sun, 0.0)
    return params.solar_constant / r ** 2 * cosine * lit


def temperature_from_flux(q, params: PhysParams) -> np.ndarray:
    return (np.maximum(q, 0.0) / (params.emissivity * params.sigma)) ** 0.25


def equilibrium(F, mesh: TriangleMesh, params: PhysParams, Q_direct,
                tol: float = 1e-7, max_iter: int = 50) -> FluxState:
    """Radiative equilibrium with multiple scattering in the visible and infrared.

    ``F`` is any operator with ``matvec`` (CSR or compressed). Both linear
    systems are solved by fixed-point iteration.
    """
    n = mesh.num_faces
    if F.shape != (n, n):
        raise ValueError(f"operator shape {F.shape} does not match {n} faces")
    Q_direct = np.asarray(Q_direct, float)
    alpha = params.albedo_vector(n)
    eps = params.emissivity
    H = np.full(n, params.geothermal_flux)

    refl = fixed_point_solve(lambda x: _apply(F, alpha * x), _apply(F, alpha * Q_direct),
                             tol, max_iter)
    Q_refl = np.maximum(refl.x, 0.0)
    visible_abs = (1 - alpha) * (Q_direct + Q_refl)
    ir = fixed_point_solve(lambda x: _apply(F, x), _apply(F, visible_abs + H), tol, max_iter)
    Q_IR = np.maximum(ir.x, 0.0)
    Q_abs = visible_abs + eps * Q_IR
    Q_rad = Q_abs + H
    T = temperature_from_flux(Q_rad, params)
    return FluxState(Q_direct, Q_refl, Q_IR, Q_abs, Q_rad, T,
                     iterations={"refl": refl.iterations, "ir": ir.iterations})


# ---------------------------------------------------------------------------
# analytic reference for a spherical cap crater

def cap_view_fraction(beta_deg: float) -> float:
    """Fraction of the hemisphere above a crater point filled by the cap."""
    b = math.radians(beta_deg)
    ratio = 2 * math.sin(b) / (1 - math.cos(b))  # diameter over depth
    return 1.0 / (1.0 + ratio ** 2 / 4)


def cap_scattering_factor(f: float, albedo: float, emissivity: float) -> float:
    return f * (emissivity + albedo * (1 - f)) / (1 - albedo * f)


REGIONS = {"ground": GROUND, "crater-lit": CRATER_LIT, "crater-shadow": CRATER_SHADOW}


def analytic_cap_temperature(spec: CapCraterSpec, params: PhysParams, region,
                             sin_e=None, sun_dir=None) -> np.ndarray:
    """Closed-form equilibrium temperature inside and around a spherical cap.

    ``region`` is a name from ``REGIONS`` or a label array; ``sin_e`` is the
    sine of the local solar elevation on lit crater points.
    """
    labels = np.asarray(REGIONS[region] if isinstance(region, str) else region)
    sun = spec.sun_dir if sun_dir is None else np.asarray(sun_dir, float)
    sin_sun = float(np.clip(sun[2], 0.0, 1.0))
    alpha = float(np.asarray(params.albedo))
    b = cap_scattering_factor(cap_view_fraction(spec.beta), alpha, params.emissivity)
    s = params.solar_constant / params.r_au ** 2
    sin_e = np.zeros(labels.shape) if sin_e is None else np.broadcast_to(sin_e, labels.shape)
    factor = np.select([labels == GROUND, labels == CRATER_LIT],
                       [np.full(labels.shape, sin_sun), np.maximum(sin_e, 0) + b * sin_sun],
                       b * sin_sun)
    return temperature_from_flux((1 - alpha) * s * factor, params)


def analytic_cap_field(mesh: TriangleMesh, spec: CapCraterSpec, params: PhysParams) -> np.ndarray:
    """Per-face analytic temperature; crater faces are split into lit and shadowed
    by the exact shadow test at their centroids, and sin e = n . sun."""
    c = mesh.centroids
    r2 = c[:, 0] ** 2 + c[:, 1] ** 2
    in_crater = r2 < spec.r_c ** 2
    shadow = cap_shadowed(c[:, 0], c[:, 1], spec)
    labels = np.where(in_crater, np.where(shadow, CRATER_SHADOW, CRATER_LIT), GROUND)
    sin_e = mesh.normals @ spec.sun_dir
    return analytic_cap_temperature(spec, params, labels, sin_e)


# ---------------------------------------------------------------------------
# subsurface conduction

@dataclass(frozen=True)
class LayerGrid:
    """Node depths z[0] = 0 (surface) < z[1] < ... < z[M] = depth."""

    z: np.ndarray

    @property
    def M(self) -> int:
        return len(self.z) - 1

    @property
    def spacing(self) -> np.ndarray:
        """dz[j - 1] = z[j] - z[j - 1], j = 1..M."""
        return np.diff(self.z)

    @property
    def widths(self) -> np.ndarray:
        """Control-volume thickness of nodes 1..M; they tile [0, depth]."""
        z = self.z
        faces = np.concatenate([[0.0], 0.5 * (z[1:-1] + z[2:]), [z[-1]]])
        return np.diff(faces)


def layer_grid(M: int = 30, depth: float = 0.5, ratio: float = 1.2) -> LayerGrid:
    """M layers whose thickness grows geometrically by ``ratio`` with depth."""
    if M < 2:
        raise ValueError("need at least two layers")
    if depth <= 0 or ratio <= 0:
        raise ValueError("depth and ratio must be positive")
    dz = ratio ** np.arange(M)
    dz *= depth / dz.sum()
    return LayerGrid(np.concatenate([[0.0], np.cumsum(dz)]))


def cn_step(profile, Q_abs_old, Q_abs_new, dt: float, params: PhysParams, grid: LayerGrid,
            insulated: bool = False, newton_iters: int = 20, newton_tol: float = 1e-7) -> np.ndarray:
    """One Crank-Nicolson step of 1D conduction under every face.

    ``profile`` has shape (N, M + 1); column 0 is the surface temperature,
    which carries no heat capacity. The radiative balance at the surface is
    linearized about the previous surface temperature; the new-level
    linearization point is then refined by Newton iterations (``newton_iters=1``
    keeps the single linearization). With ``insulated`` both boundaries are
    closed (no radiation, no geothermal flux). Returns the new profile.
    """
    if dt <= 0:
        raise ValueError("time step must be positive")
    T = np.atleast_2d(np.asarray(profile, float))
    if T.shape[1] != grid.M + 1:
        raise ValueError(f"profile has {T.shape[1]} nodes, grid has {grid.M + 1}")
    if np.any(T <= 0):
        raise ThermalError("nonpositive temperature in subsurface profile")
    M = grid.M
    g = params.conductivity / grid.spacing     # conductance between nodes j-1 and j
    c = params.rhoc * grid.widths / dt         # heat capacity per step, nodes 1..M
    nf = T.shape[0]
    es = params.emissivity * params.sigma

    def surface_coefficients(T_lin, Q):
        """T_surface = a + b T_1 from the balance linearized about T_lin."""
        lin = 4 * es * T_lin ** 3 + g[0]
        return (np.asarray(Q, float) + 3 * es * T_lin ** 4) / lin, g[0] / lin

    Ts = T[:, 1:]
    if insulated:
        a_old, b_old = np.zeros(nf), np.ones(nf)
        Fg = 0.0
    else:
        a_old, b_old = surface_coefficients(T[:, 0], Q_abs_old)
        Fg = params.geothermal_flux

    # explicit half: net conductive inflow at the old level
    flux_in = np.zeros_like(Ts)
    flux_in[:, 0] += g[0] * (a_old + (b_old - 1) * Ts[:, 0])
    flux_in[:, 1:] += g[1:] * (Ts[:, :-1] - Ts[:, 1:])
    flux_in[:, :-1] -= g[1:] * (Ts[:, :-1] - Ts[:, 1:])
    flux_in[:, -1] += Fg
    rhs0 = c * Ts + 0.5 * flux_in
    rhs0[:, -1] += 0.5 * Fg

    diag0 = np.broadcast_to(c, Ts.shape).copy()
    diag0[:, :-1] += 0.5 * g[1:]
    diag0[:, 1:] += 0.5 * g[1:]
    off = np.broadcast_to(-0.5 * g[1:], (nf, M - 1))

    T_lin = T[:, 0].copy()
    for _ in range(1 if insulated else max(1, newton_iters)):
        if insulated:
            a_new, b_new = np.zeros(nf), np.ones(nf)
        else:
            a_new, b_new = surface_coefficients(T_lin, Q_abs_new)
        diag = diag0.copy()
        diag[:, 0] += 0.5 * g[0] * (1 - b_new)
        rhs = rhs0.copy()
        rhs[:, 0] += 0.5 * g[0] * a_new
        new = tridiag_solve(off, diag, off, rhs)
        surface = a_new + b_new * new[:, 0]
        if np.any(surface <= 0) or not np.all(np.isfinite(surface)):
            break
        done = np.abs(surface - T_lin).max() <= newton_tol * T_lin.max()
        T_lin = surface
        if done:
            break
    out = np.column_stack([surface, new])
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        raise ThermalError("Crank-Nicolson step produced nonpositive temperatures")
    return out


# ---------------------------------------------------------------------------
# sun trajectories

@dataclass(frozen=True)
class SunTrajectory:
    t: np.ndarray
    directions: np.ndarray
    r_au: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float)
        d = np.asarray(self.directions, float).reshape(-1, 3)
        r = np.broadcast_to(np.asarray(self.r_au, float), t.shape).copy()
        if len(t) == 0:
            raise ValueError("trajectory is empty")
        if len(d) != len(t):
            raise ValueError("one direction per time sample required")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1) > 1e-6):
            raise ValueError("sun directions must be unit vectors")
        if np.any(r <= 0):
            raise ValueError("sun distance must be positive")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "r_au", r)

    def __len__(self):
        return len(self.t)


def circular_sun_trajectory(e0_deg: float, period: float, steps_per_cycle: int,
                            cycles: int = 1, r_au: float = 1.0) -> SunTrajectory:
    """Sun circling the zenith axis at constant elevation ``e0_deg``."""
    if steps_per_cycle < 2:
        raise ValueError("steps_per_cycle must be at least 2")
    if cycles < 1 or period <= 0:
        raise ValueError("cycles and period must be positive")
    k = np.arange(cycles * steps_per_cycle)
    phi = 2 * np.pi * k / steps_per_cycle
    e0 = math.radians(e0_deg)
    d = np.column_stack([math.cos(e0) * np.cos(phi), math.cos(e0) * np.sin(phi),
                         np.full(len(k), math.sin(e0))])
    return SunTrajectory(k * period / steps_per_cycle, d, np.full(len(k), r_au))


def read_trajectory(path) -> SunTrajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != TRAJECTORY_HEADER:
            raise ValueError(f"trajectory CSV header must be {','.join(TRAJECTORY_HEADER)}")
        rows = [[float(r[k]) for k in TRAJECTORY_HEADER] for r in reader]
    if not rows:
        raise ValueError("trajectory is empty")
    a = np.array(rows)
    return SunTrajectory(a[:, 0], a[:, 1:4], a[:, 4])


def write_trajectory(traj: SunTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for t, d, r in zip(traj.t, traj.directions, traj.r_au):
            w.writerow([repr(float(t)), *(repr(float(x)) for x in d), repr(float(r))])


# ---------------------------------------------------------------------------
# time-dependent simulation

@dataclass
class SimulationResult:
    state: FluxState
    steps: int
    times: np.ndarray
    converged: bool
    cycle_max_T: np.ndarray | None
    cycle_mean_T: np.ndarray | None
    surface_history: np.ndarray | None = None
    snapshots: dict = field(default_factory=dict)


def simulate(F, mesh: TriangleMesh, bvh: Bvh, params: PhysParams, traj: SunTrajectory,
             M: int = 30, depth: float = 0.5, steps_per_cycle: int | None = None,
             T_init=110.0, stop_at_equilibrium: bool = False, threshold: float = 1.0,
             record_surface: bool = False, snapshot_steps=(),
             max_substep: float | None = None) -> SimulationResult:
    """Step fluxes and subsurface temperatures along ``traj``.

    Each step costs one visible and one infrared product with ``F``; higher
    scattering orders lag behind in time. ``steps_per_cycle`` groups steps
    into cycles for the final-cycle statistics and the equilibrium test
    (largest change of any layer temperature between cycle ends below
    ``threshold`` kelvin). The step into sample n uses dt = t[n] - t[n-1].

    Conduction is advanced in sub-steps of at most ``max_substep`` seconds
    (default: four diffusion times of the top layer) with absorbed flux
    interpolated linearly, which keeps Crank-Nicolson from ringing when the
    trajectory is coarse. Sub-steps never add products with ``F``.
    """
    n = mesh.num_faces
    if F.shape != (n, n):
        raise ValueError(f"operator shape {F.shape} does not match {n} faces")
    if len(traj) < 2:
        raise ValueError("trajectory needs at least two samples")
    spc = len(traj) if steps_per_cycle is None else int(steps_per_cycle)
    if spc < 1:
        raise ValueError("steps_per_cycle must be positive")
    alpha = params.albedo_vector(n)
    eps = params.emissivity
    grid = layer_grid(M, depth)
    if max_substep is None:
        max_substep = 4 * params.rhoc * grid.spacing[0] ** 2 / params.conductivity
    if max_substep <= 0:
        raise ValueError("max_substep must be positive")
    T0 = np.broadcast_to(np.asarray(T_init, float), (n,))
    profile = np.repeat(T0[:, None], M + 1, axis=1)
    if np.any(profile <= 0):
        raise ThermalError("initial temperatures must be positive")

    Q_direct = direct_flux(mesh, bvh, params, traj.directions[0], traj.r_au[0])
    Q_abs = (1 - alpha) * Q_direct + params.geothermal_flux
    Q_refl = np.zeros(n)
    Q_IR = np.zeros(n)
    Q_rad = Q_abs.copy()

    history = np.empty((len(traj) - 1, n)) if record_surface else None
    snapshots = {}
    wanted = set(int(s) for s in snapshot_steps)
    cyc_max = cyc_sum = None
    cyc_count = 0
    last_cycle_profile = profile.copy()
    converged = False
    step = 0
    for step in range(1, len(traj)):
        dt = traj.t[step] - traj.t[step - 1]
        Q_direct = direct_flux(mesh, bvh, params, traj.directions[step], traj.r_au[step])
        Q_refl = _apply(F, alpha * (Q_direct + Q_refl))
        Q_IR = _apply(F, Q_rad + (1 - eps) * Q_IR)
        Q_abs_new = (1 - alpha) * (Q_direct + Q_refl) + eps * Q_IR
        nsub = max(1, math.ceil(dt / max_substep - 1e-12))
        for j in range(nsub):
            q0 = Q_abs + (Q_abs_new - Q_abs) * (j / nsub)
            q1 = Q_abs + (Q_abs_new - Q_abs) * ((j + 1) / nsub)
            profile = cn_step(profile, q0, q1, dt / nsub, params, grid)
        Q_abs = Q_abs_new
        Q_rad = eps * params.sigma * profile[:, 0] ** 4
        surface = profile[:, 0]
        if history is not None:
            history[step - 1] = surface
        if step in wanted:
            snapshots[step] = FluxState(Q_direct.copy(), Q_refl.copy(), Q_IR.copy(),
                                        Q_abs.copy(), Q_rad.copy(), surface.copy())
        if cyc_count == 0:
            cyc_max, cyc_sum = surface.copy(), np.zeros(n)
        cyc_max = np.maximum(cyc_max, surface)
        cyc_sum += surface
        cyc_count += 1
        if step % spc == 0:
            change = np.abs(profile - last_cycle_profile).max()
            last_cycle_profile = profile.copy()
            final_max, final_mean = cyc_max, cyc_sum / cyc_count
            cyc_count = 0
            if stop_at_equilibrium and step > spc and change < threshold:
                converged = True
                break
    if cyc_count:
        final_max, final_mean = cyc_max, cyc_sum / cyc_count
    state = FluxState(Q_direct, Q_refl, Q_IR, Q_abs, Q_rad, profile[:, 0].copy(), profile)
    if history is not None:
        history = history[:step]
    return SimulationResult(state, step, traj.t[:step + 1], converged, final_max, final_mean,
                            history, snapshots)


# ---------------------------------------------------------------------------
# output

def write_flux_csv(state: FluxState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLUX_HEADER)
        for i in range(len(state.T)):
            w.writerow([i, *(f"{v[i]:.9g}" for v in (state.Q_direct, state.Q_refl, state.Q_IR,
                                                     state.Q_abs, state.T))])


def write_summary_csv(result: SimulationResult, path) -> None:
    """Per-face maximum and mean surface temperature over the final cycle."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "T_max", "T_mean"])
        for i, (a, b) in enumerate(zip(result.cycle_max_T, result.cycle_mean_T)):
            w.writerow([i, f"{a:.9g}", f"{b:.9g}"])
