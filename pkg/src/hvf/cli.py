"""Command-line entry point: ``hvf <command> ...``."""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from hvf import hmatrix, thermal
from hvf.linalg import ConvergenceError, SparseCsr
from hvf.mesh import CRATER, REGION_NAMES, CapCraterSpec, MeshError, make_cap_crater_mesh, read_obj, write_obj
from hvf.raytrace import build_bvh
from hvf.spatial import build_tree
from hvf.viewfactor import assemble_full


class CliError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _set_threads():
    """Validate HVF_THREADS. Every kernel is single-threaded, so any cap >= 1 holds."""
    value = os.environ.get("HVF_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError as exc:
        raise CliError(f"HVF_THREADS must be an integer, got {value!r}") from exc
    if n < 1:
        raise CliError("HVF_THREADS must be at least 1")


# ---------------------------------------------------------------------------
# operator files

def load_operator(path):
    """Compressed container (.hvfm) or raw CSR dump (.npz) written by ``assemble``."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == hmatrix.MAGIC:
        return hmatrix.load(path)
    try:
        with np.load(path) as z:
            nrows, ncols = (int(v) for v in z["shape"])
            return SparseCsr(nrows, ncols, z["indptr"], z["indices"], z["data"])
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"{path}: neither an HVFM container nor a CSR dump") from exc


def save_csr(F: SparseCsr, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, shape=np.array(F.shape, np.int64), indptr=F.indptr, indices=F.indices,
                 data=F.data)


def _params(args) -> thermal.PhysParams:
    return thermal.PhysParams(albedo=args.albedo, emissivity=args.emiss, solar_constant=args.S,
                              r_au=getattr(args, "r_au", 1.0), geothermal_flux=args.Fg,
                              rhoc=getattr(args, "rhoc", 1.2e6),
                              conductivity=getattr(args, "k", 1.5e-3))


def _sun(e0_deg: float, azimuth_deg: float) -> np.ndarray:
    e, a = math.radians(e0_deg), math.radians(azimuth_deg)
    return np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


# ---------------------------------------------------------------------------
# commands

def cmd_mkcrater(args):
    spec = CapCraterSpec(beta=args.beta, r_c=args.rc, h=args.h, e0=args.e0,
                         contour_shadow=args.contour_shadow, ground_extent=args.ground_extent)
    mesh = make_cap_crater_mesh(spec)
    write_obj(mesh, args.output)
    labels_path = args.labels or str(Path(args.output).with_suffix("")) + ".labels.csv"
    names = dict(REGION_NAMES)
    if not spec.contour_shadow:
        names[CRATER] = "crater"
    with open(labels_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["face", "label", "region"])
        for i, lab in enumerate(mesh.labels):
            w.writerow([i, int(lab), names[int(lab)]])
    counts = {names[k]: int(v) for k, v in
              zip(*np.unique(mesh.labels, return_counts=True))}
    print(f"wrote {args.output}: {mesh.num_faces} faces {counts}; labels in {labels_path}")


def cmd_assemble(args):
    mesh = read_obj(args.mesh)
    bvh = build_bvh(mesh)
    t0 = time.perf_counter()
    if args.full:
        F = assemble_full(mesh, bvh)
        save_csr(F, args.output)
        print(f"full CSR: N={mesh.num_faces} nnz={F.nnz} bytes={F.nbytes} "
              f"time={time.perf_counter() - t0:.2f}s -> {args.output}")
        return
    tree = build_tree(mesh, args.tree, args.max_depth)
    C = hmatrix.compress(mesh, bvh, tree, args.tol, args.max_depth, args.min_size)
    elapsed = time.perf_counter() - t0
    size = hmatrix.save(C, args.output)
    counts: dict = {}
    for rec in hmatrix.block_stats(C):
        counts[rec["tag"]] = counts.get(rec["tag"], 0) + 1
    print(f"compressed: N={C.n} eps={C.eps:g} bytes={C.nbytes} "
          f"full_csr_bytes={C.stats['full_csr_bytes']} file={size} time={elapsed:.2f}s "
          f"blocks={counts} -> {args.output}")


def cmd_equilibrium(args):
    mesh = read_obj(args.mesh)
    F = load_operator(args.F)
    if F.shape != (mesh.num_faces, mesh.num_faces):
        raise CliError(f"operator is {F.shape[0]}x{F.shape[1]} but the mesh has "
                       f"{mesh.num_faces} faces")
    params = _params(args)
    bvh = build_bvh(mesh)
    q = thermal.direct_flux(mesh, bvh, params, _sun(args.e0, args.azimuth))
    state = thermal.equilibrium(F, mesh, params, q)
    thermal.write_flux_csv(state, args.output)
    print(f"equilibrium: N={mesh.num_faces} T in [{state.T.min():.2f}, {state.T.max():.2f}] K, "
          f"iterations {state.iterations} -> {args.output}")


def _repeat(traj: thermal.SunTrajectory, cycles: int) -> thermal.SunTrajectory:
    if cycles == 1:
        return traj
    step = traj.t[1] - traj.t[0] if len(traj) > 1 else 1.0
    period = traj.t[-1] - traj.t[0] + step
    t = np.concatenate([traj.t + c * period for c in range(cycles)])
    return thermal.SunTrajectory(t, np.tile(traj.directions, (cycles, 1)),
                                 np.tile(traj.r_au, cycles))


def cmd_simulate(args):
    mesh = read_obj(args.mesh)
    F = load_operator(args.F)
    if F.shape != (mesh.num_faces, mesh.num_faces):
        raise CliError(f"operator is {F.shape[0]}x{F.shape[1]} but the mesh has "
                       f"{mesh.num_faces} faces")
    one_cycle = thermal.read_trajectory(args.traj)
    traj = _repeat(one_cycle, args.cycles)
    if len(traj) < 2:
        raise CliError("trajectory needs at least two samples")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    snaps = range(args.snapshot_every, len(traj), args.snapshot_every) if args.snapshot_every else ()
    result = thermal.simulate(F, mesh, build_bvh(mesh), _params(args), traj, M=args.M,
                              depth=args.depth, steps_per_cycle=len(one_cycle), T_init=args.T0,
                              stop_at_equilibrium=args.stop_at_equilibrium, snapshot_steps=snaps)
    for step, state in sorted(result.snapshots.items()):
        thermal.write_flux_csv(state, out / f"step_{step:06d}.csv")
    thermal.write_flux_csv(result.state, out / "final.csv")
    thermal.write_summary_csv(result, out / "summary.csv")
    status = "reached equilibrium" if result.converged else "ran all steps"
    print(f"simulate: {result.steps} steps, {status}; final T in "
          f"[{result.state.T.min():.2f}, {result.state.T.max():.2f}] K -> {out}")


VALIDATE_HEADER = ["N", "eps", "l1", "l2", "linf", "bytes", "t_assemble_s", "t_matvec_s"]


def _errors(T, Ta):
    d = T - Ta
    return [float(np.linalg.norm(d, p) / np.linalg.norm(Ta, p)) for p in (1, 2, np.inf)]


def _time_matvec(F, n, repeats=5):
    x = np.random.default_rng(0).random(n)
    F.matvec(x)
    t0 = time.perf_counter()
    for _ in range(repeats):
        F.matvec(x)
    return (time.perf_counter() - t0) / repeats


def validate_cap(hs, tols, spec_kwargs, params, region="shadow", max_depth=None,
                 min_size=hmatrix.DEFAULT_MIN_SIZE, log=print):
    """Rows of VALIDATE_HEADER: full operator (eps = 0) then each tolerance, per h."""
    rows = []
    for h in hs:
        spec = CapCraterSpec(h=h, **spec_kwargs)
        mesh = make_cap_crater_mesh(spec)
        bvh = build_bvh(mesh)
        Ta_all = thermal.analytic_cap_field(mesh, spec, params)
        pick = {"shadow": mesh.labels == 2, "crater": mesh.labels != 0,
                "all": np.ones(mesh.num_faces, bool)}[region]
        q = thermal.direct_flux(mesh, bvh, params, spec.sun_dir)
        t0 = time.perf_counter()
        full = assemble_full(mesh, bvh)
        t_full = time.perf_counter() - t0
        ops = [(0.0, full, full.nbytes, t_full)]
        depth = max_depth or max(2, int(round(math.log(mesh.num_faces / 64, 4))) + 1)
        tree = build_tree(mesh, "quad", depth)
        for eps in tols:
            t0 = time.perf_counter()
            C = hmatrix.compress(mesh, bvh, tree, eps, depth, min_size, full=full)
            ops.append((eps, C, C.nbytes, t_full + time.perf_counter() - t0))
        for eps, F, size, t_asm in ops:
            T = thermal.equilibrium(F, mesh, params, q).T
            row = [mesh.num_faces, eps, *_errors(T[pick], Ta_all[pick]), size, t_asm,
                   _time_matvec(F, mesh.num_faces)]
            rows.append(row)
            log(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    return rows


def cmd_validate_cap(args):
    params = thermal.PhysParams(albedo=args.albedo, emissivity=args.emiss, solar_constant=args.S)
    spec_kwargs = dict(beta=args.beta, r_c=args.rc, e0=args.e0)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    print(",".join(VALIDATE_HEADER))
    rows = validate_cap(args.hs, args.tols, spec_kwargs, params, args.region, args.max_depth,
                        args.min_size)
    for name, cols in (("errors.csv", VALIDATE_HEADER),
                       ("sizes.csv", ["N", "eps", "bytes"]),
                       ("timings.csv", ["N", "eps", "t_assemble_s", "t_matvec_s"])):
        idx = [VALIDATE_HEADER.index(c) for c in cols]
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in rows:
                w.writerow([row[i] for i in idx])
    print(f"wrote errors.csv, sizes.csv, timings.csv to {out}")


def cmd_stats(args):
    C = hmatrix.load(args.F)
    records = hmatrix.write_block_stats(C, args.output)
    total = sum(r["bytes"] for r in records)
    print(f"{len(records)} block records, total bytes {total} -> {args.output}")


# ---------------------------------------------------------------------------
# parser

def _add_params(p, albedo=0.3, emiss=0.99, S=1000.0):
    p.add_argument("--S", type=_positive, default=S, help="solar constant at 1 AU [W/m^2]")
    p.add_argument("--albedo", type=float, default=albedo, help="Lambert albedo [-]")
    p.add_argument("--emiss", type=float, default=emiss, help="infrared emissivity [-]")
    p.add_argument("--Fg", type=float, default=0.0, help="geothermal heat flux [W/m^2]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mkcrater", help="mesh a spherical-cap crater in a flat plane")
    p.add_argument("--beta", type=float, default=40.0, help="cap opening half-angle [deg]")
    p.add_argument("--rc", type=_positive, default=0.8, help="rim radius [m]")
    p.add_argument("--h", type=_positive, default=(2 / 3) ** 5, help="target edge length [m]")
    p.add_argument("--e0", type=float, default=15.0, help="sun elevation for the shadow line [deg]")
    p.add_argument("--contour-shadow", type=_bool, default=True,
                   help="align mesh edges with the shadow line (true/false)")
    p.add_argument("--ground-extent", type=_positive, default=1.5,
                   help="half-width of the square ground plane [m]")
    p.add_argument("--labels", help="region labels CSV (default: <output>.labels.csv)")
    p.add_argument("-o", "--output", required=True, help="output OBJ path")
    p.set_defaults(func=cmd_mkcrater)

    p = sub.add_parser("assemble", help="assemble a compressed (or full) view-factor matrix")
    p.add_argument("--mesh", required=True, help="input OBJ mesh")
    p.add_argument("--tol", type=_positive, default=1e-2, help="compression tolerance eps [-]")
    p.add_argument("--tree", choices=["quad", "oct"], default="quad", help="spatial tree kind")
    p.add_argument("--max-depth", type=int, default=4, help="maximum tree depth [levels]")
    p.add_argument("--min-size", type=int, default=hmatrix.DEFAULT_MIN_SIZE,
                   help="smallest block (rows*cols entries) considered for SVD/recursion")
    p.add_argument("--full", action="store_true", help="write the uncompressed CSR (.npz) instead")
    p.add_argument("-o", "--output", required=True, help="output file (.hvfm or .npz)")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("equilibrium", help="radiative equilibrium temperatures")
    p.add_argument("--mesh", required=True)
    p.add_argument("--F", required=True, help="HVFM container or CSR dump")
    p.add_argument("--e0", type=float, default=15.0, help="sun elevation [deg]")
    p.add_argument("--azimuth", type=float, default=0.0, help="sun azimuth from +x [deg]")
    _add_params(p)
    p.add_argument("-o", "--output", required=True, help="flux/temperature CSV")
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("simulate", help="time-dependent run with subsurface conduction")
    p.add_argument("--mesh", required=True)
    p.add_argument("--F", required=True, help="HVFM container or CSR dump")
    p.add_argument("--traj", required=True, help="one-cycle trajectory CSV (t,dx,dy,dz,r_au)")
    p.add_argument("--M", type=int, default=30, help="number of subsurface layers")
    p.add_argument("--depth", type=_positive, default=0.5, help="depth of the layer grid [m]")
    p.add_argument("--rhoc", type=_positive, default=1.2e6,
                   help="volumetric heat capacity [J/(m^3 K)]")
    p.add_argument("--k", type=_positive, default=1.5e-3, help="thermal conductivity [W/(m K)]")
    p.add_argument("--T0", type=_positive, default=110.0, help="initial temperature [K]")
    p.add_argument("--cycles", type=int, default=1, help="repetitions of the trajectory")
    p.add_argument("--stop-at-equilibrium", action="store_true",
                   help="stop once layer temperatures change < 1 K between cycles")
    p.add_argument("--snapshot-every", type=int, default=0, help="write a CSV every K steps")
    _add_params(p, albedo=0.2, emiss=0.95, S=1361.0)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate-cap", help="errors vs the analytic cap-crater solution")
    p.add_argument("--hs", type=_floats, required=True, help="comma-separated edge lengths [m]")
    p.add_argument("--tols", type=_floats, default=[1e-1, 1e-2, 1e-3],
                   help="comma-separated compression tolerances")
    p.add_argument("--beta", type=float, default=40.0)
    p.add_argument("--rc", type=_positive, default=0.8)
    p.add_argument("--e0", type=float, default=15.0)
    p.add_argument("--region", choices=["shadow", "crater", "all"], default="shadow",
                   help="faces entering the error norms")
    p.add_argument("--max-depth", type=int, default=None, help="tree depth (default: from N)")
    p.add_argument("--min-size", type=int, default=hmatrix.DEFAULT_MIN_SIZE)
    _add_params(p)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_validate_cap)

    p = sub.add_parser("stats", help="per-block statistics of a compressed matrix")
    p.add_argument("--F", required=True, help="HVFM container")
    p.add_argument("-o", "--output", required=True, help="block CSV")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cycles", 1) < 1:
        parser.error("--cycles must be at least 1")
    try:
        _set_threads()
        args.func(args)
    except (CliError, MeshError, hmatrix.HvfmFormatError, ConvergenceError, ValueError,
            OSError) as exc:
        print(f"hvf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
