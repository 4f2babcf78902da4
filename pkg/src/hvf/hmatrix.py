"""Hierarchical compression of the view-factor matrix.

Blocks are chosen per node pair by minimum storage among CSR, dense,
truncated SVD and recursive subdivision; the compressed operator supports
matrix-vector products, a binary container and per-block statistics.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse

from hvf import viewfactor
from hvf.linalg import (INDEX_DTYPE, INDPTR_DTYPE, VALUE_DTYPE, ConvergenceError, DenseBlock,
                        GolubKahan, SparseCsr, TruncatedSvd, _as_columns, _to_svd,
                        run_lanczos)
from hvf.mesh import TriangleMesh
from hvf.raytrace import Bvh
from hvf.spatial import SpatialTree, TreeNode

SUBDIVIDED_OVERHEAD = 64
DEFAULT_MIN_SIZE = 16384
INITIAL_RANK = 8

MAGIC = b"HVFM"
VERSION = 1
KIND_CODES = {"quad": 0, "oct": 1}
TAG_ZERO, TAG_DENSE, TAG_CSR, TAG_SVD, TAG_SUBDIVIDED = range(5)
TAG_NAMES = {TAG_ZERO: "zero", TAG_DENSE: "dense", TAG_CSR: "csr", TAG_SVD: "svd",
             TAG_SUBDIVIDED: "subdivided"}


@dataclass(frozen=True)
class ZeroBlock:
    nrows: int
    ncols: int

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nbytes(self) -> int:
        return 0


@dataclass(frozen=True, eq=False)
class ChildBlock:
    """A block placed at absolute offsets (row0, col0) of the permuted matrix."""

    row0: int
    col0: int
    block: "VfBlock"


@dataclass(frozen=True, eq=False)
class Subdivided:
    nrows: int
    ncols: int
    children: tuple

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nbytes(self) -> int:
        return SUBDIVIDED_OVERHEAD + sum(c.block.nbytes for c in self.children)


VfBlock = Union[ZeroBlock, DenseBlock, SparseCsr, TruncatedSvd, Subdivided]


def nbytes(block: VfBlock) -> int:
    """Storage accounting used by every size comparison."""
    return block.nbytes


def tag_of(block: VfBlock) -> int:
    for cls, tag in ((ZeroBlock, TAG_ZERO), (DenseBlock, TAG_DENSE), (SparseCsr, TAG_CSR),
                     (TruncatedSvd, TAG_SVD), (Subdivided, TAG_SUBDIVIDED)):
        if isinstance(block, cls):
            return tag
    raise TypeError(f"not a view-factor block: {type(block).__name__}")


# ---------------------------------------------------------------------------
# rank estimation

def svd_nbytes_lower_bound(rank: int, m: int, n: int, m_support: int, n_support: int) -> int:
    """Bytes of a rank-``rank`` SVD whose vectors fill the nonzero rows/columns."""
    return 8 * (m + 1) + 8 * (n + 1) + 4 * rank + 8 * rank * (m_support + n_support)


def estimate_rank(block: SparseCsr, eps: float, k0: int = INITIAL_RANK,
                  seed: int = 0) -> TruncatedSvd | None:
    """Smallest truncated SVD with sigma_{q+1} < eps * sigma_1 that is smaller than
    ``block`` in bytes, or None when the block is incompressible at ``eps``.

    k starts at ``k0`` and doubles while below min(m, n) / 2. The search also
    stops as soon as any admissible rank would cost at least the CSR bytes.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if block.nnz == 0:
        raise ValueError("estimate_rank needs a nonzero block")
    m, n = block.shape
    dim = min(m, n)
    if dim < 2:
        return None
    budget = block.nbytes
    m_nz = int(np.count_nonzero(np.diff(block.indptr.astype(np.int64))))
    n_nz = int(np.unique(block.indices).size)
    gk = GolubKahan(block, seed)
    k = min(k0, dim - 1)
    if svd_nbytes_lower_bound(1, m, n, m_nz, n_nz) >= budget:
        return None
    while True:
        try:
            U, s, V = run_lanczos(gk, k)
        except ConvergenceError:
            return None
        s_rel = s / s[0]
        keep = s_rel > 1e-9
        U, s, V, s_rel = U[:, keep], s[keep], V[:, keep], s_rel[keep]
        below = np.nonzero(s_rel[1:] < eps)[0]
        if below.size:
            q = int(below[0]) + 1
        elif len(s) < k:
            q = len(s)  # numerical rank below k: the remaining singular values vanish
        else:
            q = None
        if q is not None:
            svd = _to_svd(U[:, :q], s[:q], V[:, :q])
            return svd if svd.nbytes < budget else None
        k *= 2
        if k >= dim / 2 or svd_nbytes_lower_bound(k // 2, m, n, m_nz, n_nz) >= budget:
            return None


# ---------------------------------------------------------------------------
# compression

@dataclass
class CompressionTrace:
    """Per-node decisions recorded during compression (not serialized)."""

    records: list = field(default_factory=list)

    def add(self, depth, row0, col0, shape, candidates, chosen, final):
        self.records.append(dict(depth=depth, row0=row0, col0=col0, shape=shape,
                                 candidates=dict(candidates), chosen=chosen, final=final))


def _child_nodes(node: TreeNode) -> tuple:
    return node.children if node.children else (node,)


def _coalesce(children, csr: SparseCsr, dense_fn):
    """Zero children may merge into a CSR parent (same bytes as the node's CSR),
    but not into a dense one, which could then exceed the CSR bytes."""
    kinds = {type(c.block) for c in children}
    if kinds - {ZeroBlock} == {SparseCsr}:
        return csr
    if kinds == {DenseBlock}:
        return dense_fn()
    return None


def compress_block(mesh: TriangleMesh, bvh: Bvh, tree: SpatialTree, rows: TreeNode,
                   cols: TreeNode, csr: SparseCsr | None = None, eps: float = 1e-2,
                   max_depth: int = 8, min_size: int = DEFAULT_MIN_SIZE,
                   trace: CompressionTrace | None = None) -> VfBlock:
    """Minimum-bytes representation of F[rows, cols] (node ranges of ``tree``).

    ``csr`` is the already assembled block in the nodes' permuted ordering;
    sub-blocks are sliced from it so no pair is ray-traced twice.
    """
    if csr is None:
        csr = viewfactor.assemble_block(mesh, bvh, tree.indices(rows), tree.indices(cols))
    m, n = csr.shape
    if csr.nnz == 0:
        return ZeroBlock(m, n)

    depth = max(rows.depth, cols.depth)
    bottom = depth >= max_depth or (rows.is_leaf and cols.is_leaf)
    candidates = {"csr": csr.nbytes, "dense": 4 * m * n}
    dense = None

    def make_dense():
        nonlocal dense
        if dense is None:
            dense = DenseBlock(csr.to_dense())
        return dense

    if m * n < min_size or bottom:
        chosen = "csr" if candidates["csr"] <= candidates["dense"] else "dense"
        result = csr if chosen == "csr" else make_dense()
        if trace is not None:
            trace.add(depth, rows.start, cols.start, (m, n), candidates, chosen, chosen)
        return result

    options = {"csr": csr}
    svd = estimate_rank(csr, eps)
    if svd is not None:
        candidates["svd"] = svd.nbytes
        options["svd"] = svd

    children = []
    for rn in _child_nodes(rows):
        for cn in _child_nodes(cols):
            sub = csr.slice(rn.start - rows.start, rn.stop - rows.start,
                            cn.start - cols.start, cn.stop - cols.start)
            blk = compress_block(mesh, bvh, tree, rn, cn, sub, eps, max_depth, min_size, trace)
            children.append(ChildBlock(rn.start, cn.start, blk))
    sub = Subdivided(m, n, tuple(children))
    candidates["subdivided"] = sub.nbytes
    options["subdivided"] = sub

    order = ("csr", "dense", "svd", "subdivided")
    chosen = min((k for k in order if k in candidates), key=lambda k: candidates[k])
    if chosen == "dense":
        result = make_dense()
    else:
        result = options[chosen]
    final = chosen
    if chosen == "subdivided":
        merged = _coalesce(children, csr, make_dense)
        if merged is not None:
            result = merged
            final = TAG_NAMES[tag_of(merged)]
    if trace is not None:
        trace.add(depth, rows.start, cols.start, (m, n), candidates, chosen, final)
    return result


@dataclass(frozen=True, eq=False)
class CompressedViewFactor:
    n: int
    kind: str
    perm: np.ndarray
    children: tuple  # ChildBlocks of the first level
    eps: float
    max_depth: int
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def nbytes(self) -> int:
        return sum(c.block.nbytes for c in self.children)

    @property
    def shape(self):
        return (self.n, self.n)

    def matvec(self, x):
        return hmatvec(self, x)

    def to_dense(self) -> np.ndarray:
        return hmatvec(self, np.eye(self.n))


def _permuted(full: SparseCsr, perm: np.ndarray) -> SparseCsr:
    s = full.to_scipy().tocsr()[perm][:, perm].tocsr()
    s.sort_indices()
    return SparseCsr(full.nrows, full.ncols, s.indptr, s.indices, s.data)


def _merge_strip(strip, csrs):
    """Store a first-level row strip as one Csr when that is smaller.

    Every block of a strip repeats the row pointers, so for sparse or poorly
    compressible strips a single CSR across all columns wins.
    """
    if sum(c.nnz for c in csrs) == 0:
        return strip
    s = scipy.sparse.hstack([c.to_scipy() for c in csrs], format="csr")
    s.sort_indices()
    merged = SparseCsr(s.shape[0], s.shape[1], s.indptr, s.indices, s.data)
    if merged.nbytes < sum(c.block.nbytes for c in strip):
        return [ChildBlock(strip[0].row0, strip[0].col0, merged)]
    return strip


def compress(mesh: TriangleMesh, bvh: Bvh, tree: SpatialTree, eps: float = 1e-2,
             max_depth: int = 8, min_size: int = DEFAULT_MIN_SIZE,
             full: SparseCsr | None = None,
             trace: CompressionTrace | None = None) -> CompressedViewFactor:
    """Compress each first-level (row node, column node) pair independently.

    Without ``full`` each first-level block is ray-traced on its own, so at
    most one first-level row strip is held in CSR form at a time; a strip is
    kept as a single CSR when that beats its compressed blocks. Passing an already
    assembled matrix (original face order) skips ray tracing altogether.
    """
    if tree.num_points != mesh.num_faces:
        raise ValueError("tree was built for a different mesh")
    first = _child_nodes(tree.root)
    pfull = None if full is None else _permuted(full, tree.perm)
    children = []
    assembled_nnz = 0
    peak_block_nnz = 0
    for rn in first:
        strip, csrs = [], []
        for cn in first:
            if pfull is None:
                csr = viewfactor.assemble_block(mesh, bvh, tree.indices(rn), tree.indices(cn))
            else:
                csr = pfull.slice(rn.start, rn.stop, cn.start, cn.stop)
            assembled_nnz += csr.nnz
            peak_block_nnz = max(peak_block_nnz, csr.nnz)
            blk = compress_block(mesh, bvh, tree, rn, cn, csr, eps, max_depth, min_size, trace)
            strip.append(ChildBlock(rn.start, cn.start, blk))
            csrs.append(csr)
        children.extend(_merge_strip(strip, csrs))
    n = mesh.num_faces
    stats = dict(assembled_nnz=assembled_nnz, full_csr_bytes=8 * (n + 1) + 8 * assembled_nnz,
                 peak_block_nnz=peak_block_nnz)
    return CompressedViewFactor(n, tree.kind, tree.perm.copy(), tuple(children), float(eps),
                                int(max_depth), stats)


# ---------------------------------------------------------------------------
# matrix-vector product

def iter_leaves(children, depth=1):
    """Depth-first (row-major grid order) walk yielding (depth, row0, col0, block)
    for every block, Subdivided nodes included before their children."""
    for c in children:
        yield depth, c.row0, c.col0, c.block
        if isinstance(c.block, Subdivided):
            yield from iter_leaves(c.block.children, depth + 1)


def hmatvec(F: CompressedViewFactor, x) -> np.ndarray:
    """F x for a vector or a matrix of columns, in original face ordering."""
    cols, flat = _as_columns(x, F.n)
    xp = np.ascontiguousarray(cols[F.perm])
    yp = np.zeros_like(xp)
    for _, r0, c0, blk in iter_leaves(F.children):
        if isinstance(blk, (ZeroBlock, Subdivided)):
            continue
        m, n = blk.shape
        blk.matvec(xp[c0:c0 + n], out=yp[r0:r0 + m])
    y = np.empty_like(yp)
    y[F.perm] = yp
    return y[:, 0] if flat else y


# ---------------------------------------------------------------------------
# binary container

class HvfmFormatError(ValueError):
    pass


def _pack_csr(out: list, a: SparseCsr):
    out.append(struct.pack("<IIQ", a.nrows, a.ncols, a.nnz))
    out.append(a.indptr.astype("<u8").tobytes())
    out.append(a.indices.astype("<u4").tobytes())
    out.append(a.data.astype("<f4").tobytes())


def _pack_ranges(out: list, children):
    out.append(struct.pack("<B", len(children)))
    for c in children:
        m, n = c.block.shape
        out.append(struct.pack("<IIII", c.row0, m, c.col0, n))


def _pack_block(out: list, blk: VfBlock):
    tag = tag_of(blk)
    out.append(struct.pack("<B", tag))
    if tag == TAG_ZERO:
        out.append(struct.pack("<II", blk.nrows, blk.ncols))
    elif tag == TAG_DENSE:
        out.append(struct.pack("<II", *blk.shape))
        out.append(blk.values.astype("<f4").tobytes())
    elif tag == TAG_CSR:
        _pack_csr(out, blk)
    elif tag == TAG_SVD:
        out.append(struct.pack("<I", blk.rank))
        _pack_csr(out, blk.U)
        out.append(blk.sigma.astype("<f4").tobytes())
        _pack_csr(out, blk.V)
    else:
        out.append(struct.pack("<II", blk.nrows, blk.ncols))
        _pack_ranges(out, blk.children)
        for c in blk.children:
            _pack_block(out, c.block)


def to_bytes(F: CompressedViewFactor) -> bytes:
    out = [struct.pack("<4sIIBHd", MAGIC, VERSION, F.n, KIND_CODES[F.kind], F.max_depth, F.eps),
           F.perm.astype("<u4").tobytes()]
    _pack_ranges(out, F.children)
    for c in F.children:
        _pack_block(out, c.block)
    return b"".join(out)


def save(F: CompressedViewFactor, path) -> int:
    """Write the HVFM container; returns the file size in bytes."""
    data = to_bytes(F)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, nbytes: int) -> memoryview:
        if self.pos + nbytes > len(self.buf):
            raise HvfmFormatError("truncated HVFM container")
        view = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return view

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _read_csr(r: _Reader) -> SparseCsr:
    m, n, nnz = r.unpack("<IIQ")
    indptr = r.array("<u8", m + 1).astype(INDPTR_DTYPE)
    indices = r.array("<u4", nnz).astype(INDEX_DTYPE)
    data = r.array("<f4", nnz).astype(VALUE_DTYPE)
    try:
        return SparseCsr(m, n, indptr, indices, data)
    except ValueError as exc:
        raise HvfmFormatError(f"corrupt CSR payload: {exc}") from exc


def _read_ranges(r: _Reader):
    (count,) = r.unpack("<B")
    return [r.unpack("<IIII") for _ in range(count)]


def _read_block(r: _Reader, shape) -> VfBlock:
    (tag,) = r.unpack("<B")
    if tag == TAG_ZERO:
        blk = ZeroBlock(*r.unpack("<II"))
    elif tag == TAG_DENSE:
        m, n = r.unpack("<II")
        blk = DenseBlock(r.array("<f4", m * n).reshape(m, n))
    elif tag == TAG_CSR:
        blk = _read_csr(r)
    elif tag == TAG_SVD:
        (q,) = r.unpack("<I")
        U = _read_csr(r)
        sigma = r.array("<f4", q)
        V = _read_csr(r)
        blk = TruncatedSvd(U, sigma, V)
    elif tag == TAG_SUBDIVIDED:
        m, n = r.unpack("<II")
        ranges = _read_ranges(r)
        kids = tuple(ChildBlock(r0, c0, _read_block(r, (rows, cols)))
                     for r0, rows, c0, cols in ranges)
        blk = Subdivided(m, n, kids)
    else:
        raise HvfmFormatError(f"unknown block tag {tag}")
    if tuple(blk.shape) != tuple(shape):
        raise HvfmFormatError(f"block shape {blk.shape} does not match its range {shape}")
    return blk


def from_bytes(data: bytes) -> CompressedViewFactor:
    r = _Reader(data)
    magic, version, n, kind, max_depth, eps = r.unpack("<4sIIBHd")
    if magic != MAGIC:
        raise HvfmFormatError("bad magic: not an HVFM container")
    if version != VERSION:
        raise HvfmFormatError(f"unsupported HVFM version {version}")
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind not in kinds:
        raise HvfmFormatError(f"unknown tree kind code {kind}")
    perm = r.array("<u4", n).astype(np.int64)
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise HvfmFormatError("permutation is not a bijection")
    ranges = _read_ranges(r)
    children = tuple(ChildBlock(r0, c0, _read_block(r, (rows, cols)))
                     for r0, rows, c0, cols in ranges)
    if r.pos != len(r.buf):
        raise HvfmFormatError("trailing bytes after HVFM payload")
    return CompressedViewFactor(n, kinds[kind], perm, children, eps, max_depth)


def load(path) -> CompressedViewFactor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# ---------------------------------------------------------------------------
# statistics

STATS_HEADER = ["depth", "row0", "rows", "col0", "cols", "tag", "bytes", "q"]


def block_stats(F: CompressedViewFactor) -> list[dict]:
    """One record per leaf block and per Subdivided node (its 64-byte overhead),
    so the bytes column sums to ``F.nbytes``."""
    records = []
    for depth, r0, c0, blk in iter_leaves(F.children):
        m, n = blk.shape
        own = SUBDIVIDED_OVERHEAD if isinstance(blk, Subdivided) else blk.nbytes
        records.append(dict(depth=depth, row0=r0, rows=m, col0=c0, cols=n,
                            tag=TAG_NAMES[tag_of(blk)], bytes=own,
                            q=blk.rank if isinstance(blk, TruncatedSvd) else 0))
    return records


def write_block_stats(F: CompressedViewFactor, path) -> list[dict]:
    """CSV of ``block_stats`` followed by a totals row tagged ``total``."""
    records = block_stats(F)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_HEADER)
        w.writeheader()
        w.writerows(records)
        w.writerow(dict(depth=0, row0=0, rows=F.n, col0=0, cols=F.n, tag="total",
                        bytes=sum(r["bytes"] for r in records), q=0))
    return records
