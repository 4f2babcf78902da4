"""Quadtree / octree over face centroids, stored as ranges of one permutation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hvf.mesh import TriangleMesh

KINDS = {"quad": 2, "oct": 3}


@dataclass(frozen=True, eq=False)
class TreeNode:
    start: int
    stop: int
    depth: int
    lo: np.ndarray
    hi: np.ndarray
    children: tuple = field(default=())

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True, eq=False)
class SpatialTree:
    """Node ``k`` owns faces ``perm[node.start:node.stop]``."""

    kind: str
    perm: np.ndarray
    nodes: tuple
    max_depth: int
    min_leaf: int

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    @property
    def num_points(self) -> int:
        return len(self.perm)

    def indices(self, node: TreeNode) -> np.ndarray:
        return self.perm[node.start:node.stop]

    def level(self, depth: int) -> list:
        """Nodes at ``depth`` plus shallower leaves, so the result partitions [N]."""
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.depth == depth or node.is_leaf:
                out.append(node)
            else:
                stack.extend(reversed(node.children))
        return sorted(out, key=lambda nd: nd.start)

    @property
    def depth(self) -> int:
        return max(nd.depth for nd in self.nodes)


def _build(points, perm, start, stop, depth, dims, max_depth, min_leaf, nodes):
    idx = perm[start:stop]
    pts = points[idx]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    slot = len(nodes)
    nodes.append(None)
    children = []
    if depth < max_depth and stop - start > min_leaf:
        mid = 0.5 * (lo + hi)
        upper = pts >= mid
        code = np.zeros(len(idx), np.int64)
        for a in range(dims):
            code = 2 * code + upper[:, a]
        order = np.argsort(code, kind="stable")
        perm[start:stop] = idx[order]
        bounds = np.searchsorted(code[order], np.arange(2 ** dims + 1))
        for c in range(2 ** dims):
            a, b = start + bounds[c], start + bounds[c + 1]
            if b > a:
                children.append(_build(points, perm, a, b, depth + 1, dims,
                                       max_depth, min_leaf, nodes))
    node = TreeNode(start, stop, depth, lo, hi, tuple(children))
    nodes[slot] = node
    return node


def build_tree(mesh: TriangleMesh | np.ndarray, kind: str = "quad", max_depth: int = 8,
               min_leaf: int = 16) -> SpatialTree:
    """Recursive midpoint split of the centroid bounding box.

    Children are ordered by the binary code of (x >= mid, y >= mid[, z >= mid]),
    with x the most significant bit; points on the midpoint go to the upper half.
    Empty children are omitted. Accepts a mesh or an (N, 3) point array.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {sorted(KINDS)}")
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    if min_leaf < 1:
        raise ValueError("min_leaf must be positive")
    points = mesh.centroids if isinstance(mesh, TriangleMesh) else np.asarray(mesh, float)
    if len(points) == 0:
        raise ValueError("cannot build a tree over zero points")
    dims = KINDS[kind]
    points = points[:, :dims]
    perm = np.arange(len(points), dtype=np.int64)
    nodes: list = []
    _build(points, perm, 0, len(points), 0, dims, max_depth, min_leaf, nodes)
    return SpatialTree(kind, perm, tuple(nodes), max_depth, min_leaf)
