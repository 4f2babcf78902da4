"""Hierarchically compressed radiosity view factors for rough terrain."""

from hvf.mesh import TriangleMesh, CapCraterSpec, make_cap_crater_mesh, read_obj, write_obj, dem_to_mesh
from hvf.raytrace import Bvh, build_bvh
from hvf.spatial import SpatialTree, build_tree
from hvf.viewfactor import SparseCsr, assemble_block
from hvf.hmatrix import CompressedViewFactor, compress, hmatvec, save, load
from hvf.thermal import PhysParams

__all__ = [
    "TriangleMesh", "CapCraterSpec", "make_cap_crater_mesh", "read_obj", "write_obj", "dem_to_mesh",
    "Bvh", "build_bvh", "SpatialTree", "build_tree", "SparseCsr", "assemble_block",
    "CompressedViewFactor", "compress", "hmatvec", "save", "load", "PhysParams",
]
