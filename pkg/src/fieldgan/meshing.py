"""Density-grid sampling and isosurface extraction to Wavefront OBJ.

Density is sampled on a regular lattice over [-1, 1]^3; the isosurface at a
chosen threshold is triangulated with linear edge interpolation (classic
256-case marching cubes, provided by scikit-image) and written as OBJ text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes as _sk_marching_cubes

from .autodiff import Tensor, no_grad
from .errors import ContractError
from .field import FieldConfig, FieldParams, ModulationSet, field_eval

GRID_EVAL_CHUNK = 8192


@dataclass
class DensityGrid:
    resolution: int
    values: np.ndarray  # (G, G, G), axis order x, y, z over linspace(-1, 1, G)

    def __post_init__(self):
        g = self.resolution
        if g < 8:
            raise ContractError(f"grid resolution must be >= 8, got {g}")
        if self.values.shape != (g, g, g):
            raise ContractError(f"values shape {self.values.shape} != ({g},{g},{g})")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("density grid contains non-finite values")

    @property
    def voxel(self) -> float:
        return 2.0 / self.resolution

    def lattice(self) -> np.ndarray:
        axis = np.linspace(-1.0, 1.0, self.resolution)
        x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([x, y, z], axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ContractError("triangle indices out of vertex range")

    def __len__(self) -> int:
        return len(self.triangles)

    def signed_volume(self) -> float:
        """Sum of signed tetrahedra; sign flips with triangle orientation."""
        v = self.vertices
        t = self.triangles
        a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)


def density_grid(params: FieldParams, mods: ModulationSet, cfg: FieldConfig,
                 g: int) -> DensityGrid:
    """Sample the field's density on a g^3 lattice (forward only)."""
    if g < 8:
        raise ContractError(f"grid resolution must be >= 8, got {g}")
    axis = np.linspace(-1.0, 1.0, g)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0])
    with no_grad():
        for lo in range(0, pts.shape[0], GRID_EVAL_CHUNK):
            hi = min(lo + GRID_EVAL_CHUNK, pts.shape[0])
            out[lo:hi] = field_eval(Tensor(pts[lo:hi]), params, mods, cfg).density.data
    return DensityGrid(resolution=g, values=out.reshape(g, g, g))


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(grid: DensityGrid, tau: float = 10.0) -> TriangleMesh:
    """Extract the density isosurface at tau; empty mesh when never crossed."""
    vals = grid.values
    if vals.max() < tau or vals.min() > tau:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 / (grid.resolution - 1)
    verts, faces, _, _ = _sk_marching_cubes(vals.astype(np.float64), level=tau,
                                            spacing=(spacing, spacing, spacing),
                                            allow_degenerate=False)
    verts = np.asarray(verts, dtype=np.float64) - 1.0  # index space -> [-1, 1]^3
    faces = np.asarray(faces, dtype=np.int64)
    keep = _triangle_areas(verts, faces) > 1e-12
    return TriangleMesh(verts, faces[keep])


def write_obj(mesh: TriangleMesh, path: str) -> None:
    """Wavefront OBJ text: v lines then 1-based f lines."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# fieldgan mesh export\n")
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    except OSError as exc:
        raise IOError(f"cannot write OBJ to {path}: {exc}") from exc


def read_obj(path: str) -> TriangleMesh:
    """Minimal OBJ reader for round-trip checks (v and f triangle lines only)."""
    verts, faces = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if not parts or parts[0] == "#":
                    continue
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    except OSError as exc:
        raise IOError(f"cannot read OBJ from {path}: {exc}") from exc
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def mesh_euler_characteristic(mesh: TriangleMesh) -> int:
    """V - E + F with edges deduplicated; 2 for a closed genus-0 surface."""
    if len(mesh) == 0:
        return 0
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    n_edges = len(np.unique(edges, axis=0))
    return int(len(mesh.vertices) - n_edges + len(tris))
