"""Structured simplicial meshes of the unit box with tagged boundaries.

Triangles in 2D (2 per grid square), Kuhn tetrahedra in 3D (6 per grid
cube). Facets carry a global orientation: interior normals point from
the lower to the higher adjacent cell index, boundary normals point
outward. Boundary tags realize the footing benchmark decomposition:
complementary pairs (displacement|traction, flux|pressure, and
entropy_flux|temperature for the thermal model) partition the boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class Mesh:
    dim: int
    vertices: np.ndarray          # (nv, dim)
    cells: np.ndarray             # (nc, dim+1) vertex ids, positively oriented
    facet_vertices: np.ndarray    # (nf, dim) vertex ids per facet
    facet_cells: np.ndarray       # (nf, 2) adjacent cells, -1 when absent
    facet_normals: np.ndarray     # (nf, dim) unit normals, global orientation
    facet_areas: np.ndarray       # (nf,)
    cell_volumes: np.ndarray      # (nc,)
    cell_facets: np.ndarray       # (nc, dim+1) facet id opposite local vertex
    boundary_facets: np.ndarray   # sorted facet ids on the boundary
    tags: dict = field(default_factory=dict)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_facets(self):
        return len(self.facet_vertices)

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    def facet_centroids(self) -> np.ndarray:
        return self.vertices[self.facet_vertices].mean(axis=1)


def _signed_volume(verts: np.ndarray) -> np.ndarray:
    """Signed volumes of simplices given as (nc, dim+1, dim) vertex blocks."""
    d = verts.shape[2]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    det = np.linalg.det(edges)
    fact = 2.0 if d == 2 else 6.0
    return det / fact


def _build_connectivity(dim, vertices, cells):
    nc = len(cells)
    # facet f of a cell omits local vertex f; canonical key is the sorted tuple
    local = [tuple(j for j in range(dim + 1) if j != i) for i in range(dim + 1)]
    key_to_id: dict = {}
    fverts = []
    fcells = []
    cell_facets = np.empty((nc, dim + 1), dtype=np.int64)
    for c in range(nc):
        cv = cells[c]
        for i, loc in enumerate(local):
            key = tuple(sorted(cv[list(loc)]))
            fid = key_to_id.get(key)
            if fid is None:
                fid = len(fverts)
                key_to_id[key] = fid
                fverts.append(key)
                fcells.append([c, -1])
            else:
                fcells[fid][1] = c
            cell_facets[c, i] = fid
    fverts = np.array(fverts, dtype=np.int64)
    fcells = np.array(fcells, dtype=np.int64)
    # normalize adjacency so facet_cells[:,0] is the lower-index cell
    swap = (fcells[:, 1] >= 0) & (fcells[:, 1] < fcells[:, 0])
    fcells[swap] = fcells[swap][:, ::-1]

    fc = vertices[fverts].mean(axis=1)
    if dim == 2:
        t = vertices[fverts[:, 1]] - vertices[fverts[:, 0]]
        areas = np.linalg.norm(t, axis=1)
        normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / areas[:, None]
    else:
        e1 = vertices[fverts[:, 1]] - vertices[fverts[:, 0]]
        e2 = vertices[fverts[:, 2]] - vertices[fverts[:, 0]]
        cr = np.cross(e1, e2)
        nrm = np.linalg.norm(cr, axis=1)
        areas = 0.5 * nrm
        normals = cr / nrm[:, None]

    # orientation: lower -> higher cell index; boundary normals outward
    ccent = vertices[cells].mean(axis=1)
    ref = np.where((fcells[:, 1] >= 0)[:, None],
                   ccent[fcells[:, 1]] - ccent[np.maximum(fcells[:, 0], 0)],
                   fc - ccent[np.maximum(fcells[:, 0], 0)])
    flip = np.einsum("ij,ij->i", normals, ref) < 0
    normals[flip] *= -1.0

    boundary = np.flatnonzero(fcells[:, 1] < 0)
    return fverts, fcells, normals, areas, cell_facets, boundary


def _from_cells(dim, vertices, cells) -> Mesh:
    vols = _signed_volume(vertices[cells])
    neg = vols < 0
    if np.any(neg):
        cells = cells.copy()
        cells[neg, 0], cells[neg, 1] = cells[neg, 1], cells[neg, 0].copy()
        vols = np.abs(vols)
    if np.any(vols <= 0):
        raise ValueError("degenerate cell with zero volume")
    fv, fcl, nrm, ar, cf, bd = _build_connectivity(dim, vertices, cells)
    return Mesh(dim, vertices, cells, fv, fcl, nrm, ar, vols, cf, bd)


def unit_box_mesh(dim: int, n_per_side: int) -> Mesh:
    """Structured simplicial mesh of the unit square/cube.

    2D: 2 n^2 triangles on an (n+1)^2 grid; 3D: 6 n^3 Kuhn tetrahedra
    on an (n+1)^3 grid. All cells positively oriented.
    """
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    if n_per_side < 1:
        raise ValueError("n_per_side must be at least 1")
    n = n_per_side
    axes = [np.linspace(0.0, 1.0, n + 1)] * dim
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel() for g in grid], axis=1)

    def vid(idx):
        out = idx[0]
        for k in range(1, dim):
            out = out * (n + 1) + idx[k]
        return out

    cells = []
    if dim == 2:
        for i in range(n):
            for j in range(n):
                v00 = vid((i, j))
                v10 = vid((i + 1, j))
                v01 = vid((i, j + 1))
                v11 = vid((i + 1, j + 1))
                cells.append((v00, v10, v11))
                cells.append((v00, v11, v01))
    else:
        # Kuhn split: six tets per cube, one per axis permutation, all
        # sharing the main diagonal
        perms = list(itertools.permutations(range(3)))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    base = np.array([i, j, k])
                    for perm in perms:
                        idx = [base.copy()]
                        cur = base.copy()
                        for ax in perm:
                            cur = cur.copy()
                            cur[ax] += 1
                            idx.append(cur)
                        cells.append(tuple(vid(p) for p in idx))
    return _from_cells(dim, vertices, np.asarray(cells, dtype=np.int64))


def _require_unit_box(mesh: Mesh) -> None:
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    if np.any(np.abs(lo) > 1e-12) or np.any(np.abs(hi - 1.0) > 1e-12):
        raise ValueError("mesh is not a unit box")


def tag_footing_boundary(mesh: Mesh, noflow_on_patch: bool = True) -> Mesh:
    """Tag the footing benchmark boundary decomposition.

    Bottom: clamped and impermeable (displacement + flux). Central top
    patch [0.25,0.75]^(d-1) x {1}: loaded traction, by default also
    impermeable. Remaining boundary: zero traction and zero pressure.
    Membership of a facet is decided by its midpoint. The thermal pair
    tags the patch as prescribed-temperature, the rest as zero entropy
    flux.
    """
    _require_unit_box(mesh)
    bd = mesh.boundary_facets
    mid = mesh.facet_centroids()[bd]
    last = mesh.dim - 1

    bottom = np.abs(mid[:, last]) < 1e-12
    top = np.abs(mid[:, last] - 1.0) < 1e-12
    in_patch = np.all((mid[:, :last] >= 0.25) & (mid[:, :last] <= 0.75), axis=1)
    patch = top & in_patch

    displacement = bd[bottom]
    traction = bd[~bottom]
    load_patch = bd[patch]
    if noflow_on_patch:
        flux = bd[bottom | patch]
        pressure = bd[~(bottom | patch)]
    else:
        flux = bd[bottom]
        pressure = bd[~bottom]
    temperature = bd[patch]
    entropy_flux = bd[~patch]

    tags = {
        "displacement": displacement,
        "traction": traction,
        "load_patch": load_patch,
        "flux": flux,
        "pressure": pressure,
        "temperature": temperature,
        "entropy_flux": entropy_flux,
    }
    return replace(mesh, tags=tags)


def write_vtk(mesh: Mesh, path: str, point_data: dict | None = None,
              cell_data: dict | None = None) -> None:
    """Legacy ASCII VTK export of the mesh with optional nodal/cell fields."""
    nv, nc = mesh.n_vertices, mesh.n_cells
    npc = mesh.dim + 1
    ctype = 5 if mesh.dim == 2 else 10
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 3.0\nporoflow fields\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for v in mesh.vertices:
            coords = list(v) + [0.0] * (3 - mesh.dim)
            fh.write(" ".join(f"{c:.12g}" for c in coords) + "\n")
        fh.write(f"CELLS {nc} {nc * (npc + 1)}\n")
        for c in mesh.cells:
            fh.write(f"{npc} " + " ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"CELL_TYPES {nc}\n")
        fh.write("\n".join([str(ctype)] * nc) + "\n")
        if point_data:
            fh.write(f"POINT_DATA {nv}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 2:
                    fh.write(f"VECTORS {name} double\n")
                    for row in arr:
                        xyz = list(row) + [0.0] * (3 - arr.shape[1])
                        fh.write(" ".join(f"{x:.12g}" for x in xyz) + "\n")
                else:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    fh.write("\n".join(f"{x:.12g}" for x in arr) + "\n")
        if cell_data:
            fh.write(f"CELL_DATA {nc}\n")
            for name, arr in cell_data.items():
                arr = np.asarray(arr)
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                fh.write("\n".join(f"{x:.12g}" for x in arr) + "\n")
