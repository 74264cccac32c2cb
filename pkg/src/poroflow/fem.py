"""Finite element spaces and assembly on simplicial meshes.

Element family: vector P1 for displacement, lowest-order Raviart-Thomas
(RT0) for fluxes, P0 for pressure-like cell fields, scalar P1 for the
stabilized H1 pressure/temperature equations. All element integrals are
closed-form (integrands are polynomials of degree at most 2 on affine
simplices). Strains of P1 fields are cellwise constant, so even the
midpoint rule used for nonlinear energy densities is exact here.

RT0 degrees of freedom are net fluxes across facets measured along the
global facet normal (lower to higher cell index, outward on the
boundary); the divergence of a basis function then integrates to +/-1
over its cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import CsrMatrix, DofVector
from .mesh import Mesh


@dataclass
class FeSpace:
    """A discrete space: kind, mesh, dof count, and essential constraints.

    dirichlet_values(t) returns prescribed values aligned with
    dirichlet_dofs; defaults to zero data.
    """

    kind: str
    mesh: Mesh
    dof_count: int
    dirichlet_dofs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    dirichlet_values: object = None

    def __post_init__(self):
        if self.kind not in ("vectorP1", "RT0", "P0", "scalarP1"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        self.dirichlet_dofs = np.asarray(self.dirichlet_dofs, dtype=np.int64)
        if len(self.dirichlet_dofs):
            if self.dirichlet_dofs.min() < 0 or self.dirichlet_dofs.max() >= self.dof_count:
                raise ValueError("dirichlet dof outside the space")
        if self.dirichlet_values is None:
            nd = len(self.dirichlet_dofs)
            self.dirichlet_values = lambda t, nd=nd: np.zeros(nd)

    def free_mask(self) -> np.ndarray:
        m = np.ones(self.dof_count, dtype=bool)
        m[self.dirichlet_dofs] = False
        return m


def vector_p1_space(mesh: Mesh, clamp_tag: str | None = "displacement") -> FeSpace:
    """Vector P1 space; dofs interleaved as (vertex, component).

    Vertices of facets tagged clamp_tag get all components constrained.
    """
    nd = mesh.dim * mesh.n_vertices
    dofs = np.empty(0, dtype=np.int64)
    if clamp_tag and clamp_tag in mesh.tags:
        verts = np.unique(mesh.facet_vertices[mesh.tags[clamp_tag]])
        dofs = (mesh.dim * verts[:, None] + np.arange(mesh.dim)).ravel()
    return FeSpace("vectorP1", mesh, nd, dofs)


def rt0_space(mesh: Mesh, noflow_tag: str | None = "flux") -> FeSpace:
    """RT0 space with one flux dof per facet; tagged facets are sealed."""
    dofs = np.empty(0, dtype=np.int64)
    if noflow_tag and noflow_tag in mesh.tags:
        dofs = np.sort(mesh.tags[noflow_tag])
    return FeSpace("RT0", mesh, mesh.n_facets, dofs)


def p0_space(mesh: Mesh) -> FeSpace:
    return FeSpace("P0", mesh, mesh.n_cells)


def scalar_p1_space(mesh: Mesh, dirichlet_tag: str | None = None) -> FeSpace:
    dofs = np.empty(0, dtype=np.int64)
    if dirichlet_tag and dirichlet_tag in mesh.tags:
        dofs = np.unique(mesh.facet_vertices[mesh.tags[dirichlet_tag]])
    return FeSpace("scalarP1", mesh, mesh.n_vertices, dofs)


def _grad_barycentric(mesh: Mesh):
    """Gradients of the d+1 barycentric hats per cell: (nc, d+1, d)."""
    v = mesh.vertices[mesh.cells]           # (nc, d+1, d)
    d = mesh.dim
    edges = v[:, 1:, :] - v[:, :1, :]       # (nc, d, d)
    inv = np.linalg.inv(edges)              # columns are grad lam_1..lam_d rows?
    # lam_i(x) for i>=1 solve edges^T grad = e_i  => grads are rows of inv
    grads = np.empty((mesh.n_cells, d + 1, d))
    grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads


def strain_component_count(dim: int) -> int:
    return 3 if dim == 2 else 6


def strain_pairs(dim: int):
    """Component index pairs and double-contraction weights.

    2D order: (11, 22, 12) with weights (1, 1, 2);
    3D order: (11, 22, 33, 12, 13, 23) with weights (1, 1, 1, 2, 2, 2).
    """
    if dim == 2:
        return [(0, 0), (1, 1), (0, 1)], np.array([1.0, 1.0, 2.0])
    return [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)], np.array(
        [1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


def strain_operator(u_space: FeSpace):
    """Per-cell strain matrices S: (nc, ncomp, d*(d+1)).

    S maps local interleaved nodal displacements to the constant strain
    components of the cell (ordering per strain_pairs).
    """
    mesh = u_space.mesh
    d = mesh.dim
    grads = _grad_barycentric(mesh)
    pairs, _ = strain_pairs(d)
    nloc = d * (d + 1)
    S = np.zeros((mesh.n_cells, len(pairs), nloc))
    for v in range(d + 1):
        for comp in range(d):
            j = d * v + comp
            g = grads[:, v, :]  # (nc, d)
            for ci, (a, b) in enumerate(pairs):
                if a == b:
                    if comp == a:
                        S[:, ci, j] += g[:, a]
                else:
                    if comp == a:
                        S[:, ci, j] += 0.5 * g[:, b]
                    if comp == b:
                        S[:, ci, j] += 0.5 * g[:, a]
    return S


def _cellwise(value, nc) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(nc, float(arr))
    if arr.shape != (nc,):
        raise ValueError("per-cell parameter has wrong length")
    return arr


def _local_u_dofs(mesh: Mesh) -> np.ndarray:
    d = mesh.dim
    return (d * mesh.cells[:, :, None] + np.arange(d)).reshape(mesh.n_cells, -1)


def assemble_elasticity(space: FeSpace, mu, lam) -> CsrMatrix:
    """Stiffness of 2 mu <eps(u), eps(v)> + lam <div u, div v>.

    mu, lam may be scalars or per-cell arrays (the linearized laws feed
    cellwise moduli through here).
    """
    if space.kind != "vectorP1":
        raise ValueError("elasticity needs a vectorP1 space")
    mesh = space.mesh
    if np.any(mesh.cell_volumes <= 0):
        raise ValueError("degenerate cell")
    nc = mesh.n_cells
    mu = _cellwise(mu, nc)
    lam = _cellwise(lam, nc)
    if np.any(mu < 0) or np.any(lam < 0):
        raise ValueError("negative modulus")
    S = strain_operator(space)
    _, w = strain_pairs(mesh.dim)
    vol = mesh.cell_volumes
    # divergence row = trace of strain
    ntr = mesh.dim
    div = S[:, :ntr, :].sum(axis=1)                     # (nc, nloc)
    SW = S * w[None, :, None]
    Ke = 2.0 * mu[:, None, None] * np.einsum("kci,kcj->kij", SW, S)
    Ke += lam[:, None, None] * np.einsum("ki,kj->kij", div, div)
    Ke *= vol[:, None, None]
    dofs = _local_u_dofs(mesh)
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    A = sp.coo_matrix((Ke.ravel(), (rows, cols)),
                      shape=(space.dof_count, space.dof_count))
    return CsrMatrix.from_scipy(A)


def assemble_div_coupling(p_space: FeSpace, u_space: FeSpace) -> CsrMatrix:
    """B[cell, j] = integral over the cell of div(phi_j)."""
    if p_space.kind != "P0" or u_space.kind != "vectorP1":
        raise ValueError("div coupling needs P0 x vectorP1 spaces")
    if p_space.mesh is not u_space.mesh:
        raise ValueError("spaces live on different meshes")
    mesh = u_space.mesh
    grads = _grad_barycentric(mesh)
    vol = mesh.cell_volumes
    d = mesh.dim
    dofs = _local_u_dofs(mesh)
    vals = (grads * vol[:, None, None]).reshape(mesh.n_cells, -1)
    rows = np.repeat(np.arange(mesh.n_cells), d * (d + 1))
    B = sp.coo_matrix((vals.ravel(), (rows, dofs.ravel())),
                      shape=(mesh.n_cells, u_space.dof_count))
    return CsrMatrix.from_scipy(B)


def rt0_cell_signs(mesh: Mesh) -> np.ndarray:
    """Sign of the global facet normal relative to each cell: (nc, d+1)."""
    f = mesh.cell_facets
    owner_is_first = mesh.facet_cells[f, 0] == np.arange(mesh.n_cells)[:, None]
    return np.where(owner_is_first, 1.0, -1.0)


def assemble_rt0_mass(space: FeSpace, kappa) -> CsrMatrix:
    """Weighted mass matrix <kappa^-1 q, z> in facet-flux dofs."""
    if space.kind != "RT0":
        raise ValueError("needs an RT0 space")
    mesh = space.mesh
    nc, d = mesh.n_cells, mesh.dim
    kappa = _cellwise(kappa, nc)
    if np.any(kappa <= 0):
        raise ValueError("conductivity must be positive")
    v = mesh.vertices[mesh.cells]                       # (nc, d+1, d)
    vol = mesh.cell_volumes
    verts_sum = v.sum(axis=1)                           # (nc, d)
    # simplex moments: int x dx = |K| c ; int x.x dx via vertex sums
    sum_vv = np.einsum("kvd,kvd->k", v, v)
    int_xx = vol / ((d + 1) * (d + 2)) * (sum_vv + np.einsum("kd,kd->k", verts_sum, verts_sum))
    int_x = vol[:, None] / (d + 1) * verts_sum          # (nc, d)
    signs = rt0_cell_signs(mesh)
    scale = signs / (d * vol[:, None])                  # (nc, d+1)
    # I[i,j] = int (x - x_i).(x - x_j) with x_i the opposite vertex
    xi_dot_intx = np.einsum("kvd,kd->kv", v, int_x)
    xi_dot_xj = np.einsum("kvd,kwd->kvw", v, v)
    I = (int_xx[:, None, None] - xi_dot_intx[:, :, None]
         - xi_dot_intx[:, None, :] + vol[:, None, None] * xi_dot_xj)
    Me = (scale[:, :, None] * scale[:, None, :]) * I / kappa[:, None, None]
    fdofs = mesh.cell_facets
    nloc = d + 1
    rows = np.repeat(fdofs, nloc, axis=1).ravel()
    cols = np.tile(fdofs, (1, nloc)).ravel()
    M = sp.coo_matrix((Me.ravel(), (rows, cols)),
                      shape=(space.dof_count, space.dof_count))
    return CsrMatrix.from_scipy(M)


def assemble_mixed_div(p_space: FeSpace, q_space: FeSpace) -> CsrMatrix:
    """D[cell, facet] = integral of div(psi_facet) over the cell = +/-1."""
    if p_space.kind != "P0" or q_space.kind != "RT0":
        raise ValueError("mixed divergence needs P0 x RT0 spaces")
    if p_space.mesh is not q_space.mesh:
        raise ValueError("spaces live on different meshes")
    mesh = q_space.mesh
    signs = rt0_cell_signs(mesh)
    rows = np.repeat(np.arange(mesh.n_cells), mesh.dim + 1)
    D = sp.coo_matrix((signs.ravel(), (rows, mesh.cell_facets.ravel())),
                      shape=(mesh.n_cells, q_space.dof_count))
    return CsrMatrix.from_scipy(D)


def assemble_p1_stiffness(space: FeSpace, kappa) -> CsrMatrix:
    """Scalar P1 diffusion matrix <kappa grad p, grad q>."""
    if space.kind != "scalarP1":
        raise ValueError("needs a scalarP1 space")
    mesh = space.mesh
    kappa = _cellwise(kappa, mesh.n_cells)
    grads = _grad_barycentric(mesh)
    Ke = kappa[:, None, None] * mesh.cell_volumes[:, None, None] * np.einsum(
        "kvd,kwd->kvw", grads, grads)
    nloc = mesh.dim + 1
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)),
                      shape=(space.dof_count, space.dof_count))
    return CsrMatrix.from_scipy(K)


def assemble_p1_mass(space: FeSpace, coeff=1.0) -> CsrMatrix:
    """Scalar P1 mass matrix <c p, q> (consistent, not lumped)."""
    if space.kind != "scalarP1":
        raise ValueError("needs a scalarP1 space")
    mesh = space.mesh
    coeff = _cellwise(coeff, mesh.n_cells)
    d = mesh.dim
    nloc = d + 1
    base = (np.ones((nloc, nloc)) + np.eye(nloc)) / ((d + 1) * (d + 2))
    Ke = coeff[:, None, None] * mesh.cell_volumes[:, None, None] * base[None]
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    M = sp.coo_matrix((Ke.ravel(), (rows, cols)),
                      shape=(space.dof_count, space.dof_count))
    return CsrMatrix.from_scipy(M)


def assemble_p0_mass(space: FeSpace, coeff=1.0) -> CsrMatrix:
    """Diagonal P0 mass matrix diag(c_K |K|)."""
    if space.kind != "P0":
        raise ValueError("needs a P0 space")
    mesh = space.mesh
    coeff = _cellwise(coeff, mesh.n_cells)
    return CsrMatrix.from_scipy(sp.diags(coeff * mesh.cell_volumes))


def project_p0(mesh: Mesh, fld) -> np.ndarray:
    """Cellwise averages of a field.

    Accepts a P0 array (returned as is), a nodal P1 array (vertex mean,
    exact for affine interpolants), or a callable evaluated at cell
    centroids (degree-1 exact).
    """
    if callable(fld):
        c = mesh.cell_centroids()
        return np.array([float(fld(p)) for p in c])
    arr = np.asarray(fld, dtype=float)
    if arr.shape == (mesh.n_cells,):
        return arr.copy()
    if arr.shape == (mesh.n_vertices,):
        return arr[mesh.cells].mean(axis=1)
    raise ValueError("field is neither P0, nodal P1, nor callable")


def interpolate_rt0(mesh: Mesh, flux) -> np.ndarray:
    """Facet-flux dofs of a given flux field (callable or constant vector).

    dof_f = |f| * q(midpoint) . n_f, exact for affine fluxes.
    """
    mid = mesh.facet_centroids()
    if callable(flux):
        qvals = np.array([np.asarray(flux(p), dtype=float) for p in mid])
    else:
        qvals = np.broadcast_to(np.asarray(flux, dtype=float),
                                (mesh.n_facets, mesh.dim))
    return mesh.facet_areas * np.einsum("ij,ij->i", qvals, mesh.facet_normals)


def traction_load(space: FeSpace, tag: str, traction) -> np.ndarray:
    """Nodal load from a constant-per-facet surface traction on a tag.

    traction is a vector or a callable of the facet midpoint returning
    one; each facet spreads t * |f| evenly over its d vertices.
    """
    if space.kind != "vectorP1":
        raise ValueError("traction load needs a vectorP1 space")
    mesh = space.mesh
    f = np.zeros(space.dof_count)
    if tag not in mesh.tags:
        return f
    mid = mesh.facet_centroids()
    for fid in mesh.tags[tag]:
        t = np.asarray(traction(mid[fid]) if callable(traction) else traction,
                       dtype=float)
        share = mesh.facet_areas[fid] / mesh.dim
        for v in mesh.facet_vertices[fid]:
            f[mesh.dim * v:mesh.dim * v + mesh.dim] += share * t
    return f


def facet_normal_load(space: FeSpace, tag: str, value) -> np.ndarray:
    """RT0 load <g, z.n> over tagged boundary facets with g constant per facet.

    With unit-flux dofs and outward boundary normals the load is just
    the facet value of g.
    """
    if space.kind != "RT0":
        raise ValueError("needs an RT0 space")
    mesh = space.mesh
    f = np.zeros(space.dof_count)
    if tag not in mesh.tags:
        return f
    mid = mesh.facet_centroids()
    for fid in mesh.tags[tag]:
        f[fid] = float(value(mid[fid]) if callable(value) else value)
    return f


def apply_dirichlet(A: CsrMatrix, b, space: FeSpace, t: float = 0.0):
    """Symmetric elimination of the space's essential constraints.

    Constrained rows/columns are replaced by identity, the right-hand
    side is lifted by the prescribed values.
    """
    bv = np.asarray(b.data if isinstance(b, DofVector) else b, dtype=float).copy()
    if A.nrows != A.ncols or A.nrows != len(bv):
        raise ValueError("system dimensions inconsistent")
    if A.nrows != space.dof_count:
        raise ValueError("space does not match the system")
    dofs = space.dirichlet_dofs
    vals = np.asarray(space.dirichlet_values(t), dtype=float)
    if len(vals) != len(dofs):
        raise ValueError("dirichlet values length mismatch")
    S = A.to_scipy().tolil()
    if len(dofs):
        g = np.zeros(len(bv))
        g[dofs] = vals
        bv -= A.to_scipy() @ g
        S[dofs, :] = 0.0
        S[:, dofs] = 0.0
        S[dofs, dofs] = 1.0
        bv[dofs] = vals
    out_b = DofVector(bv, dict(b.block_map)) if isinstance(b, DofVector) else bv
    return CsrMatrix.from_scipy(S.tocsr()), out_b


@dataclass
class AssembledForms:
    """The bilinear forms and loads every discrete energy is built from."""

    u_space: FeSpace
    q_space: FeSpace
    p_space: FeSpace
    A_elast: CsrMatrix
    B_div: CsrMatrix
    M_rt: CsrMatrix
    D_div: CsrMatrix
    M_p: CsrMatrix
    K_diff: CsrMatrix
    f_mech: np.ndarray
    f_fluid: np.ndarray
    f_temp: np.ndarray


def assemble_forms(mesh: Mesh, mu, lam, kappa,
                   f_mech=None, f_fluid=None, f_temp=None,
                   clamp_tag="displacement", noflow_tag="flux") -> AssembledForms:
    """Assemble the full form set for a tagged mesh in one pass."""
    u_space = vector_p1_space(mesh, clamp_tag)
    q_space = rt0_space(mesh, noflow_tag)
    p_space = p0_space(mesh)
    p1 = scalar_p1_space(mesh)
    zeros = lambda sp_: np.zeros(sp_.dof_count)
    return AssembledForms(
        u_space=u_space, q_space=q_space, p_space=p_space,
        A_elast=assemble_elasticity(u_space, mu, lam),
        B_div=assemble_div_coupling(p_space, u_space),
        M_rt=assemble_rt0_mass(q_space, kappa),
        D_div=assemble_mixed_div(p_space, q_space),
        M_p=assemble_p0_mass(p_space),
        K_diff=assemble_p1_stiffness(p1, kappa),
        f_mech=f_mech if f_mech is not None else zeros(u_space),
        f_fluid=f_fluid if f_fluid is not None else zeros(q_space),
        f_temp=f_temp if f_temp is not None else zeros(q_space),
    )
