import numpy as np
import pytest

from poroflow import fem
from poroflow.linalg import CsrMatrix, quad_form, solve_spd, spmv, symmetry_defect
from poroflow.mesh import _from_cells, tag_footing_boundary, unit_box_mesh


@pytest.fixture
def ref_triangle():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return _from_cells(2, verts, np.array([[0, 1, 2]]))


def nodal_field(mesh, f):
    """Interleave a vector field sampled at the vertices."""
    vals = np.array([f(v) for v in mesh.vertices])
    return vals.ravel()


class TestElasticity:
    def test_rigid_translation_in_kernel(self):
        m = unit_box_mesh(2, 3)
        V = fem.vector_p1_space(m, None)
        A = fem.assemble_elasticity(V, 3.0, 2.0)
        for comp in range(2):
            u = np.zeros(V.dof_count)
            u[comp::2] = 1.0
            assert np.abs(spmv(A, u)).max() < 1e-12

    def test_shear_energy_reference_triangle(self, ref_triangle):
        V = fem.vector_p1_space(ref_triangle, None)
        A = fem.assemble_elasticity(V, 1.0, 0.0)
        u = nodal_field(ref_triangle, lambda v: [v[0], 0.0])
        assert quad_form(A, u) == pytest.approx(1.0, abs=1e-14)

    def test_volumetric_energy_reference_triangle(self, ref_triangle):
        V = fem.vector_p1_space(ref_triangle, None)
        A = fem.assemble_elasticity(V, 0.0, 1.0)
        u = nodal_field(ref_triangle, lambda v: [v[0], v[1]])
        assert quad_form(A, u) == pytest.approx(2.0, abs=1e-14)

    def test_symmetric(self):
        m = unit_box_mesh(2, 4)
        A = fem.assemble_elasticity(fem.vector_p1_space(m, None), 2.0, 1.0)
        assert symmetry_defect(A) < 1e-12

    def test_cellwise_moduli(self):
        m = unit_box_mesh(2, 2)
        V = fem.vector_p1_space(m, None)
        mus = np.full(m.n_cells, 1.5)
        A0 = fem.assemble_elasticity(V, 1.5, 0.5)
        A1 = fem.assemble_elasticity(V, mus, np.full(m.n_cells, 0.5))
        assert np.allclose(A0.to_scipy().toarray(), A1.to_scipy().toarray())

    def test_patch_test_interior_residual(self):
        # P1 reproduces affine fields: interior equilibrium is exact
        m = tag_footing_boundary(unit_box_mesh(2, 4))
        V = fem.vector_p1_space(m, None)
        A = fem.assemble_elasticity(V, 7.0, 3.0)
        G = np.array([[0.3, -0.2], [0.1, 0.4]])
        u = nodal_field(m, lambda v: G @ v + [0.5, -1.0])
        r = spmv(A, u)
        boundary_verts = np.unique(m.facet_vertices[m.boundary_facets])
        interior = np.setdiff1d(np.arange(m.n_vertices), boundary_verts)
        idofs = (2 * interior[:, None] + np.arange(2)).ravel()
        scale = np.abs(A.values).max()
        assert np.abs(r[idofs]).max() < 1e-10 * scale

    def test_3d_volumetric(self):
        m = unit_box_mesh(3, 1)
        V = fem.vector_p1_space(m, None)
        A = fem.assemble_elasticity(V, 0.0, 1.0)
        u = nodal_field(m, lambda v: v)
        # div u = 3 so the energy is 9 * |box| = 9
        assert quad_form(A, u) == pytest.approx(9.0, abs=1e-12)


class TestDivCoupling:
    def test_hat_x_component(self, ref_triangle):
        V = fem.vector_p1_space(ref_triangle, None)
        B = fem.assemble_div_coupling(fem.p0_space(ref_triangle), V)
        e = np.zeros(V.dof_count)
        e[2] = 1.0  # x-component of the hat at vertex (1,0)
        assert spmv(B, e)[0] == pytest.approx(0.5, abs=1e-14)

    def test_linear_field_gives_two_volumes(self):
        m = unit_box_mesh(2, 3)
        V = fem.vector_p1_space(m, None)
        B = fem.assemble_div_coupling(fem.p0_space(m), V)
        u = nodal_field(m, lambda v: v)
        assert np.allclose(spmv(B, u), 2.0 * m.cell_volumes, atol=1e-14)

    def test_constant_field_pairs_to_zero(self):
        m = unit_box_mesh(2, 2)
        V = fem.vector_p1_space(m, None)
        B = fem.assemble_div_coupling(fem.p0_space(m), V)
        u = nodal_field(m, lambda v: [2.0, -3.0])
        assert np.abs(spmv(B, u)).max() < 1e-13

    def test_space_mismatch(self):
        m1, m2 = unit_box_mesh(2, 2), unit_box_mesh(2, 3)
        with pytest.raises(ValueError):
            fem.assemble_div_coupling(fem.p0_space(m1),
                                      fem.vector_p1_space(m2, None))


class TestRt0Mass:
    def test_reference_matrix(self, ref_triangle):
        Q = fem.rt0_space(ref_triangle, None)
        M = fem.assemble_rt0_mass(Q, 1.0).to_scipy().toarray()
        expected = np.array([[1 / 6, 0.0, 0.0],
                             [0.0, 1 / 3, -1 / 6],
                             [0.0, -1 / 6, 1 / 3]])
        assert np.allclose(M, expected, atol=1e-14)

    def test_unit_flux_energy(self):
        m = unit_box_mesh(2, 4)
        Q = fem.rt0_space(m, None)
        M = fem.assemble_rt0_mass(Q, 1.0)
        q = fem.interpolate_rt0(m, np.array([1.0, 0.0]))
        assert quad_form(M, q) == pytest.approx(1.0, rel=1e-12)

    def test_inverse_conductivity_scaling(self):
        m = unit_box_mesh(2, 3)
        Q = fem.rt0_space(m, None)
        q = fem.interpolate_rt0(m, np.array([0.0, 1.0]))
        e1 = quad_form(fem.assemble_rt0_mass(Q, 1.0), q)
        e2 = quad_form(fem.assemble_rt0_mass(Q, 2.0), q)
        assert e1 / e2 == pytest.approx(2.0, rel=1e-12)

    def test_rejects_singular_conductivity(self):
        m = unit_box_mesh(2, 2)
        with pytest.raises(ValueError):
            fem.assemble_rt0_mass(fem.rt0_space(m, None), 0.0)

    def test_spd(self):
        m = unit_box_mesh(2, 3)
        M = fem.assemble_rt0_mass(fem.rt0_space(m, None), 1e-13)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.standard_normal(M.nrows)
            assert quad_form(M, x) > 0


class TestMixedDiv:
    def test_row_structure(self):
        for dim, n in [(2, 3), (3, 2)]:
            m = unit_box_mesh(dim, n)
            D = fem.assemble_mixed_div(fem.p0_space(m), fem.rt0_space(m, None))
            S = D.to_scipy()
            assert set(np.diff(S.indptr).tolist()) == {dim + 1}
            assert set(np.abs(S.data).tolist()) == {1.0}

    def test_divergence_free_loop(self):
        # two-triangle square: circulation across the diagonal only
        m = unit_box_mesh(2, 1)
        D = fem.assemble_mixed_div(fem.p0_space(m), fem.rt0_space(m, None))
        inner = np.flatnonzero(m.facet_cells[:, 1] >= 0)
        q = np.zeros(m.n_facets)
        q[inner] = 0.0
        assert np.abs(spmv(D, q)).max() == 0.0

    def test_commuting_with_interpolation(self):
        m = unit_box_mesh(2, 4)
        D = fem.assemble_mixed_div(fem.p0_space(m), fem.rt0_space(m, None))
        q = fem.interpolate_rt0(m, lambda p: p)  # div = 2
        assert np.abs(spmv(D, q) - 2.0 * m.cell_volumes).max() < 1e-12

    def test_total_divergence_is_boundary_flux(self):
        m = unit_box_mesh(2, 3)
        D = fem.assemble_mixed_div(fem.p0_space(m), fem.rt0_space(m, None))
        rng = np.random.default_rng(5)
        q = rng.standard_normal(m.n_facets)
        total = spmv(D, q).sum()
        bd = m.boundary_facets
        assert total == pytest.approx(q[bd].sum(), abs=1e-12)


class TestProjectP0:
    def test_constant(self):
        m = unit_box_mesh(2, 2)
        assert np.allclose(fem.project_p0(m, lambda p: 4.5), 4.5)

    def test_idempotent(self):
        m = unit_box_mesh(2, 2)
        vals = np.arange(m.n_cells, dtype=float)
        assert np.allclose(fem.project_p0(m, fem.project_p0(m, vals)), vals)

    def test_coordinate_average(self, ref_triangle):
        assert fem.project_p0(ref_triangle, lambda p: p[0])[0] == pytest.approx(1 / 3)

    def test_nodal_input(self):
        m = unit_box_mesh(2, 2)
        nodal = m.vertices[:, 0]
        assert np.allclose(fem.project_p0(m, nodal),
                           m.cell_centroids()[:, 0], atol=1e-14)


class TestApplyDirichlet:
    def test_zero_data_zero_rhs(self):
        m = tag_footing_boundary(unit_box_mesh(2, 3))
        V = fem.vector_p1_space(m, "displacement")
        A = fem.assemble_elasticity(V, 1.0, 1.0)
        Ad, bd = fem.apply_dirichlet(A, np.zeros(V.dof_count), V)
        x = solve_spd(Ad, bd)
        assert np.abs(x).max() < 1e-14

    def test_symmetry_preserved(self):
        m = tag_footing_boundary(unit_box_mesh(2, 3))
        V = fem.vector_p1_space(m, "displacement")
        A = fem.assemble_elasticity(V, 2.0, 1.0)
        Ad, _ = fem.apply_dirichlet(A, np.zeros(V.dof_count), V)
        assert symmetry_defect(Ad) < 1e-12

    def test_prescribing_solution_is_consistent(self):
        # solve, then constrain part of the solution: rest must not move
        m = tag_footing_boundary(unit_box_mesh(2, 3))
        V = fem.vector_p1_space(m, "displacement")
        A = fem.assemble_elasticity(V, 2.0, 1.0)
        rng = np.random.default_rng(9)
        f = rng.standard_normal(V.dof_count)
        Ad, bd = fem.apply_dirichlet(A, f, V)
        x = solve_spd(Ad, bd, tol=1e-12)
        some = V.free_mask().nonzero()[0][:5]
        V2 = fem.FeSpace("vectorP1", m, V.dof_count,
                         np.concatenate([V.dirichlet_dofs, some]),
                         lambda t: np.concatenate([np.zeros(len(V.dirichlet_dofs)),
                                                   x[some]]))
        Ad2, bd2 = fem.apply_dirichlet(A, f, V2)
        x2 = solve_spd(Ad2, bd2, tol=1e-12)
        assert np.allclose(x2, x, atol=1e-8 * max(1.0, np.abs(x).max()))

    def test_inhomogeneous_values_land_in_solution(self):
        m = tag_footing_boundary(unit_box_mesh(2, 2))
        V = fem.vector_p1_space(m, "displacement")
        vals = 0.7 * np.ones(len(V.dirichlet_dofs))
        V.dirichlet_values = lambda t: vals
        A = fem.assemble_elasticity(V, 1.0, 0.0)
        Ad, bd = fem.apply_dirichlet(A, np.zeros(V.dof_count), V)
        x = solve_spd(Ad, bd)
        assert np.allclose(x[V.dirichlet_dofs], 0.7)


class TestScalarP1Forms:
    def test_stiffness_linear_field_energy(self):
        m = unit_box_mesh(2, 4)
        P = fem.scalar_p1_space(m)
        K = fem.assemble_p1_stiffness(P, 1.0)
        p = m.vertices[:, 0]  # grad = (1,0)
        assert quad_form(K, p) == pytest.approx(1.0, rel=1e-12)

    def test_stiffness_constant_in_kernel(self):
        m = unit_box_mesh(2, 3)
        K = fem.assemble_p1_stiffness(fem.scalar_p1_space(m), 2.0)
        assert np.abs(spmv(K, np.ones(m.n_vertices))).max() < 1e-13

    def test_mass_total(self):
        m = unit_box_mesh(2, 3)
        M = fem.assemble_p1_mass(fem.scalar_p1_space(m))
        ones = np.ones(m.n_vertices)
        assert quad_form(M, ones) == pytest.approx(1.0, rel=1e-12)

    def test_p0_mass_diag(self):
        m = unit_box_mesh(2, 2)
        M = fem.assemble_p0_mass(fem.p0_space(m))
        assert np.allclose(M.to_scipy().toarray(), np.diag(m.cell_volumes))


class TestPsdSpotChecks:
    def test_all_symmetric_forms_psd(self):
        m = tag_footing_boundary(unit_box_mesh(2, 3))
        forms = fem.assemble_forms(m, mu=4.0, lam=2.0, kappa=1e-3)
        rng = np.random.default_rng(1)
        for A in (forms.A_elast, forms.M_rt, forms.M_p, forms.K_diff):
            for _ in range(100):
                x = rng.standard_normal(A.nrows)
                assert quad_form(A, x) >= -1e-10 * max(np.abs(A.values).max(), 1.0)


class TestSpaces:
    def test_clamped_dofs_on_bottom(self):
        m = tag_footing_boundary(unit_box_mesh(2, 4))
        V = fem.vector_p1_space(m, "displacement")
        verts = np.unique(m.facet_vertices[m.tags["displacement"]])
        assert len(V.dirichlet_dofs) == 2 * len(verts)
        assert np.all(m.vertices[verts][:, 1] < 1e-12)

    def test_sealed_facets(self):
        m = tag_footing_boundary(unit_box_mesh(2, 4))
        Q = fem.rt0_space(m, "flux")
        assert set(Q.dirichlet_dofs) == set(m.tags["flux"])

    def test_rejects_unknown_kind(self):
        m = unit_box_mesh(2, 1)
        with pytest.raises(ValueError):
            fem.FeSpace("Q2", m, 4)

    def test_rejects_out_of_range_dirichlet(self):
        m = unit_box_mesh(2, 1)
        with pytest.raises(ValueError):
            fem.FeSpace("P0", m, m.n_cells, np.array([99]))


class TestLoads:
    def test_traction_total_force(self):
        m = tag_footing_boundary(unit_box_mesh(2, 8))
        V = fem.vector_p1_space(m, "displacement")
        f = fem.traction_load(V, "load_patch", np.array([0.0, -2.0]))
        total = np.array([f[0::2].sum(), f[1::2].sum()])
        # patch length 1/2 times traction
        assert np.allclose(total, [0.0, -1.0], atol=1e-13)

    def test_facet_normal_load_values(self):
        m = tag_footing_boundary(unit_box_mesh(2, 4))
        Q = fem.rt0_space(m, None)
        g = fem.facet_normal_load(Q, "pressure", 3.0)
        assert np.allclose(g[m.tags["pressure"]], 3.0)
        others = np.setdiff1d(np.arange(m.n_facets), m.tags["pressure"])
        assert np.abs(g[others]).max() == 0.0
