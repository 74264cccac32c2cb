"""Step energies: closed-form values, gradient/Hessian consistency,
convexity, and cross-family reductions."""

import numpy as np
import pytest
import scipy.sparse as sp

from poroflow import energy as en
from poroflow import fem
from poroflow import mesh as msh
from poroflow import models as m
from poroflow.linalg import CsrMatrix, solve_spd


def unit_params():
    # O(1) parameter set: keeps finite-difference checks in well-conditioned
    # floating point territory
    return m.PoroParams(E=10.0, nu=0.2, alpha=0.9, M=7.0, kappa=0.5)


def physical_params():
    return m.PoroParams(E=1e10, nu=0.2, alpha=1.0, M=1e11, kappa=1e-13)


@pytest.fixture(scope="module")
def box():
    mesh = msh.tag_footing_boundary(msh.unit_box_mesh(2, 4))
    return mesh


def make_forms(mesh, params):
    return fem.assemble_forms(mesh, params.mu, params.lam, params.kappa)


def minimize_quadratic(E):
    free = np.flatnonzero(E.free_mask)
    Hff = E.H[np.ix_(free, free)].tocsr()
    x = E.zero_state()
    x[free] = solve_spd(CsrMatrix.from_scipy(Hff), E.b[free])
    return x


class TestStepData:
    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            en.StepData(dt=0.0, theta_prev=np.zeros(3))

    def test_theta_eff_accumulates_source(self):
        s = en.StepData(dt=0.5, theta_prev=np.ones(3), q_theta=2.0 * np.ones(3))
        assert np.allclose(s.theta_eff(3), 2.0)

    def test_size_mismatch_caught(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        s = en.StepData(dt=0.1, theta_prev=np.zeros(5))
        with pytest.raises(ValueError):
            en.build_poro_energy(forms, params, s)


class TestPoroEnergy:
    def test_zero_everything(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(forms, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells)))
        assert E.eval(E.zero_state()) == 0.0
        assert np.all(E.grad(E.zero_state()) == 0.0)

    def test_constant_content_value(self, box):
        # unit box: eval at zero state is (M/2) c^2 |Omega| = (M/2) c^2
        params = physical_params()
        forms = make_forms(box, params)
        c = 3.0
        E = en.build_poro_energy(
            forms, params, en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, c))
        )
        assert E.eval(E.zero_state()) == pytest.approx(0.5 * params.M * c * c, rel=1e-12)

    def test_exact_quadratic_identity(self, box):
        params = physical_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(
            forms, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 1e-3)),
        )
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.standard_normal(E.n_dofs)
            lhs = E.eval(x) - E.eval(E.zero_state()) - E.grad(E.zero_state()) @ x
            rhs = 0.5 * x @ (E.H @ x)
            assert abs(lhs - rhs) <= 1e-10 * max(abs(rhs), 1.0)

    def test_gradient_matches_finite_differences(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(
            forms, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.standard_normal(E.n_dofs)
            hdir = rng.standard_normal(E.n_dofs)
            d = 1e-6 * np.linalg.norm(x) / np.linalg.norm(hdir)
            fd = (E.eval(x + d * hdir) - E.eval(x - d * hdir)) / (2.0 * d)
            exact = E.grad(x) @ hdir
            assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1.0)

    def test_convexity_midpoint(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(
            forms, params, en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3))
        )
        rng = np.random.default_rng(5)
        for _ in range(50):
            x, y = rng.standard_normal((2, E.n_dofs))
            mid = E.eval(0.5 * (x + y))
            avg = 0.5 * (E.eval(x) + E.eval(y))
            scale = max(abs(E.eval(x)), abs(E.eval(y)), 1.0)
            assert mid <= avg + 1e-10 * scale

    def test_pressure_consistency_in_flow_gradient(self, box):
        params = physical_params()
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1e8]))
        E = en.build_poro_energy(
            forms, params,
            en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), f_mech=fu),
        )
        rng = np.random.default_rng(6)
        x = rng.standard_normal(E.n_dofs) * 1e-4
        p = E.pressure(x)
        q = x[E.block_slice("q")]
        formula = E.dt * (E.Mrt @ q - E.D.T @ p - E.f_q)
        got = E.grad(x)[E.block_slice("q")]
        assert np.linalg.norm(got - formula) <= 1e-10 * np.linalg.norm(got)

    def test_minimizer_has_zero_free_gradient(self, box):
        params = physical_params()
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1e8]))
        E = en.build_poro_energy(
            forms, params,
            en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), f_mech=fu),
        )
        x = minimize_quadratic(E)
        g0 = np.linalg.norm(E.grad(E.zero_state())[E.free_mask])
        assert np.linalg.norm(E.grad(x)[E.free_mask]) <= 1e-9 * g0

    def test_block_layout(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(forms, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells)))
        assert [n for n, _, _ in E.layout] == ["u", "q"]
        assert E.groups == (("u",), ("q",))
        assert E.is_quadratic
        su = E.block_slice("u")
        assert su.stop - su.start == forms.u_space.dof_count
        H_uu = E.hessian_block("u").to_scipy()
        assert np.all(np.linalg.eigvalsh(H_uu.toarray()[np.ix_(range(6), range(6))]) > -1e-12)
        with pytest.raises(KeyError):
            E.block_slice("p")

    def test_negative_gamma_rejected(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        with pytest.raises(ValueError):
            en.build_poro_energy(
                forms, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells)),
                gamma=-0.5,
            )

    def test_mass_update_is_divergence(self, box):
        # content update theta^n = theta_eff - dt*div q, cellwise
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(
            forms, params, en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.2))
        )
        rng = np.random.default_rng(8)
        x = rng.standard_normal(E.n_dofs)
        q = x[E.block_slice("q")]
        expect = E.theta_eff - E.dt * (E.D @ q) / E.vol
        assert np.allclose(E.content_new(x), expect)


class TestViscoEnergy:
    def test_zero_state_value(self, box):
        params = physical_params()
        visco = m.ViscoParams(E_v=1e10, nu_v=0.3, mu_v_prime=0.0,
                              lambda_v_prime=1e9, alpha_v=0.8)
        forms = make_forms(box, params)
        th = np.full(box.n_cells, 1e-3)
        E = en.build_visco_energy(forms, params, visco, en.StepData(dt=0.1, theta_prev=th))
        expect = 0.5 * params.M * float(th @ (box.cell_volumes * th))
        assert E.eval(E.zero_state()) == pytest.approx(expect, rel=1e-12)

    def test_stiff_internal_strain_recovers_poro(self, box):
        # penalty limit: C_v -> infinity freezes eps_v at zero
        params = physical_params()
        stiff = m.ViscoParams(E_v=1e6 * 1e10, nu_v=0.2, mu_v_prime=1.0,
                              lambda_v_prime=1.0, alpha_v=1.0)
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1e8]))
        step = en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), f_mech=fu)
        Ev = en.build_visco_energy(forms, params, stiff, step)
        Ep = en.build_poro_energy(forms, params, step)
        xv = minimize_quadratic(Ev)
        xp = minimize_quadratic(Ep)
        assert abs(Ev.eval(xv) - Ep.eval(xp)) <= 1e-4 * abs(Ep.eval(xp))
        ev = xv[Ev.block_slice("ev")]
        u = xv[Ev.block_slice("u")]
        assert np.linalg.norm(ev) <= 1e-4 * max(np.linalg.norm(u), 1e-30)

    def test_matching_biot_with_frozen_ev_reduces_to_poro(self, box):
        # alpha_v = alpha and ev = 0: (u, q) gradient entries coincide with
        # the poro energy's
        params = unit_params()
        visco = m.ViscoParams(E_v=3.0, nu_v=0.25, mu_v_prime=0.2,
                              lambda_v_prime=0.1, alpha_v=params.alpha)
        forms = make_forms(box, params)
        step = en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3))
        Ev = en.build_visco_energy(forms, params, visco, step)
        Ep = en.build_poro_energy(forms, params, step)
        rng = np.random.default_rng(11)
        for _ in range(5):
            xp = rng.standard_normal(Ep.n_dofs)
            xv = Ev.zero_state()
            xv[Ev.block_slice("u")] = xp[Ep.block_slice("u")]
            xv[Ev.block_slice("q")] = xp[Ep.block_slice("q")]
            gv, gp = Ev.grad(xv), Ep.grad(xp)
            for name in ("u", "q"):
                a = gv[Ev.block_slice(name)]
                b = gp[Ep.block_slice(name)]
                assert np.linalg.norm(a - b) <= 1e-10 * max(np.linalg.norm(b), 1.0)

    def test_history_load_enters_gradient(self, box):
        params = unit_params()
        visco = m.ViscoParams(E_v=3.0, nu_v=0.25, mu_v_prime=0.2,
                              lambda_v_prime=0.1, alpha_v=0.5)
        forms = make_forms(box, params)
        ncomp = len(fem.strain_pairs(2)[1])
        ev_prev = np.full((box.n_cells, ncomp), 0.1)
        E0 = en.build_visco_energy(
            forms, params, visco, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
        )
        E1 = en.build_visco_energy(
            forms, params, visco,
            en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), eps_v_prev=ev_prev),
        )
        g0 = E0.grad(E0.zero_state())
        g1 = E1.grad(E1.zero_state())
        sl = E1.block_slice("ev")
        assert np.linalg.norm(g1[sl] - g0[sl]) > 0.0
        # difference is exactly -(1/dt) Sig_Cv' ev_prev
        Qp = en.elastic_metric(visco.mu_v_prime, visco.lambda_v_prime, 2)
        Sig = sp.kron(sp.diags(box.cell_volumes), Qp)
        expect = -(Sig @ ev_prev.ravel()) / 0.1
        assert np.allclose(g1[sl] - g0[sl], expect, rtol=1e-12)

    def test_gradient_matches_finite_differences(self, box):
        params = unit_params()
        visco = m.ViscoParams(E_v=3.0, nu_v=0.25, mu_v_prime=0.2,
                              lambda_v_prime=0.1, alpha_v=0.5)
        forms = make_forms(box, params)
        E = en.build_visco_energy(
            forms, params, visco,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(12)
        for _ in range(20):
            x = rng.standard_normal(E.n_dofs)
            hdir = rng.standard_normal(E.n_dofs)
            d = 1e-6 * np.linalg.norm(x) / np.linalg.norm(hdir)
            fd = (E.eval(x + d * hdir) - E.eval(x - d * hdir)) / (2.0 * d)
            exact = E.grad(x) @ hdir
            assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1.0)

    def test_mechanics_group_is_joint(self, box):
        params = unit_params()
        visco = m.ViscoParams(E_v=3.0, nu_v=0.25, mu_v_prime=0.2,
                              lambda_v_prime=0.1, alpha_v=0.5)
        forms = make_forms(box, params)
        E = en.build_visco_energy(
            forms, params, visco, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
        )
        assert E.groups == (("u", "ev"), ("q",))


class TestThermoEnergy:
    def thermo(self):
        return m.ThermoParams(alpha_T=0.3, alpha_phi=0.05, C_d=2.0, T0=1.0, kappa_F=0.7)

    def test_zero_state_value(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        th = np.full(box.n_cells, 0.4)
        s_prev = np.full(box.n_cells, -0.2)
        E = en.build_thermo_energy(
            forms, params, self.thermo(),
            en.StepData(dt=0.1, theta_prev=th, S_prev=s_prev),
        )
        c = np.array([0.4, -0.2])
        expect = 0.5 * float(c @ (E.MT @ c))  # unit box volume
        assert E.eval(E.zero_state()) == pytest.approx(expect, rel=1e-12)

    def test_uncoupled_cross_blocks_vanish(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        t0 = m.ThermoParams(alpha_T=0.0, alpha_phi=0.0, C_d=2.0, T0=1.0, kappa_F=0.7)
        E = en.build_thermo_energy(
            forms, params, t0,
            en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells)),
        )
        su, sq, sj = E.block_slice("u"), E.block_slice("q"), E.block_slice("j")
        for a, bb in ((su, sj), (sq, sj)):
            blockm = E.H[a, bb]
            assert blockm.nnz == 0 or abs(blockm).max() == 0.0

    def test_not_spd_coupling_rejected(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        bad = m.ThermoParams(alpha_T=0.3, alpha_phi=10.0, C_d=2.0, T0=1.0, kappa_F=0.7)
        with pytest.raises(ValueError):
            en.build_thermo_energy(
                forms, params, bad, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
            )

    def test_gradient_matches_finite_differences(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_thermo_energy(
            forms, params, self.thermo(),
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3),
                        S_prev=np.full(box.n_cells, -0.1)),
        )
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = rng.standard_normal(E.n_dofs)
            hdir = rng.standard_normal(E.n_dofs)
            d = 1e-6 * np.linalg.norm(x) / np.linalg.norm(hdir)
            fd = (E.eval(x + d * hdir) - E.eval(x - d * hdir)) / (2.0 * d)
            exact = E.grad(x) @ hdir
            assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1.0)

    def test_minimizer_satisfies_weak_forms(self, box):
        # independent residual assembly: mechanics, flow, entropy flux
        params = unit_params()
        thermo = self.thermo()
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1.0]))
        E = en.build_thermo_energy(
            forms, params, thermo,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.2),
                        S_prev=np.full(box.n_cells, 0.1), f_mech=fu),
        )
        x = minimize_quadratic(E)
        pt = E.pressure_temperature(x)
        p, T = pt[:, 0], pt[:, 1]
        u = x[E.block_slice("u")]
        q = x[E.block_slice("q")]
        j = x[E.block_slice("j")]
        k_dr = params.k_dr(2)
        r_u = E.A @ u - E.B.T @ (params.alpha * p + 3.0 * thermo.alpha_T * k_dr * T) - E.f_u
        r_q = E.Mrt @ q - E.D.T @ p
        r_j = E.Mrt_j @ j - E.D.T @ T
        scale = max(np.linalg.norm(E.f_u), 1.0)
        assert np.linalg.norm(r_u[forms.u_space.free_mask()]) <= 1e-8 * scale
        assert np.linalg.norm(r_q[forms.q_space.free_mask()]) <= 1e-8 * scale
        assert np.linalg.norm(r_j[E.j_space.free_mask()]) <= 1e-8 * scale


class TestNonlinearEnergy:
    def test_linear_laws_reduce_to_quadratic_energy(self, box):
        params = physical_params()
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1e8]))
        step = en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), f_mech=fu)
        law = m.NonlinearLaw(w=m.LinearElasticLaw(mu=params.mu, lam=params.lam),
                             b=m.LinearCompressibility(M=params.M))
        Enl = en.build_nonlinear_energy(forms, law, params, step)
        Ep = en.build_poro_energy(forms, params, step)
        assert not Enl.is_quadratic
        rng = np.random.default_rng(21)
        for _ in range(5):
            x = rng.standard_normal(Enl.n_dofs) * 1e-4
            assert Enl.eval(x) == pytest.approx(Ep.eval(x), rel=1e-10, abs=1e-10)
            gn, gp = Enl.grad(x), Ep.grad(x)
            assert np.linalg.norm(gn - gp) <= 1e-10 * max(np.linalg.norm(gp), 1.0)

    def test_zero_state_zero_history(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.NlCompressibilityLaw.p_laplacian(mu=1.0, lam=3.0),
                             b=m.LinearCompressibility(M=params.M))
        E = en.build_nonlinear_energy(
            forms, law, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
        )
        assert E.eval(E.zero_state()) == 0.0

    def test_gradient_matches_finite_differences(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.NlCompressibilityLaw.p_laplacian(mu=2.0, lam=3.0),
                             b=m.LinearCompressibility(M=params.M))
        E = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(22)
        for _ in range(20):
            x = rng.standard_normal(E.n_dofs)
            hdir = rng.standard_normal(E.n_dofs)
            d = 1e-6 * np.linalg.norm(x) / np.linalg.norm(hdir)
            fd = (E.eval(x + d * hdir) - E.eval(x - d * hdir)) / (2.0 * d)
            exact = E.grad(x) @ hdir
            assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1.0)

    def test_hessian_matches_gradient_differences(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.NlCompressibilityLaw.p_laplacian(mu=2.0, lam=3.0),
                             b=m.LinearCompressibility(M=params.M))
        E = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(23)
        x = rng.standard_normal(E.n_dofs)
        H = E.hessian(x).to_scipy()
        dx = rng.standard_normal(E.n_dofs)
        d = 1e-7
        fd = (E.grad(x + d * dx) - E.grad(x - d * dx)) / (2.0 * d)
        assert np.linalg.norm(fd - H @ dx) <= 1e-5 * np.linalg.norm(fd)

    def test_hessian_needs_linearization_point(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.LinearElasticLaw(mu=1.0, lam=1.0),
                             b=m.LinearCompressibility(M=1.0))
        E = en.build_nonlinear_energy(
            forms, law, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
        )
        with pytest.raises(ValueError):
            E.hessian()
        cb = E.hessian_block("u")
        assert callable(cb)
        got = cb(E.zero_state())
        assert got.shape == (forms.u_space.dof_count, forms.u_space.dof_count)

    def test_bounded_content_law_energy(self, box):
        # tanh compressibility: finite for |content residual| < 1, errors beyond
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.LinearElasticLaw(mu=1.0, lam=1.0),
                             b=m.tanh_compressibility())
        E = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.5)),
        )
        v = E.eval(E.zero_state())
        assert np.isfinite(v) and v > 0.0
        E_bad = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 1.5)),
        )
        with pytest.raises(ValueError):
            E_bad.eval(E_bad.zero_state())

    def test_convexity_midpoint(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.NlCompressibilityLaw.p_laplacian(mu=2.0, lam=3.0),
                             b=m.LinearCompressibility(M=params.M))
        E = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(24)
        for _ in range(50):
            x, y = rng.standard_normal((2, E.n_dofs))
            mid = E.eval(0.5 * (x + y))
            avg = 0.5 * (E.eval(x) + E.eval(y))
            scale = max(abs(E.eval(x)), abs(E.eval(y)), 1.0)
            assert mid <= avg + 1e-10 * scale


class TestEnergyNorm:
    def test_zero_and_homogeneity(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        E = en.build_poro_energy(
            forms, params, en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells))
        )
        assert en.energy_norm(E, E.zero_state()) == 0.0
        rng = np.random.default_rng(31)
        x = rng.standard_normal(E.n_dofs)
        assert en.energy_norm(E, 2.0 * x) == pytest.approx(2.0 * en.energy_norm(E, x), rel=1e-12)

    def test_gap_identity_at_minimizer(self, box):
        # energy_norm(x - x*)^2 == eval(x) - eval(x*) for Dirichlet-compatible x
        params = physical_params()
        forms = make_forms(box, params)
        fu = fem.traction_load(forms.u_space, "load_patch", np.array([0.0, -1e8]))
        E = en.build_poro_energy(
            forms, params,
            en.StepData(dt=0.1, theta_prev=np.zeros(box.n_cells), f_mech=fu),
        )
        xstar = minimize_quadratic(E)
        rng = np.random.default_rng(32)
        x = E.zero_state()
        x[E.free_mask] = rng.standard_normal(int(E.free_mask.sum())) * np.abs(xstar[E.free_mask]).max()
        gap = E.eval(x) - E.eval(xstar)
        nrm2 = en.energy_norm(E, x - xstar) ** 2
        assert nrm2 == pytest.approx(gap, rel=1e-8)

    def test_nonlinear_norm_uses_linearization_point(self, box):
        params = unit_params()
        forms = make_forms(box, params)
        law = m.NonlinearLaw(w=m.NlCompressibilityLaw.p_laplacian(mu=2.0, lam=3.0),
                             b=m.LinearCompressibility(M=params.M))
        E = en.build_nonlinear_energy(
            forms, law, params,
            en.StepData(dt=0.1, theta_prev=np.full(box.n_cells, 0.3)),
        )
        rng = np.random.default_rng(33)
        x = rng.standard_normal(E.n_dofs)
        at = rng.standard_normal(E.n_dofs)
        v = en.energy_norm(E, x, at=at)
        assert np.isfinite(v) and v > 0.0
