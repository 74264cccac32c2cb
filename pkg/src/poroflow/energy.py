"""Per-time-step discrete energies for the four model families.

Every solver in this package minimizes one of these objects.  The quadratic
families (linear poro, visco, thermo) are stored exactly as

    E(x) = 1/2 x'Hx - b'x + e0

with H composed from the assembled forms, so eval/grad/Hessian are mutually
consistent by construction.  Pressure (and temperature) are eliminated
cellwise inside the energy; minimization runs over (u, q)-type states only,
and the eliminated fields are recovered by post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .fem import (
    AssembledForms,
    assemble_rt0_mass,
    rt0_space,
    strain_operator,
    strain_pairs,
)
from .linalg import CsrMatrix, NotSpdError
from .models import (
    LinearElasticLaw,
    NlCompressibilityLaw,
    NonlinearLaw,
    PoroParams,
    ThermoParams,
    ViscoParams,
)


@dataclass(frozen=True)
class StepData:
    """Frozen history and loads for one implicit time step.

    theta_prev (and S_prev, eps_v_prev where used) are cellwise fields at
    the previous time level; loads are assembled dof vectors at the new
    time level.  Omitted fields default to zero.
    """

    dt: float
    theta_prev: np.ndarray
    q_theta: Optional[np.ndarray] = None
    f_mech: Optional[np.ndarray] = None
    f_fluid: Optional[np.ndarray] = None
    S_prev: Optional[np.ndarray] = None
    q_S: Optional[np.ndarray] = None
    f_entropy: Optional[np.ndarray] = None
    eps_v_prev: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def theta_eff(self, n_cells: int) -> np.ndarray:
        th = _sized(self.theta_prev, n_cells, "theta_prev")
        if self.q_theta is None:
            return th.copy()
        return th + self.dt * _sized(self.q_theta, n_cells, "q_theta")

    def entropy_eff(self, n_cells: int) -> np.ndarray:
        s = (
            np.zeros(n_cells)
            if self.S_prev is None
            else _sized(self.S_prev, n_cells, "S_prev")
        )
        if self.q_S is None:
            return s
        return s + self.dt * _sized(self.q_S, n_cells, "q_S")


def _sized(arr, n, name) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    if out.shape != (n,):
        raise ValueError(f"{name} has shape {out.shape}, expected ({n},)")
    return out


def _load(step_load, forms_load, n, name) -> np.ndarray:
    if step_load is None:
        return np.asarray(forms_load, dtype=float)
    return _sized(step_load, n, name)


def elastic_metric(mu: float, lam: float, dim: int) -> np.ndarray:
    """Quadratic form of <C e, e> in the strain-component convention of
    strain_pairs: Q = 2 mu W + lam t t', with W the contraction weights and
    t the trace selector."""
    _, w = strain_pairs(dim)
    t = np.zeros(len(w))
    t[:dim] = 1.0
    return 2.0 * mu * np.diag(w) + lam * np.outer(t, t)


def strain_matrix(u_space) -> sp.csr_matrix:
    """Sparse map from global displacement dofs to cellwise strain
    components (cell-major, strain_pairs ordering)."""
    mesh = u_space.mesh
    d = mesh.dim
    S = strain_operator(u_space)  # (nc, ncomp, d*(d+1))
    nc, ncomp, nloc = S.shape
    local = (d * mesh.cells[:, :, None] + np.arange(d)).reshape(nc, nloc)
    rows = (ncomp * np.arange(nc)[:, None, None] + np.arange(ncomp)[None, :, None])
    rows = np.broadcast_to(rows, S.shape)
    cols = np.broadcast_to(local[:, None, :], S.shape)
    out = sp.coo_matrix(
        (S.ravel(), (rows.ravel(), cols.ravel())),
        shape=(nc * ncomp, u_space.dof_count),
    )
    return out.tocsr()


class DiscreteEnergy:
    """Common state layout and bookkeeping shared by all families.

    layout: ordered (name, lo, hi) dof ranges; groups: the default
    alternating-minimization partition as tuples of block names.
    """

    def __init__(self, layout, groups, free_mask, step: StepData, is_quadratic: bool):
        self.layout = tuple((str(n), int(lo), int(hi)) for n, lo, hi in layout)
        self.groups = tuple(tuple(g) for g in groups)
        self.free_mask = np.asarray(free_mask, dtype=bool)
        self.step = step
        self.prev_state_data = step
        self.is_quadratic = is_quadratic
        names = [n for n, _, _ in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        if self.layout[0][1] != 0 or any(
            self.layout[i][2] != self.layout[i + 1][1] for i in range(len(names) - 1)
        ):
            raise ValueError("blocks must tile the state contiguously")
        self._n = self.layout[-1][2]
        if self.free_mask.shape != (self._n,):
            raise ValueError("free mask does not match the state size")

    @property
    def n_dofs(self) -> int:
        return self._n

    def block_slice(self, name: str) -> slice:
        for n, lo, hi in self.layout:
            if n == name:
                return slice(lo, hi)
        raise KeyError(f"no block named {name!r}")

    def group_indices(self, names) -> np.ndarray:
        idx = []
        for n in names:
            s = self.block_slice(n)
            idx.append(np.arange(s.start, s.stop))
        return np.concatenate(idx)

    def zero_state(self) -> np.ndarray:
        return np.zeros(self._n)

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self._n,):
            raise ValueError(f"state has shape {x.shape}, expected ({self._n},)")
        return x


class QuadraticStepEnergy(DiscreteEnergy):
    """E(x) = 1/2 x'Hx - b'x + e0 with an exact sparse Hessian."""

    def __init__(self, layout, groups, free_mask, step, H, b, e0):
        super().__init__(layout, groups, free_mask, step, is_quadratic=True)
        self.H = H.tocsr()
        self.b = np.asarray(b, dtype=float)
        self.e0 = float(e0)
        if self.H.shape != (self.n_dofs, self.n_dofs) or self.b.shape != (self.n_dofs,):
            raise ValueError("inconsistent dof counts in energy assembly")

    def eval(self, x) -> float:
        x = self.check_state(x)
        return 0.5 * float(x @ (self.H @ x)) - float(self.b @ x) + self.e0

    def grad(self, x) -> np.ndarray:
        x = self.check_state(x)
        return self.H @ x - self.b

    def hessian(self, x=None) -> CsrMatrix:
        return CsrMatrix.from_scipy(self.H)

    def hessian_block(self, names, x=None) -> CsrMatrix:
        if isinstance(names, str):
            names = (names,)
        idx = self.group_indices(names)
        return CsrMatrix.from_scipy(self.H[np.ix_(idx, idx)].tocsr())


class PoroEnergy(QuadraticStepEnergy):
    """Three-field step energy of linear poroelasticity with the pressure
    eliminated cellwise: blocks (u, q)."""

    def __init__(self, forms: AssembledForms, params: PoroParams, step: StepData,
                 gamma: float = 1.0):
        if gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        mesh = forms.u_space.mesh
        nc = mesh.n_cells
        nu = forms.u_space.dof_count
        nq = forms.q_space.dof_count
        vol = mesh.cell_volumes
        dt, alpha, M = step.dt, params.alpha, params.M

        A = forms.A_elast.to_scipy()
        Mrt = forms.M_rt.to_scipy()
        B = forms.B_div.to_scipy()
        D = forms.D_div.to_scipy()
        theta_eff = step.theta_eff(nc)
        f_u = _load(step.f_mech, forms.f_mech, nu, "f_mech")
        f_q = _load(step.f_fluid, forms.f_fluid, nq, "f_fluid")

        inv_vol = sp.diags(1.0 / vol)
        G = inv_vol @ sp.hstack([alpha * B, dt * D], format="csr")
        Wc = sp.diags(vol)
        H = sp.block_diag([A, dt * Mrt], format="csr") + M * (G.T @ Wc @ G)
        b = np.concatenate([f_u, dt * f_q]) + M * (G.T @ (vol * theta_eff))
        e0 = 0.5 * M * float(theta_eff @ (vol * theta_eff))

        layout = (("u", 0, nu), ("q", nu, nu + nq))
        groups = (("u",), ("q",))
        free = np.concatenate([forms.u_space.free_mask(), forms.q_space.free_mask()])
        super().__init__(layout, groups, free, step, H, b, e0)

        self.forms = forms
        self.params = params
        # gamma is carried as a solver hint only; the energy itself is the
        # physical one so its decrease is meaningful to monitor
        self.gamma = float(gamma)
        self.mesh = mesh
        self.vol = vol
        self.alpha, self.M, self.dt = alpha, M, dt
        self.A, self.Mrt, self.B, self.D = A, Mrt, B, D
        self.f_u, self.f_q = f_u, f_q
        self.theta_eff = theta_eff

    def content_residual(self, x) -> np.ndarray:
        """theta_eff minus the volumetric content of the state, cellwise."""
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        q = x[self.block_slice("q")]
        div_terms = self.alpha * (self.B @ u) + self.dt * (self.D @ q)
        return self.theta_eff - div_terms / self.vol

    def pressure(self, x) -> np.ndarray:
        return self.M * self.content_residual(x)

    def content_new(self, x) -> np.ndarray:
        """The updated cellwise fluid content theta^n for this state."""
        x = self.check_state(x)
        q = x[self.block_slice("q")]
        return self.theta_eff - self.dt * (self.D @ q) / self.vol


def build_poro_energy(forms: AssembledForms, params: PoroParams, step: StepData,
                      gamma: float = 1.0) -> PoroEnergy:
    return PoroEnergy(forms, params, step, gamma)


class ViscoEnergy(QuadraticStepEnergy):
    """Visco-elastic step energy, blocks (u, ev, q) with the internal strain
    ev stored cellwise in strain-component convention; mechanics group is
    (u, ev) jointly."""

    def __init__(self, forms: AssembledForms, params: PoroParams,
                 visco: ViscoParams, step: StepData, gamma: float = 1.0):
        mesh = forms.u_space.mesh
        d = mesh.dim
        nc = mesh.n_cells
        _, w = strain_pairs(d)
        ncomp = len(w)
        nu = forms.u_space.dof_count
        nq = forms.q_space.dof_count
        nev = nc * ncomp
        vol = mesh.cell_volumes
        dt, alpha, M = step.dt, params.alpha, params.M
        alpha_v = visco.alpha_v

        Su = strain_matrix(forms.u_space)
        Q_C = elastic_metric(params.mu, params.lam, d)
        Q_Cv = elastic_metric(visco.mu_v, visco.lam_v, d)
        Q_Cvp = elastic_metric(visco.mu_v_prime, visco.lambda_v_prime, d)
        Sig_C = sp.kron(sp.diags(vol), Q_C, format="csr")
        Sig_Cv = sp.kron(sp.diags(vol), Q_Cv, format="csr")
        Sig_Cvp = sp.kron(sp.diags(vol), Q_Cvp, format="csr")

        Mrt = forms.M_rt.to_scipy()
        B = forms.B_div.to_scipy()
        D = forms.D_div.to_scipy()
        theta_eff = step.theta_eff(nc)
        f_u = _load(step.f_mech, forms.f_mech, nu, "f_mech")
        f_q = _load(step.f_fluid, forms.f_fluid, nq, "f_fluid")
        if step.eps_v_prev is None:
            ev_prev = np.zeros(nev)
        else:
            ev_prev = np.asarray(step.eps_v_prev, dtype=float).reshape(-1)
            if ev_prev.shape != (nev,):
                raise ValueError("eps_v_prev has the wrong size")

        # trace of ev per cell and the elastic difference eps(u) - ev
        t = np.zeros(ncomp)
        t[:d] = 1.0
        T_ev = sp.kron(sp.eye(nc), sp.csr_matrix(t), format="csr")
        I_ev = sp.eye(nev, format="csr")
        Z_uq = sp.csr_matrix((nev, nq))
        G_el = sp.hstack([Su, -I_ev, Z_uq], format="csr")

        inv_vol = sp.diags(1.0 / vol)
        G_ct = sp.hstack(
            [alpha * (inv_vol @ B), (alpha_v - alpha) * T_ev, dt * (inv_vol @ D)],
            format="csr",
        )
        Wc = sp.diags(vol)

        H = (
            G_el.T @ Sig_C @ G_el
            + sp.block_diag([sp.csr_matrix((nu, nu)), Sig_Cv + Sig_Cvp / dt, dt * Mrt],
                            format="csr")
            + M * (G_ct.T @ Wc @ G_ct)
        )
        b = np.concatenate([f_u, (Sig_Cvp @ ev_prev) / dt, dt * f_q])
        b = b + M * (G_ct.T @ (vol * theta_eff))
        e0 = 0.5 * M * float(theta_eff @ (vol * theta_eff))
        e0 += 0.5 / dt * float(ev_prev @ (Sig_Cvp @ ev_prev))

        layout = (("u", 0, nu), ("ev", nu, nu + nev), ("q", nu + nev, nu + nev + nq))
        groups = (("u", "ev"), ("q",))
        free = np.concatenate(
            [forms.u_space.free_mask(), np.ones(nev, dtype=bool),
             forms.q_space.free_mask()]
        )
        super().__init__(layout, groups, free, step, H, b, e0)

        self.forms = forms
        self.params = params
        self.visco = visco
        self.gamma = float(gamma)
        self.mesh = mesh
        self.vol = vol
        self.ncomp = ncomp
        self.alpha, self.alpha_v, self.M, self.dt = alpha, alpha_v, M, dt
        self.Su, self.T_ev = Su, T_ev
        self.Mrt, self.B, self.D = Mrt, B, D
        self.f_u, self.f_q = f_u, f_q
        self.ev_prev = ev_prev
        self.theta_eff = theta_eff

    def content_residual(self, x) -> np.ndarray:
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        ev = x[self.block_slice("ev")]
        q = x[self.block_slice("q")]
        y = (
            self.alpha * (self.B @ u) / self.vol
            + (self.alpha_v - self.alpha) * (self.T_ev @ ev)
            + self.dt * (self.D @ q) / self.vol
        )
        return self.theta_eff - y

    def pressure(self, x) -> np.ndarray:
        return self.M * self.content_residual(x)


def build_visco_energy(forms: AssembledForms, params: PoroParams,
                       visco: ViscoParams, step: StepData,
                       gamma: float = 1.0) -> ViscoEnergy:
    return ViscoEnergy(forms, params, visco, step, gamma)


class ThermoEnergy(QuadraticStepEnergy):
    """Reduced thermo-poro-elastic step energy, blocks (u, q, j); pressure
    and temperature are eliminated cellwise through the 2x2 coupling
    matrix."""

    def __init__(self, forms: AssembledForms, params: PoroParams,
                 thermo: ThermoParams, step: StepData, gamma: float = 1.0):
        mesh = forms.u_space.mesh
        nc = mesh.n_cells
        nu = forms.u_space.dof_count
        nq = forms.q_space.dof_count
        vol = mesh.cell_volumes
        dt, alpha, M = step.dt, params.alpha, params.M
        k_dr = params.k_dr(mesh.dim)

        MT = thermo.coupling_matrix(M)  # raises if not SPD
        j_space = rt0_space(mesh, noflow_tag="entropy_flux")
        nj = j_space.dof_count
        Mrt_j = assemble_rt0_mass(j_space, thermo.kappa_F / thermo.T0).to_scipy()

        A = forms.A_elast.to_scipy()
        Mrt = forms.M_rt.to_scipy()
        B = forms.B_div.to_scipy()
        D = forms.D_div.to_scipy()
        theta_eff = step.theta_eff(nc)
        entropy_eff = step.entropy_eff(nc)
        f_u = _load(step.f_mech, forms.f_mech, nu, "f_mech")
        f_q = _load(step.f_fluid, forms.f_fluid, nq, "f_fluid")
        f_j = _load(step.f_entropy, np.zeros(nj), nj, "f_entropy")

        # interleaved cell rows (theta row, entropy row) of the content map
        inv_vol = sp.diags(1.0 / vol)
        a_vec = np.array([alpha, 3.0 * thermo.alpha_T * k_dr])
        row_u = sp.kron(inv_vol @ B, np.array([[a_vec[0]], [a_vec[1]]]))
        # j shares the facet layout with q, so the same D applies to both
        row_q = sp.kron(dt * (inv_vol @ D), np.array([[1.0], [0.0]]))
        row_j = sp.kron(dt * (inv_vol @ D), np.array([[0.0], [1.0]]))
        G_t = sp.hstack([row_u, row_q, row_j], format="csr")

        Sig = sp.kron(sp.diags(vol), MT, format="csr")
        c_hat = np.empty(2 * nc)
        c_hat[0::2] = theta_eff
        c_hat[1::2] = entropy_eff

        H = (
            sp.block_diag([A, dt * Mrt, dt * Mrt_j], format="csr")
            + G_t.T @ Sig @ G_t
        )
        b = np.concatenate([f_u, dt * f_q, dt * f_j]) + G_t.T @ (Sig @ c_hat)
        e0 = 0.5 * float(c_hat @ (Sig @ c_hat))

        layout = (("u", 0, nu), ("q", nu, nu + nq), ("j", nu + nq, nu + nq + nj))
        groups = (("u",), ("q", "j"))
        free = np.concatenate(
            [forms.u_space.free_mask(), forms.q_space.free_mask(),
             j_space.free_mask()]
        )
        super().__init__(layout, groups, free, step, H, b, e0)

        self.forms = forms
        self.params = params
        self.thermo = thermo
        self.gamma = float(gamma)
        self.mesh = mesh
        self.vol = vol
        self.alpha, self.M, self.dt, self.k_dr = alpha, M, dt, k_dr
        self.MT = MT
        self.a_vec = a_vec
        self.j_space = j_space
        self.A, self.Mrt, self.Mrt_j, self.B, self.D = A, Mrt, Mrt_j, B, D
        self.f_u, self.f_q, self.f_j = f_u, f_q, f_j
        self.theta_eff, self.entropy_eff = theta_eff, entropy_eff

    def content_residual(self, x) -> np.ndarray:
        """Cellwise 2-vector residual (theta row, entropy row), shape (nc, 2)."""
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        q = x[self.block_slice("q")]
        j = x[self.block_slice("j")]
        bu = (self.B @ u) / self.vol
        r_th = self.theta_eff - self.a_vec[0] * bu - self.dt * (self.D @ q) / self.vol
        r_s = self.entropy_eff - self.a_vec[1] * bu - self.dt * (self.D @ j) / self.vol
        return np.stack([r_th, r_s], axis=1)

    def pressure_temperature(self, x) -> np.ndarray:
        """Recovered (p, T) per cell, shape (nc, 2)."""
        return self.content_residual(x) @ self.MT.T


def build_thermo_energy(forms: AssembledForms, params: PoroParams,
                        thermo: ThermoParams, step: StepData,
                        gamma: float = 1.0) -> ThermoEnergy:
    return ThermoEnergy(forms, params, thermo, step, gamma)


class NonlinearEnergy(DiscreteEnergy):
    """Nonlinear step energy: integral of W(eps(u)) plus the antiderivative
    of the inverse compressibility at the eliminated content, plus the flow
    dissipation.  Blocks (u, q); not quadratic."""

    def __init__(self, forms: AssembledForms, law: NonlinearLaw,
                 params: PoroParams, step: StepData, gamma: float = 1.0):
        mesh = forms.u_space.mesh
        nc = mesh.n_cells
        nu = forms.u_space.dof_count
        nq = forms.q_space.dof_count
        layout = (("u", 0, nu), ("q", nu, nu + nq))
        groups = (("u",), ("q",))
        free = np.concatenate([forms.u_space.free_mask(), forms.q_space.free_mask()])
        super().__init__(layout, groups, free, step, is_quadratic=False)

        self.forms = forms
        self.law = law
        self.params = params
        self.gamma = float(gamma)
        self.mesh = mesh
        self.dim = mesh.dim
        self.vol = mesh.cell_volumes
        self.dt, self.alpha = step.dt, params.alpha
        self.Su = strain_matrix(forms.u_space)
        _, self.w = strain_pairs(mesh.dim)
        self.ncomp = len(self.w)
        self.Mrt = forms.M_rt.to_scipy()
        self.B = forms.B_div.to_scipy()
        self.D = forms.D_div.to_scipy()
        self.theta_eff = step.theta_eff(nc)
        self.f_u = _load(step.f_mech, forms.f_mech, nu, "f_mech")
        self.f_q = _load(step.f_fluid, forms.f_fluid, nq, "f_fluid")
        inv_vol = sp.diags(1.0 / self.vol)
        self.G_ct = inv_vol @ sp.hstack([self.alpha * self.B, self.dt * self.D],
                                        format="csr")

    # -- cellwise strain handling ------------------------------------------

    def strains(self, u) -> np.ndarray:
        """Cellwise strain components, shape (nc, ncomp)."""
        return (self.Su @ u).reshape(-1, self.ncomp)

    def _strain_to_matrix(self, s: np.ndarray) -> np.ndarray:
        d = self.dim
        pairs, _ = strain_pairs(d)
        eps = np.zeros((d, d))
        for c, (a, bb) in enumerate(pairs):
            eps[a, bb] = s[c]
            eps[bb, a] = s[c]
        return eps

    def cell_energy_density(self, u) -> np.ndarray:
        s = self.strains(u)
        w_law = self.law.w
        if isinstance(w_law, (LinearElasticLaw, NlCompressibilityLaw)):
            tr = s[:, : self.dim].sum(axis=1)
            frob2 = (s * s * self.w).sum(axis=1)
            if isinstance(w_law, LinearElasticLaw):
                return w_law.mu * frob2 + 0.5 * w_law.lam * tr * tr
            anti = np.array([w_law.l_antideriv(float(t)) for t in tr])
            return w_law.mu * frob2 + anti
        return np.array(
            [w_law.value(self._strain_to_matrix(s[c])) for c in range(s.shape[0])]
        )

    def cell_stress(self, u) -> np.ndarray:
        """Stress in strain-component convention, shape (nc, ncomp)."""
        s = self.strains(u)
        w_law = self.law.w
        if isinstance(w_law, (LinearElasticLaw, NlCompressibilityLaw)):
            tr = s[:, : self.dim].sum(axis=1)
            if isinstance(w_law, LinearElasticLaw):
                lvals = w_law.lam * tr
            else:
                lvals = np.array([w_law.l(float(t)) for t in tr])
            sig = 2.0 * w_law.mu * s
            sig[:, : self.dim] += lvals[:, None]
            return sig
        pairs, _ = strain_pairs(self.dim)
        out = np.empty_like(s)
        for c in range(s.shape[0]):
            sm = w_law.stress(self._strain_to_matrix(s[c]))
            out[c] = [sm[a, bb] for (a, bb) in pairs]
        return out

    def content_residual(self, x) -> np.ndarray:
        x = self.check_state(x)
        return self.theta_eff - self.G_ct @ x

    def pressure(self, x) -> np.ndarray:
        return np.asarray(self.law.b.b_inverse(self.content_residual(x)))

    # -- energy interface ---------------------------------------------------

    def eval(self, x) -> float:
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        q = x[self.block_slice("q")]
        mech = float(self.vol @ self.cell_energy_density(u))
        flow = 0.5 * self.dt * float(q @ (self.Mrt @ q))
        fluid = float(self.vol @ np.asarray(self.law.b.b_star(self.content_residual(x))))
        work = float(self.f_u @ u) + self.dt * float(self.f_q @ q)
        return mech + flow + fluid - work

    def grad(self, x) -> np.ndarray:
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        q = x[self.block_slice("q")]
        p = self.pressure(x)
        sig = self.cell_stress(u) * self.w[None, :] * self.vol[:, None]
        g_u = self.Su.T @ sig.ravel() - self.alpha * (self.B.T @ p) - self.f_u
        g_q = self.dt * (self.Mrt @ q - self.D.T @ p - self.f_q)
        return np.concatenate([g_u, g_q])

    def _mech_metric(self, u) -> sp.csr_matrix:
        """Cell-block-diagonal Hessian metric of the strain energy at u."""
        s = self.strains(u)
        tr = s[:, : self.dim].sum(axis=1)
        w_law = self.law.w
        if isinstance(w_law, (LinearElasticLaw, NlCompressibilityLaw)):
            mu_eff, lam_eff = w_law.newton_moduli(tr, self.dim)
            blocks = [
                self.vol[c] * elastic_metric(float(mu_eff[c]), float(lam_eff[c]), self.dim)
                for c in range(len(tr))
            ]
        else:
            from .models import strain_energy_hessian_fd, sym_tensor_basis

            d = self.dim
            scale = np.ones(self.ncomp)
            scale[d:] = np.sqrt(2.0)
            blocks = []
            for c in range(s.shape[0]):
                Ho = strain_energy_hessian_fd(w_law, self._strain_to_matrix(s[c]))
                blocks.append(self.vol[c] * (np.diag(scale) @ Ho @ np.diag(scale)))
        return sp.block_diag(blocks, format="csr")

    def hessian(self, x=None) -> CsrMatrix:
        if x is None:
            raise ValueError("nonlinear energy needs a linearization point")
        x = self.check_state(x)
        u = x[self.block_slice("u")]
        r = self.content_residual(x)
        p = np.asarray(self.law.b.b_inverse(r))
        bp = np.asarray(self.law.b.b_prime(p))
        if np.any(bp <= 0.0):
            raise NotSpdError("compressibility slope vanished at the linearization point")
        H_mech = self.Su.T @ self._mech_metric(u) @ self.Su
        H_flow = sp.block_diag(
            [sp.csr_matrix((len(self.f_u), len(self.f_u))), self.dt * self.Mrt],
            format="csr",
        )
        Sig = sp.diags(self.vol / bp)
        H = sp.block_diag([H_mech, sp.csr_matrix((len(self.f_q), len(self.f_q)))],
                          format="csr") + H_flow + self.G_ct.T @ Sig @ self.G_ct
        return CsrMatrix.from_scipy(H.tocsr())

    def hessian_block(self, names, x=None):
        if x is None:
            def linearized(point, _names=names):
                return self.hessian_block(_names, point)

            return linearized
        if isinstance(names, str):
            names = (names,)
        idx = self.group_indices(names)
        Hs = self.hessian(x).to_scipy()
        return CsrMatrix.from_scipy(Hs[np.ix_(idx, idx)].tocsr())


def build_nonlinear_energy(forms: AssembledForms, law: NonlinearLaw,
                           params: PoroParams, step: StepData,
                           gamma: float = 1.0) -> NonlinearEnergy:
    return NonlinearEnergy(forms, law, params, step, gamma)


def energy_norm(E: DiscreteEnergy, x, at=None) -> float:
    """Norm induced by the quadratic part: sqrt(1/2 <Hx, x>).

    Nonlinear energies evaluate the Hessian at the linearization point at.
    """
    x = E.check_state(x)
    if E.is_quadratic:
        H = E.H
    else:
        H = E.hessian(at if at is not None else x).to_scipy()
    q = 0.5 * float(x @ (H @ x))
    scale = float(np.abs(H).sum()) * float(x @ x) + 1.0
    if q < -1e-12 * scale:
        raise NotSpdError("quadratic part is not positive semidefinite")
    return float(np.sqrt(max(q, 0.0)))
