"""Splitting solvers for the step energies: monolithic reference solves,
alternating minimization, undrained and fixed-stress splits with their
visco-elastic, thermal and nonlinear variants, quadratic line-search
relaxation, and the outer time stepper.

Every solver returns an IterationReport.  The recorded energy sequence is
the Lyapunov functional the scheme actually descends: the step energy
itself for minimization-based sweeps, the complementary (stress/pressure)
functional for the fixed-stress family.  Reports keep the full iterate
history so error norms against a reference minimizer can be formed after
the fact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .energy import (
    DiscreteEnergy,
    NonlinearEnergy,
    PoroEnergy,
    QuadraticStepEnergy,
    StepData,
    ThermoEnergy,
    ViscoEnergy,
    build_nonlinear_energy,
    build_poro_energy,
    build_thermo_energy,
    build_visco_energy,
    elastic_metric,
)
from .fem import AssembledForms
from .linalg import CsrMatrix, NotSpdError, SpdFactorization
from .models import NonlinearLaw, PoroParams, ThermoParams, ViscoParams

SCHEME_KINDS = (
    "monolithic",
    "undrained",
    "fixed_stress",
    "visco_undrained",
    "visco_fixed_stress",
    "thermo_undrained_adiabatic",
    "thermo_extended_fixed_stress",
    "thermo_three_block",
    "nl_fixed_stress_newton",
    "nl_fixed_stress_lscheme",
)

# divergence detection: relative increment grows by this factor over its
# minimum within a sliding window of outer iterations
_DIV_WINDOW = 10
_DIV_FACTOR = 1e3

# residual-based early exit so decoupled problems finish in one sweep
_GRAD_EXIT = 1e-11


class SolverError(RuntimeError):
    pass


class EnergyIncreaseError(SolverError):
    """The recorded descent functional increased where theory forbids it."""


class ConvergenceError(SolverError):
    def __init__(self, message: str, report: "IterationReport" = None, step: int = None):
        super().__init__(message)
        self.report = report
        self.step = step


@dataclass(frozen=True)
class InnerPolicy:
    """Inner-solver policy for the nonlinear splits.

    kind "newton" reassembles the block Jacobians at each inner iterate;
    kind "lscheme" uses the constant surrogate moduli (L_b, L_FS) in the
    flow block and the tensor with Lame-like scalars (L_mu, L_lam) in the
    mechanics block, assembled once.
    """

    kind: str = "newton"
    max_inner: int = 50
    inner_tol: float = 1e-5
    L_b: float = 0.0
    L_FS: float = 0.0
    L_mu: float = 0.0
    L_lam: float = 0.0
    line_search: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("newton", "lscheme"):
            raise ValueError(f"unknown inner policy kind {self.kind!r}")
        if self.max_inner < 1:
            raise ValueError("max_inner must be at least 1")
        if self.inner_tol <= 0.0:
            raise ValueError("inner_tol must be positive")
        if self.kind == "lscheme":
            if self.L_b < 0.0 or self.L_FS < 0.0:
                raise ValueError("L-scheme weights must be nonnegative")
            if self.L_b + self.L_FS <= 0.0:
                raise ValueError("L-scheme flow weight L_b + L_FS must be positive")
            # positive definiteness of 2*L_mu*I4 + L_lam*IxI in 2 and 3
            # dimensions reduces to these scalar conditions
            if (self.L_mu <= 0.0
                    or 2.0 * self.L_mu + 2.0 * self.L_lam <= 0.0
                    or 2.0 * self.L_mu + 3.0 * self.L_lam <= 0.0):
                raise ValueError("L-scheme mechanics tensor must be positive definite")

    @staticmethod
    def newton(max_inner: int = 50, inner_tol: float = 1e-5,
               line_search: bool = False, label: str = "") -> "InnerPolicy":
        return InnerPolicy(kind="newton", max_inner=max_inner,
                           inner_tol=inner_tol, line_search=line_search,
                           label=label)

    @staticmethod
    def lscheme(L_b: float, L_FS: float, L_mu: float, L_lam: float,
                max_inner: int = 1, inner_tol: float = 1e-5,
                line_search: bool = False, label: str = "") -> "InnerPolicy":
        return InnerPolicy(kind="lscheme", max_inner=max_inner,
                           inner_tol=inner_tol, L_b=L_b, L_FS=L_FS,
                           L_mu=L_mu, L_lam=L_lam, line_search=line_search,
                           label=label)


@dataclass(frozen=True)
class SplitScheme:
    """Configuration of one splitting scheme run."""

    kind: str
    gamma: float = 1.0
    line_search: str = "off"
    inner: Optional[InnerPolicy] = None
    tol_rel: float = 1e-6
    max_outer: int = 200

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        if self.line_search not in ("off", "quadratic"):
            raise ValueError("line_search must be 'off' or 'quadratic'")
        if self.tol_rel <= 0.0:
            raise ValueError("tol_rel must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if self.kind.startswith("nl_"):
            want = "newton" if self.kind.endswith("newton") else "lscheme"
            if self.inner is None or self.inner.kind != want:
                raise ValueError(f"scheme {self.kind} needs an inner policy of kind {want!r}")

    @property
    def relaxed(self) -> bool:
        return self.line_search == "quadratic"


@dataclass
class IterationReport:
    """Per-iteration history of one splitting run.

    energies[0] is the value at the initial iterate; entry i the value after
    outer iteration i.  energy_kind says which Lyapunov functional the
    sequence tracks ("primal" for minimization sweeps on the step energy,
    "dual" for the fixed-stress family).  states holds the primal iterate
    vectors x^0..x^N so error norms can be formed afterwards.
    """

    scheme_kind: str
    energy_kind: str = "primal"
    outcome: str = "converged"
    energies: list = field(default_factory=list)
    states: list = field(default_factory=list)
    increments_rel: list = field(default_factory=list)
    block_increments_l2: list = field(default_factory=list)
    block_increments_energy: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    inner_counts: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    diagnostic: str = ""

    @property
    def n_outer(self) -> int:
        return len(self.increments_rel)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def final_energy(self) -> float:
        return self.energies[-1]

    def energy_gaps(self, ref: float = None) -> np.ndarray:
        """Gaps of the recorded energies to ref (default: best energy seen)."""
        e = np.asarray(self.energies, dtype=float)
        if ref is None:
            ref = float(np.min(e)) if len(e) else 0.0
        return e - ref

    def gap_ratios(self, ref: float = None) -> np.ndarray:
        """Successive gap ratios; nonpositive gaps give NaN entries."""
        g = self.energy_gaps(ref)
        out = np.full(max(len(g) - 1, 0), np.nan)
        for i in range(len(out)):
            if g[i] > 0.0 and g[i + 1] >= 0.0:
                out[i] = g[i + 1] / g[i]
        return out


# ---------------------------------------------------------------------------
# shared machinery


def _initial_state(E: DiscreteEnergy, x0) -> np.ndarray:
    if x0 is None:
        x = E.zero_state()
    else:
        x = np.array(x0, dtype=float).reshape(-1)
        x = E.check_state(x).copy()
    x[~E.free_mask] = 0.0
    return x


def _free_norm(E: DiscreteEnergy, g: np.ndarray) -> float:
    return float(np.linalg.norm(g[E.free_mask]))


def _rel_increment(x_new: np.ndarray, dx: np.ndarray) -> float:
    nx = float(np.linalg.norm(x_new))
    nd = float(np.linalg.norm(dx))
    if nd == 0.0:
        return 0.0
    return nd / max(nx, 1e-300)


def _energy_increase_guard(e_prev: float, e_new: float, label: str) -> None:
    tol = 1e-12 * max(1.0, abs(e_prev), abs(e_new))
    if e_new > e_prev + tol:
        raise EnergyIncreaseError(
            f"{label}: descent functional increased from {e_prev!r} to {e_new!r}"
        )


def _diverged(increments: list) -> bool:
    if len(increments) < 2:
        return False
    last = increments[-1]
    if not np.isfinite(last):
        return True
    window = increments[-(_DIV_WINDOW + 1):]
    return last > _DIV_FACTOR * min(window)


def _block_l2(E: DiscreteEnergy, dx: np.ndarray) -> dict:
    return {name: float(np.linalg.norm(dx[E.block_slice(name)]))
            for name, _, _ in E.layout}


def _group_energy_cache(E: DiscreteEnergy, partition) -> list:
    """Precomputed (label, indices, block Hessian) triples so per-iteration
    block seminorms avoid repeated submatrix extraction."""
    if not E.is_quadratic:
        return []
    cache = []
    for names in partition:
        idx = E.group_indices(names)
        cache.append(("+".join(names), idx, E.H[np.ix_(idx, idx)].tocsr()))
    return cache


def _group_energy_increments(cache: list, dx: np.ndarray) -> dict:
    out = {}
    for label, idx, Hgg in cache:
        v = dx[idx]
        out[label] = float(np.sqrt(max(0.5 * float(v @ (Hgg @ v)), 0.0)))
    return out


class _FreeBlockSolver:
    """Exact minimizer over one dof subset of a quadratic energy."""

    def __init__(self, E: QuadraticStepEnergy, rows: np.ndarray):
        self.E = E
        self.rows = rows
        H = E.H[np.ix_(rows, rows)].tocsr()
        self.fact = SpdFactorization(CsrMatrix.from_scipy(H))

    def solve_into(self, x: np.ndarray) -> None:
        masked = x.copy()
        masked[self.rows] = 0.0
        rhs = self.E.b[self.rows] - (self.E.H @ masked)[self.rows]
        x[self.rows] = self.fact.solve(rhs)


def _group_rows(E: DiscreteEnergy, names) -> np.ndarray:
    idx = E.group_indices(names)
    return idx[E.free_mask[idx]]


def _validate_partition(E: DiscreteEnergy, partition) -> tuple:
    groups = tuple(tuple(g) for g in partition)
    known = [name for name, _, _ in E.layout]
    seen = [n for g in groups for n in g]
    if sorted(seen) != sorted(known):
        raise ValueError(
            f"partition {groups!r} does not cover the blocks {tuple(known)!r} exactly"
        )
    return groups


# ---------------------------------------------------------------------------
# line search


def line_search_relax(E, x_prev: np.ndarray, x_half: np.ndarray):
    """Quadratic-fit relaxation of the move from x_prev to x_half.

    Samples the energy at offsets {-1, 0, +1} about x_half along
    dx = x_half - x_prev, fits q(a) = a*alpha^2 + b*alpha + c and steps to
    its minimizer when the fit is convex; otherwise keeps x_half.  Returns
    (alpha, x_next) with E(x_next) <= E(x_half) always.
    """
    if isinstance(E, DiscreteEnergy):
        eval_fn = E.eval
        quadratic = E.is_quadratic
    else:
        eval_fn = E
        quadratic = False

    x_prev = np.asarray(x_prev, dtype=float)
    x_half = np.asarray(x_half, dtype=float)
    dx = x_half - x_prev
    if float(np.linalg.norm(dx)) == 0.0:
        return 0.0, x_half.copy()

    def safe_eval(x):
        try:
            v = float(eval_fn(x))
        except ValueError:
            return np.inf
        return v if np.isfinite(v) else np.inf

    e_minus = safe_eval(x_prev)
    e_zero = safe_eval(x_half)
    e_plus = safe_eval(x_half + dx)

    a = 0.5 * (e_plus + e_minus) - e_zero
    b = 0.5 * (e_plus - e_minus)
    scale = max(abs(e_minus), abs(e_zero), abs(e_plus), 1.0)
    if quadratic and np.isfinite(scale):
        if a < -1e-9 * scale and abs(b) > 1e-9 * scale:
            raise SolverError(
                "line search found concave curvature on a quadratic energy"
            )
    if a > 1e-300 and np.isfinite(a) and np.isfinite(b):
        alpha = -b / (2.0 * a)
    else:
        alpha = 0.0

    x_next = x_half + alpha * dx
    if alpha != 0.0:
        e_next = safe_eval(x_next)
        if not e_next <= e_zero + 1e-12 * scale:
            alpha = 0.0
            x_next = x_half.copy()
    return float(alpha), np.asarray(x_next, dtype=float)


# ---------------------------------------------------------------------------
# monolithic


def solve_monolithic(E: DiscreteEnergy, x0=None, tol: float = 1e-10) -> IterationReport:
    """Reference solve of the full step energy.

    Quadratic energies take one SPD solve on the free dofs; nonlinear ones
    run a damped Newton iteration.  Terminates when the free-dof gradient
    norm falls below tol times its initial value.
    """
    x = _initial_state(E, x0)
    report = IterationReport(scheme_kind="monolithic")
    report.states.append(x.copy())
    report.energies.append(float(E.eval(x)))

    g0 = _free_norm(E, E.grad(x))
    report.extras["grad_norms"] = [g0]
    if g0 == 0.0:
        report.outcome = "converged"
        return report

    free = np.flatnonzero(E.free_mask)
    if E.is_quadratic:
        ge_cache = _group_energy_cache(E, E.groups)
        solver = _FreeBlockSolver(E, free)
        x_new = x.copy()
        solver.solve_into(x_new)
        # iterative refinement with the same factors tightens the residual
        # when the blocks are badly scaled against each other
        g = _free_norm(E, E.grad(x_new))
        refinements = 0
        while g > tol * g0 and refinements < 3:
            r = (E.b - E.H @ x_new)[free]
            x_new[free] += solver.fact.solve(r)
            g = _free_norm(E, E.grad(x_new))
            refinements += 1
        dx = x_new - x
        report.states.append(x_new.copy())
        report.energies.append(float(E.eval(x_new)))
        report.increments_rel.append(_rel_increment(x_new, dx))
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append({"full": 1})
        report.extras["grad_norms"].append(g)
        if g > tol * g0:
            raise ConvergenceError(
                f"direct solve left gradient {g!r} above {tol!r} * {g0!r}",
                report=report,
            )
        report.outcome = "converged"
        return report

    max_newton = 50
    for it in range(1, max_newton + 1):
        g_full = E.grad(x)
        g = g_full[free]
        H = E.hessian(x).to_scipy()[np.ix_(free, free)].tocsr()
        step = SpdFactorization(CsrMatrix.from_scipy(H)).solve(-g)
        slope = float(g @ step)

        t = 1.0
        e_here = float(E.eval(x))
        x_new = None
        while t > 1e-12:
            cand = x.copy()
            cand[free] += t * step
            try:
                e_cand = float(E.eval(cand))
            except ValueError:
                t *= 0.5
                continue
            if e_cand <= e_here + 1e-4 * t * slope or e_cand <= e_here:
                x_new = cand
                break
            t *= 0.5
        if x_new is None:
            raise ConvergenceError("Newton backtracking failed to find descent",
                                   report=report)

        dx = x_new - x
        x = x_new
        report.states.append(x.copy())
        report.energies.append(float(E.eval(x)))
        report.increments_rel.append(_rel_increment(x, dx))
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append({})
        report.inner_counts.append({"full": 1})
        gn = _free_norm(E, E.grad(x))
        report.extras["grad_norms"].append(gn)
        if gn <= tol * g0:
            report.outcome = "converged"
            return report

    raise ConvergenceError(
        f"Newton did not reach tolerance {tol!r} in {max_newton} iterations",
        report=report,
    )


# ---------------------------------------------------------------------------
# alternating minimization (exact block sweeps)


def alternating_minimization(E: QuadraticStepEnergy, partition=None,
                             scheme: SplitScheme = None, x0=None,
                             kind_label: str = None) -> IterationReport:
    """Cyclic exact minimization over a block partition of a quadratic
    energy, with optional quadratic line-search relaxation of each sweep.

    The energy sequence is checked to be nonincreasing; an increase beyond
    roundoff raises EnergyIncreaseError since exact sweeps cannot ascend.
    """
    if not E.is_quadratic:
        raise TypeError("alternating_minimization needs a quadratic energy")
    groups = _validate_partition(E, partition if partition is not None else E.groups)
    tol_rel = scheme.tol_rel if scheme is not None else 1e-6
    max_outer = scheme.max_outer if scheme is not None else 200
    relax = scheme.relaxed if scheme is not None else False
    label = kind_label or (scheme.kind if scheme is not None else "am")

    x = _initial_state(E, x0)
    report = IterationReport(scheme_kind=label, energy_kind="primal")
    report.states.append(x.copy())
    report.energies.append(float(E.eval(x)))

    g_scale = max(float(np.linalg.norm(E.b[E.free_mask])), 1.0)
    solvers = [_FreeBlockSolver(E, _group_rows(E, names)) for names in groups]
    ge_cache = _group_energy_cache(E, groups)

    for _ in range(max_outer):
        x_prev = x.copy()
        x_half = x.copy()
        for solver in solvers:
            solver.solve_into(x_half)
        if relax:
            alpha, x = line_search_relax(E, x_prev, x_half)
            report.alphas.append(alpha)
        else:
            x = x_half

        dx = x - x_prev
        e_new = float(E.eval(x))
        _energy_increase_guard(report.energies[-1], e_new, label)
        report.states.append(x.copy())
        report.energies.append(e_new)
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append({"+".join(g): 1 for g in groups})

        if rel <= tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = "relative increment grew beyond the divergence window"
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# undrained split


def undrained_split_step(E: PoroEnergy, x0=None, scheme: SplitScheme = None,
                         path: str = "block") -> IterationReport:
    """Undrained split of the flow-mechanics step energy.

    path "block" runs alternating minimization over ((u,), (q,)); path
    "stabilized" executes the classical form, a mechanics solve stabilized
    by M*alpha^2 grad-div with the pressure lagged, followed by the exact
    flow solve.  The two produce identical iterates.
    """
    if not isinstance(E, PoroEnergy):
        raise TypeError("undrained split expects the poroelastic step energy")
    if scheme is None:
        scheme = SplitScheme(kind="undrained")
    if path == "block":
        return alternating_minimization(E, (("u",), ("q",)), scheme, x0,
                                        kind_label=scheme.kind)
    if path != "stabilized":
        raise ValueError(f"unknown undrained path {path!r}")

    mesh = E.mesh
    alpha, M, dt = E.alpha, E.M, E.dt
    inv_vol = sp.diags(1.0 / E.vol)
    stab = M * alpha * alpha * (E.B.T @ inv_vol @ E.B)
    A_stab = (E.A + stab).tocsr()
    F_flow = (E.Mrt + M * dt * (E.D.T @ inv_vol @ E.D)).tocsr()

    su = E.block_slice("u")
    sq = E.block_slice("q")
    rows_u = _group_rows(E, ("u",))
    rows_q = _group_rows(E, ("q",)) - su.stop
    fact_u = SpdFactorization(CsrMatrix.from_scipy(A_stab[np.ix_(rows_u, rows_u)].tocsr()))
    fact_q = SpdFactorization(CsrMatrix.from_scipy(F_flow[np.ix_(rows_q, rows_q)].tocsr()))

    x = _initial_state(E, x0)
    report = IterationReport(scheme_kind=scheme.kind, energy_kind="primal")
    report.states.append(x.copy())
    report.energies.append(float(E.eval(x)))
    g_scale = max(float(np.linalg.norm(E.b[E.free_mask])), 1.0)
    ge_cache = _group_energy_cache(E, (("u",), ("q",)))

    for _ in range(scheme.max_outer):
        x_prev = x.copy()
        u = x[su].copy()
        q = x[sq].copy()

        p_lag = M * (E.theta_eff - alpha * (E.B @ u) / E.vol - dt * (E.D @ q) / E.vol)
        rhs_u = E.f_u + alpha * (E.B.T @ p_lag) + stab @ u
        u[rows_u] = fact_u.solve(rhs_u[rows_u])

        rhs_q = E.f_q + M * (E.D.T @ (E.theta_eff - alpha * (E.B @ u) / E.vol))
        q_new = np.zeros_like(q)
        q_new[rows_q] = fact_q.solve(rhs_q[rows_q])

        x_half = x.copy()
        x_half[su] = u
        x_half[sq] = q_new
        if scheme.relaxed:
            alpha_ls, x = line_search_relax(E, x_prev, x_half)
            report.alphas.append(alpha_ls)
        else:
            x = x_half

        dx = x - x_prev
        e_new = float(E.eval(x))
        _energy_increase_guard(report.energies[-1], e_new, scheme.kind)
        report.states.append(x.copy())
        report.energies.append(e_new)
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append({"u": 1, "q": 1})

        if rel <= scheme.tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = "relative increment grew beyond the divergence window"
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# fixed-stress split


def _poro_dual_energy(E: PoroEnergy, u, q, p) -> float:
    mech = 0.5 * float(u @ (E.A @ u))
    press = 0.5 / E.M * float(p @ (E.vol * p))
    flow = 0.5 * E.dt * float(q @ (E.Mrt @ q))
    load = float((E.vol * E.theta_eff) @ p)
    return mech + press + flow - load


def fixed_stress_split_step(E: PoroEnergy, x0=None, scheme: SplitScheme = None,
                            route: str = "eliminated") -> IterationReport:
    """Fixed-stress split: a pressure solve stabilized by gamma*alpha^2/K_dr
    with the volumetric strain lagged, then the drained mechanics solve.

    route "eliminated" condenses the pressure cellwise into an SPD flux
    system; route "saddle" factors the symmetric indefinite mixed system
    once instead.  Both produce identical iterates.  The recorded energy is
    the complementary functional in (u, q, p), which these sweeps descend;
    the primal step energies are kept alongside in extras.
    """
    if not isinstance(E, PoroEnergy):
        raise TypeError("fixed-stress split expects the poroelastic step energy")
    if scheme is None:
        scheme = SplitScheme(kind="fixed_stress")
    if route not in ("eliminated", "saddle"):
        raise ValueError(f"unknown fixed-stress route {route!r}")

    mesh = E.mesh
    alpha, M, dt = E.alpha, E.M, E.dt
    k_dr = E.params.k_dr(mesh.dim)
    beta = scheme.gamma * alpha * alpha / k_dr
    m_tilde = 1.0 / (1.0 / M + beta)
    inv_vol = sp.diags(1.0 / E.vol)

    su = E.block_slice("u")
    sq = E.block_slice("q")
    rows_u = _group_rows(E, ("u",))
    rows_q_local = _group_rows(E, ("q",)) - su.stop
    nq = sq.stop - sq.start
    nc = mesh.n_cells

    fact_mech = SpdFactorization(
        CsrMatrix.from_scipy(E.A[np.ix_(rows_u, rows_u)].tocsr()))

    if route == "eliminated":
        F_flow = (E.Mrt + dt * m_tilde * (E.D.T @ inv_vol @ E.D)).tocsr()
        fact_q = SpdFactorization(
            CsrMatrix.from_scipy(F_flow[np.ix_(rows_q_local, rows_q_local)].tocsr()))
        saddle_lu = None
    else:
        # symmetric indefinite form in (q, p); fixed flux dofs are pinned by
        # an identity row to keep one factorization for the whole run
        Wc = sp.diags(E.vol)
        K = sp.bmat(
            [[E.Mrt, -E.D.T], [-E.D, -(1.0 / dt) * (1.0 / M + beta) * Wc]],
            format="csc",
        )
        fixed_q = np.setdiff1d(np.arange(nq), rows_q_local)
        if len(fixed_q):
            K = K.tolil()
            for i in fixed_q:
                K[i, :] = 0.0
                K[:, i] = 0.0
                K[i, i] = 1.0
            K = K.tocsc()
        saddle_lu = spla.splu(K)

    x = _initial_state(E, x0)
    p = E.pressure(x)

    # equilibrated start: a drained mechanics solve at the initial pressure
    # puts the first iterate on the feasible set of the complementary
    # functional, so its decrease holds from the very first sweep
    rhs_u0 = E.f_u + alpha * (E.B.T @ p)
    u0 = np.zeros(su.stop - su.start)
    u0[rows_u] = fact_mech.solve(rhs_u0[rows_u])
    x[su] = u0

    # the flux entering the recorded initial value is the constrained
    # minimizer at the initial pressure (one mass-matrix solve)
    fact_darcy = SpdFactorization(
        CsrMatrix.from_scipy(E.Mrt[np.ix_(rows_q_local, rows_q_local)].tocsr()))
    rhs_q0 = E.f_q + E.D.T @ p
    q0 = np.zeros(nq)
    q0[rows_q_local] = fact_darcy.solve(rhs_q0[rows_q_local])
    x[sq] = q0

    report = IterationReport(scheme_kind=scheme.kind, energy_kind="dual")
    report.states.append(x.copy())
    report.energies.append(_poro_dual_energy(E, x[su], x[sq], p))
    report.extras["pressures"] = [p.copy()]
    report.extras["primal_energies"] = [float(E.eval(x))]
    g_scale = max(float(np.linalg.norm(E.b[E.free_mask])), 1.0)
    ge_cache = _group_energy_cache(E, (("u",), ("q",)))

    for _ in range(scheme.max_outer):
        x_prev = x.copy()
        p_prev = p.copy()
        u = x[su]
        q = x[sq]

        theta_tilde = (E.theta_eff - alpha * (E.B @ u) / E.vol + beta * p_prev)
        if route == "eliminated":
            rhs_q = E.f_q + E.D.T @ (m_tilde * theta_tilde)
            q_new = np.zeros(nq)
            q_new[rows_q_local] = fact_q.solve(rhs_q[rows_q_local])
            p_half = m_tilde * (theta_tilde - dt * (E.D @ q_new) / E.vol)
        else:
            rhs = np.concatenate([E.f_q, -(1.0 / dt) * (E.vol * theta_tilde)])
            fixed_q = np.setdiff1d(np.arange(nq), rows_q_local)
            rhs[fixed_q] = 0.0
            sol = saddle_lu.solve(rhs)
            q_new = sol[:nq]
            p_half = sol[nq:]

        rhs_u = E.f_u + alpha * (E.B.T @ p_half)
        u_new = np.zeros_like(u)
        u_new[rows_u] = fact_mech.solve(rhs_u[rows_u])

        x_half = x.copy()
        x_half[su] = u_new
        x_half[sq] = q_new

        if scheme.relaxed:
            z_prev = np.concatenate([x_prev, p_prev])
            z_half = np.concatenate([x_half, p_half])

            def dual_of(z):
                return _poro_dual_energy(E, z[su], z[sq.start:sq.stop], z[len(x_prev):])

            alpha_ls, z = line_search_relax(dual_of, z_prev, z_half)
            report.alphas.append(alpha_ls)
            x = z[: len(x_prev)]
            p = z[len(x_prev):]
        else:
            x = x_half
            p = p_half

        dx = x - x_prev
        e_new = _poro_dual_energy(E, x[su], x[sq], p)
        if scheme.gamma == 1.0:
            _energy_increase_guard(report.energies[-1], e_new, scheme.kind)
        report.states.append(x.copy())
        report.energies.append(e_new)
        report.extras["pressures"].append(p.copy())
        report.extras["primal_energies"].append(float(E.eval(x)))
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append({"q": 1, "u": 1})

        if rel <= scheme.tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = (
                f"relative increment grew beyond the divergence window at gamma={scheme.gamma}"
            )
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# visco-elastic splits


def _visco_matrices(E: ViscoEnergy):
    d = E.mesh.dim
    Q_C = elastic_metric(E.params.mu, E.params.lam, d)
    Q_Cv = elastic_metric(E.visco.mu_v, E.visco.lam_v, d)
    Q_Cvp = elastic_metric(E.visco.mu_v_prime, E.visco.lambda_v_prime, d)
    Wv = sp.diags(E.vol)
    Sig_C = sp.kron(Wv, Q_C, format="csr")
    Sig_Cv = sp.kron(Wv, Q_Cv, format="csr")
    Sig_Cvp = sp.kron(Wv, Q_Cvp, format="csr")
    return Sig_C, Sig_Cv, Sig_Cvp


def _visco_dual_energy(E: ViscoEnergy, mats, u, ev, q, p) -> float:
    Sig_C, Sig_Cv, Sig_Cvp = mats
    e_el = E.Su @ u - ev
    mech = 0.5 * float(e_el @ (Sig_C @ e_el)) + 0.5 * float(ev @ (Sig_Cv @ ev))
    dev = ev - E.ev_prev
    mech += 0.5 / E.dt * float(dev @ (Sig_Cvp @ dev))
    press = 0.5 / E.M * float(p @ (E.vol * p))
    flow = 0.5 * E.dt * float(q @ (E.Mrt @ q))
    drive = float((E.vol * E.theta_eff) @ p)
    return mech + press + flow - drive


def visco_split_step(E: ViscoEnergy, x0=None, scheme: SplitScheme = None) -> IterationReport:
    """Splitting schemes for the visco-elastic step energy.

    visco_undrained: alternating minimization with the joint (u, ev)
    mechanics block.  visco_fixed_stress: pressure solve stabilized by the
    combined modulus gamma*(alpha^2/K_dr + alpha_v^2/(K_dr,v + K_dr,v'/dt))
    with total volumetric response lagged, then the joint mechanics solve
    with the pressure frozen.
    """
    if not isinstance(E, ViscoEnergy):
        raise TypeError("visco split expects the visco-elastic step energy")
    if scheme is None:
        scheme = SplitScheme(kind="visco_undrained")
    if scheme.kind == "visco_undrained":
        return alternating_minimization(E, (("u", "ev"), ("q",)), scheme, x0,
                                        kind_label=scheme.kind)
    if scheme.kind != "visco_fixed_stress":
        raise ValueError(f"scheme kind {scheme.kind!r} is not a visco split")

    mesh = E.mesh
    d = mesh.dim
    alpha, alpha_v, M, dt = E.alpha, E.alpha_v, E.M, E.dt
    k_dr = E.params.k_dr(d)
    k_dr_v = E.visco.k_dr_v(d)
    k_dr_vp = E.visco.k_dr_v_prime(d)
    a_sq = alpha * alpha / k_dr + alpha_v * alpha_v / (k_dr_v + k_dr_vp / dt)
    beta = scheme.gamma * a_sq
    m_tilde = 1.0 / (1.0 / M + beta)
    inv_vol = sp.diags(1.0 / E.vol)

    su = E.block_slice("u")
    sev = E.block_slice("ev")
    sq = E.block_slice("q")
    nq = sq.stop - sq.start

    Sig_C, Sig_Cv, Sig_Cvp = mats = _visco_matrices(E)
    A_uu = (E.Su.T @ Sig_C @ E.Su).tocsr()
    C_uev = (-(E.Su.T @ Sig_C)).tocsr()
    C_evev = (Sig_C + Sig_Cv + Sig_Cvp / dt).tocsr()
    H_mech = sp.bmat([[A_uu, C_uev], [C_uev.T, C_evev]], format="csr")
    mech_rows = np.flatnonzero(
        np.concatenate([E.free_mask[su], np.ones(sev.stop - sev.start, dtype=bool)]))
    fact_mech = SpdFactorization(
        CsrMatrix.from_scipy(H_mech[np.ix_(mech_rows, mech_rows)].tocsr()))

    rows_q_local = _group_rows(E, ("q",)) - sq.start
    F_flow = (E.Mrt + dt * m_tilde * (E.D.T @ inv_vol @ E.D)).tocsr()
    fact_q = SpdFactorization(
        CsrMatrix.from_scipy(F_flow[np.ix_(rows_q_local, rows_q_local)].tocsr()))

    x = _initial_state(E, x0)
    p = E.pressure(x)

    # equilibrated start at the initial pressure, see the poroelastic split
    rhs_mech0 = np.concatenate([
        E.f_u + alpha * (E.B.T @ p),
        (Sig_Cvp @ E.ev_prev) / dt + (alpha_v - alpha) * (E.T_ev.T @ (E.vol * p)),
    ])
    z0 = np.zeros(H_mech.shape[0])
    z0[mech_rows] = fact_mech.solve(rhs_mech0[mech_rows])
    x[su] = z0[: su.stop]
    x[sev] = z0[su.stop:]
    fact_darcy = SpdFactorization(
        CsrMatrix.from_scipy(E.Mrt[np.ix_(rows_q_local, rows_q_local)].tocsr()))
    rhs_q0 = E.f_q + E.D.T @ p
    q0 = np.zeros(nq)
    q0[rows_q_local] = fact_darcy.solve(rhs_q0[rows_q_local])
    x[sq] = q0

    report = IterationReport(scheme_kind=scheme.kind, energy_kind="dual")
    report.states.append(x.copy())
    report.energies.append(_visco_dual_energy(E, mats, x[su], x[sev], x[sq], p))
    report.extras["pressures"] = [p.copy()]
    report.extras["primal_energies"] = [float(E.eval(x))]
    g_scale = max(float(np.linalg.norm(E.b[E.free_mask])), 1.0)
    ge_cache = _group_energy_cache(E, (("u", "ev"), ("q",)))

    for _ in range(scheme.max_outer):
        x_prev = x.copy()
        p_prev = p.copy()
        u = x[su]
        ev = x[sev]

        vol_content = (alpha * (E.B @ u) / E.vol
                       + (alpha_v - alpha) * (E.T_ev @ ev))
        theta_tilde = E.theta_eff - vol_content + beta * p_prev
        rhs_q = E.f_q + E.D.T @ (m_tilde * theta_tilde)
        q_new = np.zeros(nq)
        q_new[rows_q_local] = fact_q.solve(rhs_q[rows_q_local])
        p_half = m_tilde * (theta_tilde - dt * (E.D @ q_new) / E.vol)

        rhs_mech = np.concatenate([
            E.f_u + alpha * (E.B.T @ p_half),
            (Sig_Cvp @ E.ev_prev) / dt + (alpha_v - alpha) * (E.T_ev.T @ (E.vol * p_half)),
        ])
        z = np.zeros(H_mech.shape[0])
        z[mech_rows] = fact_mech.solve(rhs_mech[mech_rows])

        x_half = x.copy()
        x_half[su] = z[: su.stop]
        x_half[sev] = z[su.stop:]
        x_half[sq] = q_new

        if scheme.relaxed:
            z_prev = np.concatenate([x_prev, p_prev])
            z_half = np.concatenate([x_half, p_half])

            def dual_of(w):
                return _visco_dual_energy(E, mats, w[su], w[sev],
                                          w[sq.start:sq.stop], w[len(x_prev):])

            alpha_ls, w = line_search_relax(dual_of, z_prev, z_half)
            report.alphas.append(alpha_ls)
            x = w[: len(x_prev)]
            p = w[len(x_prev):]
        else:
            x = x_half
            p = p_half

        dx = x - x_prev
        e_new = _visco_dual_energy(E, mats, x[su], x[sev], x[sq], p)
        if scheme.gamma == 1.0:
            _energy_increase_guard(report.energies[-1], e_new, scheme.kind)
        report.states.append(x.copy())
        report.energies.append(e_new)
        report.extras["pressures"].append(p.copy())
        report.extras["primal_energies"].append(float(E.eval(x)))
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append({"q": 1, "u+ev": 1})

        if rel <= scheme.tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = (
                f"relative increment grew beyond the divergence window at gamma={scheme.gamma}"
            )
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# thermal splits


def _thermo_dual_energy(E: ThermoEnergy, MT_inv, u, q, j, pT) -> float:
    mech = 0.5 * float(u @ (E.A @ u))
    quad = 0.5 * float(np.einsum("kc,cd,kd->", pT, MT_inv, pT * E.vol[:, None]))
    flow = 0.5 * E.dt * float(q @ (E.Mrt @ q))
    heat = 0.5 * E.dt * float(j @ (E.Mrt_j @ j))
    load = float((E.vol * E.theta_eff) @ pT[:, 0]) + float((E.vol * E.entropy_eff) @ pT[:, 1])
    return mech + quad + flow + heat - load


def thermo_split_step(E: ThermoEnergy, x0=None, scheme: SplitScheme = None) -> IterationReport:
    """Splitting schemes for the thermo-poro-elastic step energy.

    thermo_undrained_adiabatic: alternating minimization with groups
    ((u,), (q, j)); the mechanics block carries the full 2x2 content
    stabilization by construction.  thermo_extended_fixed_stress: joint
    (p, T) elimination stabilized by the rank-one tensor gamma*a a^T/K_dr,
    a coupled SPD solve for both fluxes, then drained mechanics.
    thermo_three_block: pressure, temperature and mechanics in sequence,
    each with its scalar stabilization and the newest lagged neighbors.
    """
    if not isinstance(E, ThermoEnergy):
        raise TypeError("thermo split expects the thermo-poro-elastic step energy")
    if scheme is None:
        scheme = SplitScheme(kind="thermo_undrained_adiabatic")
    if scheme.kind == "thermo_undrained_adiabatic":
        return alternating_minimization(E, (("u",), ("q", "j")), scheme, x0,
                                        kind_label=scheme.kind)
    if scheme.kind not in ("thermo_extended_fixed_stress", "thermo_three_block"):
        raise ValueError(f"scheme kind {scheme.kind!r} is not a thermo split")

    mesh = E.mesh
    alpha, M, dt, k_dr = E.alpha, E.M, E.dt, E.k_dr
    a_vec = E.a_vec
    MT_inv = E.thermo.coupling_matrix_inv(M)
    inv_vol = sp.diags(1.0 / E.vol)
    DtWD = (E.D.T @ inv_vol @ E.D).tocsr()

    su = E.block_slice("u")
    sq = E.block_slice("q")
    sj = E.block_slice("j")
    nq = sq.stop - sq.start
    nj = sj.stop - sj.start
    rows_u = _group_rows(E, ("u",))
    rows_q_local = _group_rows(E, ("q",)) - sq.start
    rows_j_local = _group_rows(E, ("j",)) - sj.start

    fact_mech = SpdFactorization(
        CsrMatrix.from_scipy(E.A[np.ix_(rows_u, rows_u)].tocsr()))

    c_hat = np.stack([E.theta_eff, E.entropy_eff], axis=1)

    x = _initial_state(E, x0)
    pT = E.pressure_temperature(x)

    # equilibrated start at the initial pressure and temperature, see the
    # poroelastic split
    rhs_u0 = E.f_u + E.B.T @ (pT @ a_vec)
    u0 = np.zeros(su.stop - su.start)
    u0[rows_u] = fact_mech.solve(rhs_u0[rows_u])
    x[su] = u0
    fact_darcy_q = SpdFactorization(
        CsrMatrix.from_scipy(E.Mrt[np.ix_(rows_q_local, rows_q_local)].tocsr()))
    fact_darcy_j = SpdFactorization(
        CsrMatrix.from_scipy(E.Mrt_j[np.ix_(rows_j_local, rows_j_local)].tocsr()))
    q0 = np.zeros(nq)
    q0[rows_q_local] = fact_darcy_q.solve((E.f_q + E.D.T @ pT[:, 0])[rows_q_local])
    x[sq] = q0
    j0 = np.zeros(nj)
    j0[rows_j_local] = fact_darcy_j.solve((E.f_j + E.D.T @ pT[:, 1])[rows_j_local])
    x[sj] = j0

    report = IterationReport(scheme_kind=scheme.kind, energy_kind="dual")
    report.states.append(x.copy())
    report.energies.append(_thermo_dual_energy(E, MT_inv, x[su], x[sq], x[sj], pT))
    report.extras["pressures"] = [pT[:, 0].copy()]
    report.extras["temperatures"] = [pT[:, 1].copy()]
    report.extras["primal_energies"] = [float(E.eval(x))]
    g_scale = max(float(np.linalg.norm(E.b[E.free_mask])), 1.0)
    ge_cache = _group_energy_cache(E, (("u",), ("q",), ("j",)))

    if scheme.kind == "thermo_extended_fixed_stress":
        S = scheme.gamma * np.outer(a_vec, a_vec) / k_dr
        MT_mod = np.linalg.inv(MT_inv + S)
        m11, m12, m22 = MT_mod[0, 0], MT_mod[0, 1], MT_mod[1, 1]
        K_flux = sp.bmat(
            [
                [E.Mrt + dt * m11 * DtWD, dt * m12 * DtWD],
                [dt * m12 * DtWD, E.Mrt_j + dt * m22 * DtWD],
            ],
            format="csr",
        )
        rows_flux = np.concatenate([rows_q_local, nq + rows_j_local])
        fact_flux = SpdFactorization(
            CsrMatrix.from_scipy(K_flux[np.ix_(rows_flux, rows_flux)].tocsr()))
    else:
        beta_p = scheme.gamma * alpha * alpha / k_dr
        m_p = 1.0 / (MT_inv[0, 0] + beta_p)
        beta_T = scheme.gamma * a_vec[1] * a_vec[1] / k_dr
        m_T = 1.0 / (MT_inv[1, 1] + beta_T)
        c_phi = -MT_inv[0, 1]  # 3*alpha_phi coupling between the content rows
        F_p = (E.Mrt + dt * m_p * DtWD).tocsr()
        F_T = (E.Mrt_j + dt * m_T * DtWD).tocsr()
        fact_p = SpdFactorization(
            CsrMatrix.from_scipy(F_p[np.ix_(rows_q_local, rows_q_local)].tocsr()))
        fact_T = SpdFactorization(
            CsrMatrix.from_scipy(F_T[np.ix_(rows_j_local, rows_j_local)].tocsr()))

    for _ in range(scheme.max_outer):
        x_prev = x.copy()
        pT_prev = pT.copy()
        u = x[su]
        divu = (E.B @ u) / E.vol

        if scheme.kind == "thermo_extended_fixed_stress":
            c_tilde = c_hat - np.outer(divu, a_vec) + pT_prev @ S.T
            rhs = np.concatenate([
                E.f_q + E.D.T @ (m11 * c_tilde[:, 0] + m12 * c_tilde[:, 1]),
                E.f_j + E.D.T @ (m12 * c_tilde[:, 0] + m22 * c_tilde[:, 1]),
            ])
            y = np.zeros(nq + nj)
            y[rows_flux] = fact_flux.solve(rhs[rows_flux])
            q_new = y[:nq]
            j_new = y[nq:]
            divs = np.stack([(E.D @ q_new) / E.vol, (E.D @ j_new) / E.vol], axis=1)
            pT_half = (c_tilde - dt * divs) @ MT_mod.T
            inner_tag = {"q+j": 1, "u": 1}
        else:
            # pressure block with the temperature lagged
            c_p = (c_hat[:, 0] + c_phi * pT_prev[:, 1] + beta_p * pT_prev[:, 0]
                   - alpha * divu)
            rhs_q = E.f_q + E.D.T @ (m_p * c_p)
            q_new = np.zeros(nq)
            q_new[rows_q_local] = fact_p.solve(rhs_q[rows_q_local])
            p_new = m_p * (c_p - dt * (E.D @ q_new) / E.vol)

            # temperature block with the fixed-stress strain update of the
            # pressure step folded into the lagged volumetric term
            tr_half = divu + (alpha / k_dr) * (p_new - pT_prev[:, 0])
            c_T = (c_hat[:, 1] + c_phi * p_new + beta_T * pT_prev[:, 1]
                   - a_vec[1] * tr_half)
            rhs_j = E.f_j + E.D.T @ (m_T * c_T)
            j_new = np.zeros(nj)
            j_new[rows_j_local] = fact_T.solve(rhs_j[rows_j_local])
            T_new = m_T * (c_T - dt * (E.D @ j_new) / E.vol)
            pT_half = np.stack([p_new, T_new], axis=1)
            inner_tag = {"q": 1, "j": 1, "u": 1}

        rhs_u = E.f_u + E.B.T @ (pT_half @ a_vec)
        u_new = np.zeros_like(u)
        u_new[rows_u] = fact_mech.solve(rhs_u[rows_u])

        x_half = x.copy()
        x_half[su] = u_new
        x_half[sq] = q_new
        x_half[sj] = j_new

        if scheme.relaxed:
            n_state = len(x_prev)
            z_prev = np.concatenate([x_prev, pT_prev.ravel()])
            z_half = np.concatenate([x_half, pT_half.ravel()])

            def dual_of(w):
                return _thermo_dual_energy(E, MT_inv, w[su], w[sq.start:sq.stop],
                                           w[sj.start:sj.stop],
                                           w[n_state:].reshape(-1, 2))

            alpha_ls, w = line_search_relax(dual_of, z_prev, z_half)
            report.alphas.append(alpha_ls)
            x = w[:n_state]
            pT = w[n_state:].reshape(-1, 2)
        else:
            x = x_half
            pT = pT_half

        dx = x - x_prev
        e_new = _thermo_dual_energy(E, MT_inv, x[su], x[sq], x[sj], pT)
        if scheme.gamma == 1.0:
            _energy_increase_guard(report.energies[-1], e_new, scheme.kind)
        report.states.append(x.copy())
        report.energies.append(e_new)
        report.extras["pressures"].append(pT[:, 0].copy())
        report.extras["temperatures"].append(pT[:, 1].copy())
        report.extras["primal_energies"].append(float(E.eval(x)))
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append(_group_energy_increments(ge_cache, dx))
        report.inner_counts.append(dict(inner_tag))

        if rel <= scheme.tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = (
                f"relative increment grew beyond the divergence window at gamma={scheme.gamma}"
            )
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# nonlinear fixed-stress split


def _nl_mech_residual(E: NonlinearEnergy, u, p) -> np.ndarray:
    sig = E.cell_stress(u) * E.w[None, :] * E.vol[:, None]
    return E.Su.T @ sig.ravel() - E.alpha * (E.B.T @ p) - E.f_u


def _nl_flow_residual(E: NonlinearEnergy, divu, q, p) -> np.ndarray:
    bp = np.asarray(E.law.b.b(p))
    return bp + E.alpha * divu + E.dt * (E.D @ q) / E.vol - E.theta_eff


def _nl_mech_presolve(E: NonlinearEnergy, u0, p, rows_u, tol=1e-10, max_it=50):
    """Equilibrate the displacement at the initial pressure.

    Starting the outer loop from a mechanically balanced state keeps the
    recorded step energies on a descending path, so the rising-energy
    divergence check cannot misfire on the transient of an unbalanced
    start.  Damped Newton; the step is halved until the objective stops
    increasing, which also handles the kink of |div u|-type moduli.
    """
    su = E.block_slice("u")
    load_u = E.alpha * (E.B.T @ p) + E.f_u

    def objective(w):
        return float(E.vol @ E.cell_energy_density(w)) - float(load_u @ w)

    u = u0.copy()
    r0 = None
    for _ in range(max_it):
        R = _nl_mech_residual(E, u, p)
        r_norm = float(np.linalg.norm(R[E.free_mask[su]]))
        if r0 is None:
            r0 = r_norm
        if r_norm <= tol * max(r0, 1e-300):
            break
        J = (E.Su.T @ E._mech_metric(u) @ E.Su).tocsr()
        fact = SpdFactorization(
            CsrMatrix.from_scipy(J[np.ix_(rows_u, rows_u)].tocsr()))
        delta = fact.solve(-R[rows_u])
        slope = float(R[rows_u] @ delta)
        g_here = objective(u)
        t = 1.0
        for _ in range(30):
            u_try = u.copy()
            u_try[rows_u] = u[rows_u] + t * delta
            try:
                if objective(u_try) <= g_here + 1e-4 * t * slope:
                    break
            except ValueError:
                pass
            t *= 0.5
        else:
            break
        u = u_try
    return u


def nonlinear_fixed_stress_step(E: NonlinearEnergy, x0=None,
                                scheme: SplitScheme = None) -> IterationReport:
    """Fixed-stress splitting of the nonlinear step energy.

    The outer loop alternates an inexact flow solve (nonlinear pressure-
    content relation, volumetric strain lagged and stabilized by
    gamma*alpha^2/K_dr at the current strain) with an inexact mechanics
    solve at frozen pressure.  The inner solves follow scheme.inner: Newton
    reassembles cellwise slopes, the L-scheme keeps its constant surrogate
    moduli and factors each block once.  Persistent growth of the step
    energy over five outer iterations reports divergence instead of
    raising, since poorly chosen L constants are a user input.
    """
    if not isinstance(E, NonlinearEnergy):
        raise TypeError("nonlinear fixed-stress expects the nonlinear step energy")
    if scheme is None:
        scheme = SplitScheme(kind="nl_fixed_stress_newton", inner=InnerPolicy.newton())
    policy = scheme.inner
    mesh = E.mesh
    d = E.dim
    alpha, dt = E.alpha, E.dt
    inv_vol = sp.diags(1.0 / E.vol)

    su = E.block_slice("u")
    sq = E.block_slice("q")
    nq = sq.stop - sq.start
    rows_u = _group_rows(E, ("u",))
    rows_q_local = _group_rows(E, ("q",)) - sq.start

    x = _initial_state(E, x0)
    p = E.pressure(x)
    x[su] = _nl_mech_presolve(E, x[su], p, rows_u)
    report = IterationReport(scheme_kind=scheme.kind, energy_kind="primal")
    report.states.append(x.copy())
    report.energies.append(float(E.eval(x)))
    report.extras["pressures"] = [p.copy()]
    g0 = _free_norm(E, E.grad(E.zero_state()))
    g_scale = max(g0, 1.0)

    if policy.kind == "lscheme":
        w_flow = 1.0 / (policy.L_b + policy.L_FS)
        F_L = (E.Mrt + dt * w_flow * (E.D.T @ inv_vol @ E.D)).tocsr()
        fact_flow_L = SpdFactorization(
            CsrMatrix.from_scipy(F_L[np.ix_(rows_q_local, rows_q_local)].tocsr()))
        Q_L = elastic_metric(policy.L_mu, policy.L_lam, d)
        J_L = (E.Su.T @ sp.kron(sp.diags(E.vol), Q_L, format="csr") @ E.Su).tocsr()
        fact_mech_L = SpdFactorization(
            CsrMatrix.from_scipy(J_L[np.ix_(rows_u, rows_u)].tocsr()))

    rising = 0
    for _ in range(scheme.max_outer):
        x_prev = x.copy()
        p_prev = p.copy()
        u_lag = x_prev[su]
        divu_lag = (E.B @ u_lag) / E.vol

        # fixed-stress stabilization at the lagged strain
        tr = E.strains(u_lag)[:, :d].sum(axis=1)
        k_dr_cells = np.asarray(E.law.w.k_dr_of_strain(tr, d))
        beta = scheme.gamma * alpha * alpha / k_dr_cells

        # inexact flow solve
        q = x_prev[sq].copy()
        pj = p_prev.copy()
        r0 = _nl_flow_residual(E, divu_lag, q, pj)
        r0_norm = float(np.sqrt(np.sum(E.vol * r0 * r0)))
        n_flow = 0
        while True:
            if policy.kind == "newton":
                slope = np.asarray(E.law.b.b_prime(pj))
                if np.any(slope <= 0.0):
                    raise NotSpdError("compressibility slope vanished in the flow block")
                m_cells = 1.0 / (slope + beta)
                F = (E.Mrt + dt * (E.D.T @ sp.diags(m_cells / E.vol) @ E.D)).tocsr()
                fact = SpdFactorization(
                    CsrMatrix.from_scipy(F[np.ix_(rows_q_local, rows_q_local)].tocsr()))
                c_tilde = ((slope + beta) * pj + E.theta_eff
                           - np.asarray(E.law.b.b(pj)) - alpha * divu_lag)
            else:
                m_cells = np.full(mesh.n_cells, w_flow)
                fact = fact_flow_L
                c_tilde = ((policy.L_b + policy.L_FS) * pj + E.theta_eff
                           - np.asarray(E.law.b.b(pj)) - alpha * divu_lag)
            rhs_q = E.f_q + E.D.T @ (m_cells * c_tilde)
            q = np.zeros(nq)
            q[rows_q_local] = fact.solve(rhs_q[rows_q_local])
            pj = m_cells * (c_tilde - dt * (E.D @ q) / E.vol)
            n_flow += 1
            r = _nl_flow_residual(E, divu_lag, q, pj)
            r_norm = float(np.sqrt(np.sum(E.vol * r * r)))
            if r_norm <= policy.inner_tol * max(r0_norm, 1e-300):
                break
            if n_flow >= policy.max_inner:
                break
        p_half = pj

        # inexact mechanics solve at frozen pressure
        u = u_lag.copy()
        R0 = _nl_mech_residual(E, u, p_half)
        R0_norm = float(np.linalg.norm(R0[E.free_mask[su]]))
        n_mech = 0
        load_u = alpha * (E.B.T @ p_half) + E.f_u

        def mech_objective(w):
            return float(E.vol @ E.cell_energy_density(w)) - float(load_u @ w)

        while True:
            R = _nl_mech_residual(E, u, p_half) if n_mech else R0
            if policy.kind == "newton":
                J = (E.Su.T @ E._mech_metric(u) @ E.Su).tocsr()
                fact = SpdFactorization(
                    CsrMatrix.from_scipy(J[np.ix_(rows_u, rows_u)].tocsr()))
            else:
                fact = fact_mech_L
            delta = fact.solve(-R[rows_u])
            # backtrack on the mechanical objective: a full step across the
            # kink of |div u|-type moduli can cycle without ever reducing R
            slope = float(R[rows_u] @ delta)
            g_here = mech_objective(u)
            t = 1.0
            stalled = False
            for _ in range(30):
                u_new = u.copy()
                u_new[rows_u] = u[rows_u] + t * delta
                try:
                    if mech_objective(u_new) <= g_here + 1e-4 * t * slope:
                        break
                except ValueError:
                    pass
                t *= 0.5
            else:
                u_new = u
                stalled = True
            if policy.line_search and not stalled:
                _, u_new = line_search_relax(mech_objective, u, u_new)
            u = u_new
            if stalled:
                n_mech += 1
                break
            n_mech += 1
            R = _nl_mech_residual(E, u, p_half)
            R_norm = float(np.linalg.norm(R[E.free_mask[su]]))
            if R_norm <= policy.inner_tol * max(R0_norm, 1e-300):
                break
            if n_mech >= policy.max_inner:
                break

        x_half = x_prev.copy()
        x_half[su] = u
        x_half[sq] = q

        if scheme.relaxed:
            z_prev = np.concatenate([x_prev, p_prev])
            z_half = np.concatenate([x_half, p_half])

            def primal_of(w):
                return float(E.eval(w[: len(x_prev)]))

            alpha_ls, w = line_search_relax(primal_of, z_prev, z_half)
            report.alphas.append(alpha_ls)
            x = w[: len(x_prev)]
            p = w[len(x_prev):]
        else:
            x = x_half
            p = p_half

        dx = x - x_prev
        try:
            e_new = float(E.eval(x))
        except ValueError:
            e_new = np.inf
        report.states.append(x.copy())
        report.energies.append(e_new)
        report.extras["pressures"].append(p.copy())
        rel = _rel_increment(x, dx)
        report.increments_rel.append(rel)
        report.block_increments_l2.append(_block_l2(E, dx))
        report.block_increments_energy.append({})
        report.inner_counts.append({"flow": n_flow, "mech": n_mech})

        if e_new > report.energies[-2] + 1e-12 * max(1.0, abs(e_new), abs(report.energies[-2])):
            rising += 1
        else:
            rising = 0
        if rising >= 5:
            report.outcome = "diverged"
            report.diagnostic = (
                "step energy rose over five successive outer iterations; "
                f"inner policy {policy.kind} with L_b={policy.L_b}, "
                f"L_FS={policy.L_FS}, L_mu={policy.L_mu}, L_lam={policy.L_lam}"
            )
            return report

        if rel <= scheme.tol_rel:
            report.outcome = "converged"
            return report
        if _free_norm(E, E.grad(x)) <= _GRAD_EXIT * g_scale:
            report.outcome = "converged"
            return report
        if _diverged(report.increments_rel):
            report.outcome = "diverged"
            report.diagnostic = "relative increment grew beyond the divergence window"
            return report

    report.outcome = "max_iter"
    return report


# ---------------------------------------------------------------------------
# dispatch


def solve_step(E: DiscreteEnergy, scheme: SplitScheme, x0=None) -> IterationReport:
    """Route one step energy to the solver the scheme kind names."""
    kind = scheme.kind
    if kind == "monolithic":
        return solve_monolithic(E, x0)
    if kind == "undrained":
        return undrained_split_step(E, x0, scheme)
    if kind == "fixed_stress":
        return fixed_stress_split_step(E, x0, scheme)
    if kind in ("visco_undrained", "visco_fixed_stress"):
        return visco_split_step(E, x0, scheme)
    if kind in ("thermo_undrained_adiabatic", "thermo_extended_fixed_stress",
                "thermo_three_block"):
        return thermo_split_step(E, x0, scheme)
    if kind in ("nl_fixed_stress_newton", "nl_fixed_stress_lscheme"):
        return nonlinear_fixed_stress_step(E, x0, scheme)
    raise ValueError(f"unknown scheme kind {kind!r}")


# ---------------------------------------------------------------------------
# time stepping


@dataclass
class TransientProblem:
    """Definition of a transient run: assembled forms, constitutive choice,
    time-dependent loads and initial data.

    Load callables take the time t and return the assembled vector for that
    instant; None falls back to the vectors stored in forms (held constant).
    Sources are cellwise rate densities.
    """

    forms: AssembledForms
    params: PoroParams
    family: str = "poro"
    visco: Optional[ViscoParams] = None
    thermo: Optional[ThermoParams] = None
    law: Optional[NonlinearLaw] = None
    mech_load: Optional[Callable[[float], np.ndarray]] = None
    fluid_load: Optional[Callable[[float], np.ndarray]] = None
    entropy_load: Optional[Callable[[float], np.ndarray]] = None
    source: Optional[Callable[[float], np.ndarray]] = None
    entropy_source: Optional[Callable[[float], np.ndarray]] = None
    theta0: Optional[np.ndarray] = None
    entropy0: Optional[np.ndarray] = None
    ev0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in ("poro", "visco", "thermo", "nonlinear"):
            raise ValueError(f"unknown problem family {self.family!r}")
        if self.family == "visco" and self.visco is None:
            raise ValueError("visco problems need visco parameters")
        if self.family == "thermo" and self.thermo is None:
            raise ValueError("thermo problems need thermo parameters")
        if self.family == "nonlinear" and self.law is None:
            raise ValueError("nonlinear problems need a constitutive law")

    def load_at(self, which: str, t: float):
        fn = getattr(self, which)
        return None if fn is None else np.asarray(fn(t), dtype=float)

    def source_at(self, which: str, t: float, n_cells: int) -> np.ndarray:
        fn = getattr(self, which)
        if fn is None:
            return np.zeros(n_cells)
        out = np.asarray(fn(t), dtype=float)
        if out.shape != (n_cells,):
            raise ValueError(f"{which} callable returned the wrong shape")
        return out


@dataclass
class StepRecord:
    t: float
    state: np.ndarray
    theta: np.ndarray
    report: IterationReport
    mass_defect: float
    pressure: Optional[np.ndarray] = None
    temperature: Optional[np.ndarray] = None
    entropy: Optional[np.ndarray] = None
    ev: Optional[np.ndarray] = None


def _build_step_energy(problem: TransientProblem, step: StepData, gamma: float):
    if problem.family == "poro":
        return build_poro_energy(problem.forms, problem.params, step, gamma)
    if problem.family == "visco":
        return build_visco_energy(problem.forms, problem.params, problem.visco,
                                  step, gamma)
    if problem.family == "thermo":
        return build_thermo_energy(problem.forms, problem.params, problem.thermo,
                                   step, gamma)
    return build_nonlinear_energy(problem.forms, problem.law, problem.params,
                                  step, gamma)


def _compatibility_solve(problem: TransientProblem, dt: float) -> np.ndarray:
    """Mechanics-only minimization of the t=0 energy with all fluxes zero,
    making the initial state equilibrated against the initial content."""
    nc = problem.forms.u_space.mesh.n_cells
    step = StepData(
        dt=dt,
        theta_prev=problem.theta0,
        f_mech=problem.load_at("mech_load", 0.0),
        f_fluid=problem.load_at("fluid_load", 0.0),
        f_entropy=problem.load_at("entropy_load", 0.0),
        S_prev=problem.entropy0,
        eps_v_prev=problem.ev0,
    )
    E = _build_step_energy(problem, step, gamma=1.0)
    x = E.zero_state()
    if problem.family == "visco" and problem.ev0 is not None:
        x[E.block_slice("ev")] = np.asarray(problem.ev0, dtype=float).reshape(-1)

    rows = _group_rows(E, ("u",))
    if E.is_quadratic:
        solver = _FreeBlockSolver(E, rows)
        solver.solve_into(x)
        return x
    # nonlinear: Newton over the displacement block only
    for _ in range(50):
        g = E.grad(x)[E.block_slice("u")]
        if float(np.linalg.norm(g[rows])) <= 1e-12 * max(1.0, float(np.linalg.norm(E.f_u))):
            break
        H = E.hessian(x).to_scipy()
        step_u = SpdFactorization(
            CsrMatrix.from_scipy(H[np.ix_(rows, rows)].tocsr())).solve(-g[rows])
        x[rows] += step_u
    return x


def time_stepper(problem: TransientProblem, scheme: SplitScheme, n_steps: int,
                 dt: float) -> list:
    """March n_steps implicit steps of size dt with the given scheme.

    Each step warm-starts from the previous state, rebuilds the step energy
    with the content transported by the converged fluxes, and verifies the
    discrete mass bookkeeping of that transport.  A step whose solver does
    not converge raises ConvergenceError carrying the offending report.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    mesh = problem.forms.u_space.mesh
    nc = mesh.n_cells
    vol = mesh.cell_volumes
    theta = (np.zeros(nc) if problem.theta0 is None
             else np.asarray(problem.theta0, dtype=float).copy())
    entropy = (np.zeros(nc) if problem.entropy0 is None
               else np.asarray(problem.entropy0, dtype=float).copy())

    x0 = _compatibility_solve(problem, dt)
    is_thermo = problem.family == "thermo"
    is_visco = problem.family == "visco"
    records: list = []

    x_warm = x0
    for n in range(1, n_steps + 1):
        t = n * dt
        q_theta = problem.source_at("source", t, nc)
        q_S = problem.source_at("entropy_source", t, nc)
        eps_v_prev = None
        if is_visco:
            # internal strain history comes from the previous step's state
            eps_v_prev = records[-1].ev if records else problem.ev0
        step = StepData(
            dt=dt,
            theta_prev=theta,
            q_theta=q_theta,
            f_mech=problem.load_at("mech_load", t),
            f_fluid=problem.load_at("fluid_load", t),
            f_entropy=problem.load_at("entropy_load", t),
            S_prev=entropy if is_thermo else None,
            q_S=q_S if is_thermo else None,
            eps_v_prev=eps_v_prev,
        )
        E = _build_step_energy(problem, step, scheme.gamma)
        report = solve_step(E, scheme, x0=x_warm)
        if report.outcome != "converged":
            raise ConvergenceError(
                f"step {n} did not converge: outcome {report.outcome}",
                report=report, step=n,
            )
        x = report.final_state

        q = x[E.block_slice("q")]
        outflow = float(np.sum(E.D @ q))
        theta_eff = step.theta_eff(nc)
        theta_new = theta_eff - dt * (E.D @ q) / vol
        defect = (float(vol @ theta_new) - float(vol @ theta)
                  - dt * (float(vol @ q_theta) - outflow))
        scale = max(1.0, abs(float(vol @ theta_new)), dt * abs(outflow))
        mass_defect = abs(defect) / scale

        rec = StepRecord(t=t, state=x.copy(), theta=theta_new, report=report,
                         mass_defect=mass_defect)
        if is_thermo:
            j = x[E.block_slice("j")]
            entropy_eff = step.entropy_eff(nc)
            rec.entropy = entropy_eff - dt * (E.D @ j) / vol
            pT = E.pressure_temperature(x)
            rec.pressure = pT[:, 0].copy()
            rec.temperature = pT[:, 1].copy()
            entropy = rec.entropy
        elif is_visco:
            rec.ev = x[E.block_slice("ev")].copy()
            rec.pressure = E.pressure(x)
        else:
            rec.pressure = E.pressure(x)

        theta = theta_new
        records.append(rec)
        x_warm = x

    return records
