"""Material parameter records and constitutive laws.

Parameter records are immutable and validate their physical ranges on
construction.  Constitutive laws (strain energy densities, compressibility
laws, fluid viscosity models) are pure callables evaluated pointwise; the
energy module integrates them over meshes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad


# ---------------------------------------------------------------------------
# elastic moduli


def lame_from_E_nu(E: float, nu: float, dim: int = 3):
    """Convert Young's modulus and Poisson ratio to Lame moduli.

    Returns (mu, lam, K_dr, dim) where K_dr = 2*mu/dim + lam is the drained
    bulk modulus entering the splitting-scheme stabilization weights.
    """
    if E <= 0.0:
        raise ValueError(f"E must be positive, got {E}")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"nu must lie in [0, 0.5), got {nu}")
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    k_dr = 2.0 * mu / dim + lam
    return mu, lam, k_dr, dim


def e_nu_from_lame(mu: float, lam: float):
    """Inverse of lame_from_E_nu: recover (E, nu) from the Lame pair."""
    if mu <= 0.0 or lam < 0.0:
        raise ValueError("need mu > 0 and lam >= 0")
    nu = lam / (2.0 * (lam + mu))
    E = 2.0 * mu * (1.0 + nu)
    return E, nu


@dataclass(frozen=True)
class PoroParams:
    """Linear poroelastic material data.

    kappa is the conductivity (permeability already scaled by the inverse
    fluid viscosity), so the flow dissipation density is q.q/(2*kappa).
    """

    E: float
    nu: float
    alpha: float
    M: float
    kappa: float

    def __post_init__(self):
        if self.E <= 0.0:
            raise ValueError(f"E must be positive, got {self.E}")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"nu must lie in [0, 0.5), got {self.nu}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.M <= 0.0:
            raise ValueError(f"M must be positive, got {self.M}")
        if self.kappa <= 0.0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    @property
    def mu(self) -> float:
        return lame_from_E_nu(self.E, self.nu)[0]

    @property
    def lam(self) -> float:
        return lame_from_E_nu(self.E, self.nu)[1]

    def k_dr(self, dim: int) -> float:
        return lame_from_E_nu(self.E, self.nu, dim)[2]


@dataclass(frozen=True)
class ViscoParams:
    """Visco-elastic extension: stiffness and rate-viscosity moduli of the
    internal strain variable, plus its own Biot coefficient alpha_v."""

    E_v: float
    nu_v: float
    mu_v_prime: float
    lambda_v_prime: float
    alpha_v: float

    def __post_init__(self):
        if self.E_v <= 0.0:
            raise ValueError(f"E_v must be positive, got {self.E_v}")
        if not 0.0 <= self.nu_v < 0.5:
            raise ValueError(f"nu_v must lie in [0, 0.5), got {self.nu_v}")
        if self.mu_v_prime < 0.0 or self.lambda_v_prime < 0.0:
            raise ValueError("rate-viscosity moduli must be nonnegative")
        if self.mu_v_prime == 0.0 and self.lambda_v_prime == 0.0:
            raise ValueError("mu_v_prime and lambda_v_prime cannot both vanish")

    @property
    def mu_v(self) -> float:
        return lame_from_E_nu(self.E_v, self.nu_v)[0]

    @property
    def lam_v(self) -> float:
        return lame_from_E_nu(self.E_v, self.nu_v)[1]

    def k_dr_v(self, dim: int) -> float:
        return 2.0 * self.mu_v / dim + self.lam_v

    def k_dr_v_prime(self, dim: int) -> float:
        return 2.0 * self.mu_v_prime / dim + self.lambda_v_prime


@dataclass(frozen=True)
class ThermoParams:
    """Thermal coupling data for the reduced thermo-poro-elastic model.

    C_d is the volumetric heat capacity contribution scaled so that the
    entropy law reads S = (C_d/T0) T + 3 alpha_T K_dr div(u) - 3 alpha_phi p.
    """

    alpha_T: float
    alpha_phi: float
    C_d: float
    T0: float
    kappa_F: float

    def __post_init__(self):
        if self.C_d <= 0.0:
            raise ValueError(f"C_d must be positive, got {self.C_d}")
        if self.T0 <= 0.0:
            raise ValueError(f"T0 must be positive, got {self.T0}")
        if self.kappa_F <= 0.0:
            raise ValueError(f"kappa_F must be positive, got {self.kappa_F}")

    def coupling_matrix_inv(self, M: float) -> np.ndarray:
        """The 2x2 matrix pairing (p, T) with (fluid content, entropy).

        Must be SPD or the (p, T) pair is not recoverable from the conserved
        quantities and the model is ill posed.
        """
        a = np.array(
            [
                [1.0 / M, -3.0 * self.alpha_phi],
                [-3.0 * self.alpha_phi, self.C_d / self.T0],
            ]
        )
        if a[0, 0] <= 0.0 or np.linalg.det(a) <= 0.0:
            raise ValueError(
                "coupling matrix [[1/M, -3*alpha_phi], [-3*alpha_phi, C_d/T0]] "
                "is not SPD; reduce alpha_phi or increase C_d"
            )
        return a

    def coupling_matrix(self, M: float) -> np.ndarray:
        return np.linalg.inv(self.coupling_matrix_inv(M))


# ---------------------------------------------------------------------------
# strain energy densities
#
# Strains are d x d symmetric numpy arrays.  Each law exposes value(eps) and
# stress(eps); the module-level strain_energy() dispatches on the law object.


def _check_strain(eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.ndim != 2 or eps.shape[0] != eps.shape[1] or eps.shape[0] not in (2, 3):
        raise ValueError(f"strain must be 2x2 or 3x3, got shape {eps.shape}")
    if not np.allclose(eps, eps.T, atol=1e-12 * (1.0 + np.abs(eps).max())):
        raise ValueError("strain tensor must be symmetric")
    return eps


def sym_tensor_basis(dim: int):
    """Orthonormal basis of symmetric dim x dim matrices (Frobenius inner
    product).  Diagonal entries first, then off-diagonals scaled by 1/sqrt 2."""
    basis = []
    for i in range(dim):
        e = np.zeros((dim, dim))
        e[i, i] = 1.0
        basis.append(e)
    s = 1.0 / math.sqrt(2.0)
    for i in range(dim):
        for j in range(i + 1, dim):
            e = np.zeros((dim, dim))
            e[i, j] = s
            e[j, i] = s
            basis.append(e)
    return basis


def strain_energy_hessian_fd(law, eps: np.ndarray, h: Optional[float] = None) -> np.ndarray:
    """Finite-difference Hessian of the energy density in the orthonormal
    symmetric-tensor basis.  Used by the convexity screen and as a generic
    fallback for laws without an analytic Hessian."""
    eps = _check_strain(eps)
    basis = sym_tensor_basis(eps.shape[0])
    m = len(basis)
    if h is None:
        h = 1e-4 * (1.0 + float(np.linalg.norm(eps)))
    H = np.empty((m, m))
    for a in range(m):
        for b in range(a, m):
            wpp = law.value(eps + h * (basis[a] + basis[b]))
            wpm = law.value(eps + h * (basis[a] - basis[b]))
            wmp = law.value(eps - h * (basis[a] - basis[b]))
            wmm = law.value(eps - h * (basis[a] + basis[b]))
            H[a, b] = H[b, a] = (wpp - wpm - wmp + wmm) / (4.0 * h * h)
    return H


def _convexity_screen(law, seed: int = 1234, n_samples: int = 6) -> None:
    # numeric strong-convexity check over random strains in both dimensions
    rng = np.random.default_rng(seed)
    for dim in (2, 3):
        for _ in range(n_samples):
            a = rng.standard_normal((dim, dim))
            eps = 0.5 * (a + a.T)
            H = strain_energy_hessian_fd(law, eps)
            eigs = np.linalg.eigvalsh(H)
            scale = max(1.0, float(np.abs(eigs).max()))
            if eigs.min() <= 1e-10 * scale:
                raise ValueError(
                    f"{type(law).__name__}: energy density is not strongly convex "
                    f"(Hessian eigenvalue {eigs.min():.3e} at a sampled strain)"
                )


@dataclass(frozen=True)
class LinearElasticLaw:
    """W = mu |eps|^2 + (lam/2) (tr eps)^2, the St. Venant Kirchhoff density."""

    mu: float
    lam: float

    def __post_init__(self):
        if self.mu <= 0.0 or self.lam < 0.0:
            raise ValueError("need mu > 0 and lam >= 0")

    def value(self, eps: np.ndarray) -> float:
        eps = _check_strain(eps)
        tr = float(np.trace(eps))
        return self.mu * float(np.sum(eps * eps)) + 0.5 * self.lam * tr * tr

    def stress(self, eps: np.ndarray) -> np.ndarray:
        eps = _check_strain(eps)
        return 2.0 * self.mu * eps + self.lam * np.trace(eps) * np.eye(eps.shape[0])

    def k_dr_of_strain(self, tr_eps, dim: int):
        return 2.0 * self.mu / dim + self.lam + 0.0 * np.asarray(tr_eps, dtype=float)

    def newton_moduli(self, tr_eps, dim: int):
        tr_eps = np.asarray(tr_eps, dtype=float)
        return self.mu + 0.0 * tr_eps, self.lam + 0.0 * tr_eps


@dataclass(frozen=True)
class NlCompressibilityLaw:
    """W = mu |eps|^2 + L(tr eps) for an increasing l with l(0) = 0,
    L the antiderivative of l.  The cubic benchmark density is the instance
    l(s) = lam * s * |s|, see p_laplacian()."""

    mu: float
    l: Callable[[float], float]
    l_prime: Callable[[float], float]
    l_antideriv: Callable[[float], float]
    label: str = "custom"

    def __post_init__(self):
        if self.mu <= 0.0:
            raise ValueError("need mu > 0")
        if abs(self.l(0.0)) > 1e-14:
            raise ValueError("l(0) must vanish")
        _convexity_screen(self)

    @classmethod
    def p_laplacian(cls, mu: float, lam: float) -> "NlCompressibilityLaw":
        """W = mu |eps|^2 + (lam/3) |tr eps|^3, i.e. l(s) = lam * s * |s|."""
        if lam <= 0.0:
            raise ValueError("need lam > 0")
        return cls(
            mu=mu,
            l=lambda s: lam * s * abs(s),
            l_prime=lambda s: 2.0 * lam * abs(s),
            l_antideriv=lambda s: lam * abs(s) ** 3 / 3.0,
            label="p_laplacian",
        )

    def value(self, eps: np.ndarray) -> float:
        eps = _check_strain(eps)
        tr = float(np.trace(eps))
        return self.mu * float(np.sum(eps * eps)) + float(self.l_antideriv(tr))

    def stress(self, eps: np.ndarray) -> np.ndarray:
        eps = _check_strain(eps)
        tr = float(np.trace(eps))
        return 2.0 * self.mu * eps + float(self.l(tr)) * np.eye(eps.shape[0])

    def k_dr_of_strain(self, tr_eps, dim: int):
        tr_eps = np.asarray(tr_eps, dtype=float)
        lp = np.array([self.l_prime(float(t)) for t in np.atleast_1d(tr_eps)])
        out = 2.0 * self.mu / dim + lp
        return out if np.ndim(tr_eps) else float(out[0])

    def newton_moduli(self, tr_eps, dim: int):
        """Cellwise isotropic moduli of the energy Hessian 2 mu I + l'(tr) I x I."""
        tr_eps = np.atleast_1d(np.asarray(tr_eps, dtype=float))
        lp = np.array([self.l_prime(float(t)) for t in tr_eps])
        return np.full_like(tr_eps, self.mu), lp


@dataclass(frozen=True)
class NlShearLaw:
    """W = int_0^{|eps|} s f(s) ds + (lam/2) (tr eps)^2 for a uniformly
    positive, nondecreasing f."""

    f: Callable[[float], float]
    f_prime: Callable[[float], float]
    f_antideriv_s: Callable[[float], float]  # antiderivative of s*f(s)
    lam: float

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("need lam >= 0")
        if self.f(0.0) <= 0.0:
            raise ValueError("f must be uniformly positive")
        _convexity_screen(self)

    @classmethod
    def capped_linear(cls, f0: float, f1: float, s_cap: float, lam: float) -> "NlShearLaw":
        """f(s) = f0 + f1 * min(s, s_cap): positive, nondecreasing, bounded."""
        if f0 <= 0.0 or f1 < 0.0 or s_cap <= 0.0:
            raise ValueError("need f0 > 0, f1 >= 0, s_cap > 0")

        def anti(s: float) -> float:
            # int_0^s t*(f0 + f1*min(t, s_cap)) dt, piecewise closed form
            if s <= s_cap:
                return 0.5 * f0 * s * s + f1 * s ** 3 / 3.0
            head = 0.5 * f0 * s_cap ** 2 + f1 * s_cap ** 3 / 3.0
            tail = 0.5 * (f0 + f1 * s_cap) * (s * s - s_cap * s_cap)
            return head + tail

        return cls(
            f=lambda s: f0 + f1 * min(s, s_cap),
            f_prime=lambda s: f1 if s < s_cap else 0.0,
            f_antideriv_s=anti,
            lam=lam,
        )

    def value(self, eps: np.ndarray) -> float:
        eps = _check_strain(eps)
        mag = float(np.linalg.norm(eps))
        tr = float(np.trace(eps))
        return float(self.f_antideriv_s(mag)) + 0.5 * self.lam * tr * tr

    def stress(self, eps: np.ndarray) -> np.ndarray:
        eps = _check_strain(eps)
        mag = float(np.linalg.norm(eps))
        tr = float(np.trace(eps))
        return float(self.f(mag)) * eps + self.lam * tr * np.eye(eps.shape[0])


@dataclass(frozen=True)
class ViscoElastoPlasticLaw:
    """Deviatoric shear energy with a yield threshold plus a quadratic
    volumetric part k_vol * (tr eps)^2.

    Below the threshold 2 mu |dev eps| < k_yield the response is elastic;
    beyond it the deviatoric stress is (2 mu + k_yield/|dev eps|) dev eps.
    Ties at the threshold take the elastic branch.  k_yield = 0 reduces to
    the linear law with lam = 2 k_vol - 2 mu / d implicitly.
    """

    mu: float
    k_vol: float
    k_yield: float = 0.0

    def __post_init__(self):
        if self.mu <= 0.0 or self.k_vol <= 0.0 or self.k_yield < 0.0:
            raise ValueError("need mu > 0, k_vol > 0, k_yield >= 0")
        _convexity_screen(self)

    def _dev(self, eps: np.ndarray) -> np.ndarray:
        d = eps.shape[0]
        return eps - (np.trace(eps) / d) * np.eye(d)

    def value(self, eps: np.ndarray) -> float:
        eps = _check_strain(eps)
        dev = self._dev(eps)
        s = float(np.linalg.norm(dev))
        tr = float(np.trace(eps))
        s_y = self.k_yield / (2.0 * self.mu)
        if s <= s_y or self.k_yield == 0.0:
            dev_part = self.mu * s * s
        else:
            dev_part = self.mu * s * s + self.k_yield * (s - s_y)
        return dev_part + self.k_vol * tr * tr

    def stress(self, eps: np.ndarray) -> np.ndarray:
        eps = _check_strain(eps)
        d = eps.shape[0]
        dev = self._dev(eps)
        s = float(np.linalg.norm(dev))
        tr = float(np.trace(eps))
        if s == 0.0 or 2.0 * self.mu * s <= self.k_yield or self.k_yield == 0.0:
            sig_dev = 2.0 * self.mu * dev
        else:
            sig_dev = (2.0 * self.mu + self.k_yield / s) * dev
        return sig_dev + 2.0 * self.k_vol * tr * np.eye(d)


def strain_energy(law, eps: np.ndarray):
    """Evaluate an energy-density law: returns (value, effective stress)."""
    return law.value(eps), law.stress(eps)


def k_dr_of_strain_generic(law, eps: np.ndarray) -> float:
    """Strain-dependent drained modulus defined through the energy Hessian:
    1 / K_dr(eps) = I : (Hess W)^{-1} : I, evaluated numerically."""
    eps = _check_strain(eps)
    dim = eps.shape[0]
    H = strain_energy_hessian_fd(law, eps)
    ivec = np.zeros(H.shape[0])
    ivec[:dim] = 1.0
    return 1.0 / float(ivec @ np.linalg.solve(H, ivec))


# ---------------------------------------------------------------------------
# compressibility laws b(p)


@dataclass(frozen=True)
class LinearCompressibility:
    """b(p) = p / M: constant storage, the classical linear law."""

    M: float

    def __post_init__(self):
        if self.M <= 0.0:
            raise ValueError("need M > 0")

    def b(self, p):
        out = np.asarray(p, dtype=float) / self.M
        return float(out) if out.ndim == 0 else out

    def b_prime(self, p):
        out = np.full_like(np.asarray(p, dtype=float), 1.0 / self.M)
        return float(out) if out.ndim == 0 else out

    def b_inverse(self, s):
        out = self.M * np.asarray(s, dtype=float)
        return float(out) if out.ndim == 0 else out

    def b_star(self, theta):
        """Antiderivative of b^{-1}: the fluid part of the step energy."""
        theta = np.asarray(theta, dtype=float)
        out = 0.5 * self.M * theta * theta
        return float(out) if out.ndim == 0 else out

    @property
    def b_prime_max(self) -> float:
        return 1.0 / self.M


@dataclass(frozen=True)
class UserCompressibility:
    """User-supplied monotone compressibility with b(0) = 0.

    b_star must be the antiderivative of the inverse of b, used to evaluate
    the fluid energy term; b_prime_max bounds b' for the L-scheme weight.
    """

    b_fn: Callable
    b_prime_fn: Callable
    b_star_fn: Callable
    b_prime_max: float
    b_inverse_fn: Optional[Callable] = None

    def __post_init__(self):
        if abs(float(self.b_fn(0.0))) > 1e-14:
            raise ValueError("b(0) must vanish")
        if self.b_prime_max <= 0.0:
            raise ValueError("need b_prime_max > 0")
        # sampled monotonicity screen
        grid = np.linspace(-3.0, 3.0, 41)
        vals = np.array([float(self.b_fn(g)) for g in grid])
        if np.any(np.diff(vals) < -1e-12):
            raise ValueError("b must be nondecreasing")

    def b(self, p):
        p = np.asarray(p, dtype=float)
        return np.vectorize(self.b_fn, otypes=[float])(p) if p.ndim else float(self.b_fn(float(p)))

    def b_prime(self, p):
        p = np.asarray(p, dtype=float)
        return (
            np.vectorize(self.b_prime_fn, otypes=[float])(p)
            if p.ndim
            else float(self.b_prime_fn(float(p)))
        )

    def b_star(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (
            np.vectorize(self.b_star_fn, otypes=[float])(theta)
            if theta.ndim
            else float(self.b_star_fn(float(theta)))
        )

    def b_inverse(self, s):
        if self.b_inverse_fn is None:
            raise ValueError("this compressibility law has no inverse callback")
        s = np.asarray(s, dtype=float)
        return (
            np.vectorize(self.b_inverse_fn, otypes=[float])(s)
            if s.ndim
            else float(self.b_inverse_fn(float(s)))
        )


def tanh_compressibility() -> UserCompressibility:
    """b(p) = tanh(p), the bounded-content example law.

    b^{-1} = artanh on (-1, 1); its antiderivative is
    theta * artanh(theta) + log(1 - theta^2) / 2.
    """

    def b_star(theta: float) -> float:
        if abs(theta) >= 1.0:
            raise ValueError("tanh law: fluid content magnitude must stay below 1")
        return theta * math.atanh(theta) + 0.5 * math.log1p(-theta * theta)

    return UserCompressibility(
        b_fn=math.tanh,
        b_prime_fn=lambda p: 1.0 / math.cosh(p) ** 2,
        b_star_fn=b_star,
        b_prime_max=1.0,
        b_inverse_fn=math.atanh,
    )


def compressibility(law, p):
    """Evaluate a compressibility law: returns (b(p), b'(p))."""
    return law.b(p), law.b_prime(p)


@dataclass(frozen=True)
class NonlinearLaw:
    """Pairing of a strain-energy density and a compressibility law; the
    full data needed by the nonlinear step energy."""

    w: object
    b: object


# ---------------------------------------------------------------------------
# fluid dissipation: shear-thinning viscosity models and Forchheimer drag


_VISCOSITY_KINDS = ("newtonian", "carreau", "cross", "power")


@dataclass(frozen=True)
class ViscosityLaw:
    """Shear-dependent fluid viscosity nu(s), s the flux magnitude.

    newtonian: nu = nu_inf (constant).
    carreau:   nu = nu_inf + (nu_0 - nu_inf) / (1 + K_f s^2)^((2-r)/2).
    cross:     nu = nu_inf + (nu_0 - nu_inf) / (1 + K_f s^(2-r)).
    power:     nu = 1 / (K_f s^(2-r)).
    """

    kind: str
    nu_0: float = 0.0
    nu_inf: float = 0.0
    K_f: float = 1.0
    r: float = 1.5

    def __post_init__(self):
        if self.kind not in _VISCOSITY_KINDS:
            raise ValueError(f"unknown viscosity kind {self.kind!r}")
        if self.kind == "newtonian":
            if self.nu_inf <= 0.0:
                raise ValueError("newtonian law needs nu_inf > 0")
        elif self.kind == "power":
            if self.K_f <= 0.0:
                raise ValueError("power law needs K_f > 0")
            if not 1.0 < self.r < 2.0:
                raise ValueError(f"power law needs r in (1, 2), got {self.r}")
        else:
            if not 0.0 < self.nu_inf < self.nu_0:
                raise ValueError("need 0 < nu_inf < nu_0")
            if self.K_f <= 0.0:
                raise ValueError("need K_f > 0")
            if not 1.0 < self.r < 2.0:
                raise ValueError(f"need r in (1, 2), got {self.r}")
        # the convexity hypothesis behind well-posedness: s*nu(s) nondecreasing
        grid = np.geomspace(1e-8, 1e3, 121)
        sv = grid * self.nu(grid)
        if np.any(np.diff(sv) < -1e-12 * max(1.0, float(np.abs(sv).max()))):
            raise ValueError("s * nu(s) must be nondecreasing")

    def nu(self, s):
        s = np.abs(np.asarray(s, dtype=float))
        if self.kind == "newtonian":
            return np.full_like(s, self.nu_inf)
        if self.kind == "carreau":
            return self.nu_inf + (self.nu_0 - self.nu_inf) / (
                1.0 + self.K_f * s * s
            ) ** ((2.0 - self.r) / 2.0)
        if self.kind == "cross":
            return self.nu_inf + (self.nu_0 - self.nu_inf) / (
                1.0 + self.K_f * s ** (2.0 - self.r)
            )
        # power law: diverges at s = 0, handled by the dissipation integral
        with np.errstate(divide="ignore"):
            return 1.0 / (self.K_f * s ** (2.0 - self.r))

    def _dissipation_scalar(self, q: float) -> float:
        # int_0^q s*nu(s) ds, analytic where possible
        if q == 0.0:
            return 0.0
        if self.kind == "newtonian":
            return 0.5 * self.nu_inf * q * q
        if self.kind == "carreau":
            head = 0.5 * self.nu_inf * q * q
            tail = (self.nu_0 - self.nu_inf) * (
                (1.0 + self.K_f * q * q) ** (self.r / 2.0) - 1.0
            ) / (self.K_f * self.r)
            return head + tail
        if self.kind == "power":
            return q ** self.r / (self.K_f * self.r)
        val, _ = quad(lambda s: s * float(self.nu(s)), 0.0, q, limit=200)
        return val


@dataclass(frozen=True)
class ForchheimerLaw:
    """Darcy drag plus inertial Forchheimer term: density
    (nu/2) q^2 / kappa + (F/2) q^3."""

    nu: float
    F: float

    def __post_init__(self):
        if self.nu <= 0.0 or self.F < 0.0:
            raise ValueError("need nu > 0 and F >= 0")


def fluid_dissipation(law, q, kappa: float = 1.0):
    """Dissipation density and its derivative at flux magnitude q >= 0.

    Viscosity laws integrate s*nu(s)/kappa; the power law is defined by
    continuity at q = 0 (density 0, one-sided derivative 0 for r < 2).
    """
    if kappa <= 0.0:
        raise ValueError("need kappa > 0")
    q_arr = np.asarray(q, dtype=float)
    if np.any(q_arr < 0.0):
        raise ValueError("flux magnitude must be nonnegative")
    scalar = q_arr.ndim == 0

    if isinstance(law, ForchheimerLaw):
        density = 0.5 * law.nu / kappa * q_arr ** 2 + 0.5 * law.F * q_arr ** 3
        deriv = law.nu / kappa * q_arr + 1.5 * law.F * q_arr ** 2
    else:
        flat = np.atleast_1d(q_arr)
        density = np.array([law._dissipation_scalar(float(v)) for v in flat]) / kappa
        deriv = np.zeros_like(flat)
        pos = flat > 0.0
        if np.any(pos):
            deriv[pos] = flat[pos] * law.nu(flat[pos]) / kappa
        if scalar:
            density = density.reshape(())
            deriv = deriv.reshape(())
        else:
            density = density.reshape(q_arr.shape)
            deriv = deriv.reshape(q_arr.shape)
    if scalar:
        return float(density), float(deriv)
    return density, deriv
