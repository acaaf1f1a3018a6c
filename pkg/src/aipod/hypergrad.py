"""Implicit gradients, Neumann-series hypergradient estimates and the
stationarity measure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import ConditioningError, InputError
from .geometry import weighted_norm_sq
from .problems import BilevelProblem
from .rng import RoundDraws, Slot

PD_FLOOR = 1e-12


@dataclass(frozen=True)
class NeumannConfig:
    c_tilde: float = 1.0
    depth_cap: int = 5
    l_g1: float = 1.0

    def __post_init__(self):
        if not 0 < self.c_tilde <= 1:
            raise InputError(f"c_tilde must lie in (0, 1], got {self.c_tilde}")
        if self.depth_cap < 1:
            raise InputError(f"depth_cap must be >= 1, got {self.depth_cap}")
        if self.l_g1 <= 0:
            raise InputError("l_g1 must be positive")

    @property
    def step(self) -> float:
        return self.c_tilde / self.l_g1

    @property
    def scale(self) -> float:
        return self.c_tilde * self.depth_cap / self.l_g1

    @classmethod
    def for_problem(cls, problem: BilevelProblem, depth_cap: int, c_tilde: float = 1.0):
        return cls(c_tilde, depth_cap, problem.metadata.l_g1)


def analysis_c_tilde(problem: BilevelProblem) -> float:
    """``mu / (mu^2 + sigma_g2^2)``, clipped to 1."""
    mu = problem.metadata.mu_g
    s2 = problem.metadata.noise.std_g2 ** 2
    return min(1.0, mu / (mu * mu + s2))


@dataclass(frozen=True)
class HypergradSample:
    value: np.ndarray
    depth_drawn: int
    phi_samples: int
    xi_samples: int
    projections: int
    direction: np.ndarray  # the vector v that the leading block multiplies

    @property
    def samples_used(self) -> tuple[int, int]:
        return self.phi_samples, self.xi_samples


# ---------------------------------------------------------------------------
# exact quantities


def _reduced_factor(problem: BilevelProblem, H: np.ndarray):
    V2 = problem.lower_dec.null_basis
    R = V2.T @ H @ V2
    R = 0.5 * (R + R.T)
    if R.shape[0] == 0:
        return V2, None
    lam_min = float(np.linalg.eigvalsh(R)[0])
    if lam_min <= PD_FLOOR:
        raise ConditioningError(f"reduced lower-level Hessian is not positive definite (min eigenvalue {lam_min:.3e})")
    return V2, sla.cho_factor(R)


def _reduced_inverse_apply(V2, factor, rhs):
    """``V2 (V2^T H V2)^{-1} V2^T rhs`` for vector or matrix ``rhs``."""
    if factor is None:
        return np.zeros_like(rhs)
    return V2 @ sla.cho_solve(factor, V2.T @ rhs)


def _lower_point(problem, x, y):
    return problem.exact_lower_solution(x) if y is None else y


def exact_implicit_jacobian(problem: BilevelProblem, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Jacobian of ``y*(x)``, shape (d_y, d_x).

    ``-V2 (V2^T H V2)^{-1} V2^T (G_yx - H A^+ J_h) - A^+ J_h`` with ``H`` the
    lower Hessian, ``G_yx`` the transposed mixed block and ``J_h`` the
    Jacobian of the coupling.
    """
    y = _lower_point(problem, x, y)
    H = problem.hess_yy_g(x, y)
    V2, factor = _reduced_factor(problem, H)
    ApJh = problem.lower_dec.pinv @ problem.jac_h(x)
    G_yx = problem.hess_xy_g(x, y).T
    return -_reduced_inverse_apply(V2, factor, G_yx - H @ ApJh) - ApJh


def _implicit_vjp(problem, x, y, z):
    """``(dy*/dx)^T z`` without forming the Jacobian."""
    H = problem.hess_yy_g(x, y)
    V2, factor = _reduced_factor(problem, H)
    q = _reduced_inverse_apply(V2, factor, z)
    Jh_t_Ap_t = problem.jac_h(x).T @ problem.lower_dec.pinv.T
    return -(problem.hess_xy_g(x, y) @ q) + Jh_t_Ap_t @ (H @ q) - Jh_t_Ap_t @ z


def exact_w(problem: BilevelProblem, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Implicit part of the hypergradient, ``(dy*/dx)^T grad_y f``."""
    y = _lower_point(problem, x, y)
    return _implicit_vjp(problem, x, y, problem.grad_y_f(x, y))


def exact_upper_gradient(problem: BilevelProblem, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    y = _lower_point(problem, x, y)
    return problem.grad_x_f(x, y) + _implicit_vjp(problem, x, y, problem.grad_y_f(x, y))


def closed_form_ustar(problem: BilevelProblem, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimiser of ``u^T H u / 2 + u^T grad_y f`` over ``Ker(A)``."""
    V2, factor = _reduced_factor(problem, problem.hess_yy_g(x, y))
    return -_reduced_inverse_apply(V2, factor, problem.grad_y_f(x, y))


def stationarity(problem: BilevelProblem, x: np.ndarray) -> float:
    """``||grad F(x)||^2`` measured in the null space of ``B``."""
    return weighted_norm_sq(problem.upper.decomposition, exact_upper_gradient(problem, x))


# ---------------------------------------------------------------------------
# stochastic estimators


def neumann_direction(problem: BilevelProblem, x, y, z, cfg: NeumannConfig,
                      depth: int, draws: RoundDraws | None) -> np.ndarray:
    """``V2 [scale * prod_n (I - step V2^T H_n V2)] V2^T z`` in full coordinates.

    Each factor is applied as ``v <- P (v - step H_n v)``, which equals the
    reduced-coordinate product because ``v`` stays in ``Ker(A)``.
    """
    P = problem.lower_dec.project_null
    v = cfg.scale * P(z)
    for n in range(1, depth + 1):
        tok = None if draws is None else draws.phi(Slot.NEUMANN, n)
        v = P(v - cfg.step * problem.hvp_yy_g(x, y, v, tok))
    return v


def _leading_block(problem, x, y, z, v, tok0):
    # -J_h^T A^+^T z + (J_h^T A^+^T H_0 - G_0) v
    out = -problem.xy_g_matvec(x, y, v, tok0)
    if not problem.metadata.coupling_is_zero:
        Jh_t_Ap_t = problem.jac_h(x).T @ problem.lower_dec.pinv.T
        out = out + Jh_t_Ap_t @ (problem.hvp_yy_g(x, y, v, tok0) - z)
    return out


def estimate_w(problem: BilevelProblem, x: np.ndarray, y: np.ndarray, cfg: NeumannConfig,
               draws: RoundDraws | None = None, depth: int | None = None) -> HypergradSample:
    """Randomised truncated-Neumann estimate of the implicit gradient part.

    ``draws=None`` uses deterministic oracles, in which case ``depth`` must
    be given.  A supplied ``depth`` overrides the random draw.
    """
    if depth is None:
        if draws is None:
            raise InputError("deterministic estimate_w needs an explicit depth")
        depth = draws.depth(cfg.depth_cap)
    if not 0 <= depth < cfg.depth_cap:
        raise InputError(f"depth {depth} outside [0, {cfg.depth_cap})")
    xi = None if draws is None else draws.xi(Slot.UPPER, 0)
    z = problem.grad_y_f(x, y, xi)
    v = neumann_direction(problem, x, y, z, cfg, depth, draws)
    tok0 = None if draws is None else draws.phi(Slot.NEUMANN, 0)
    w = _leading_block(problem, x, y, z, v, tok0)
    return HypergradSample(w, depth, depth + 1, 1, depth, v)


def estimate_hf(problem: BilevelProblem, x: np.ndarray, y: np.ndarray, cfg: NeumannConfig,
                draws: RoundDraws | None = None, depth: int | None = None) -> HypergradSample:
    """``grad_x f(x, y; xi) + w`` with one ``xi`` shared by both terms."""
    ws = estimate_w(problem, x, y, cfg, draws, depth)
    xi = None if draws is None else draws.xi(Slot.UPPER, 0)
    value = problem.grad_x_f(x, y, xi) + ws.value
    return HypergradSample(value, ws.depth_drawn, ws.phi_samples, ws.xi_samples, ws.projections, ws.direction)


def truncated_neumann_w(problem: BilevelProblem, x, y, cfg: NeumannConfig) -> np.ndarray:
    """Mean of the noiseless estimator over every depth in ``{0, ..., N-1}``."""
    total = np.zeros(problem.dims.d_x)
    for n in range(cfg.depth_cap):
        total = total + estimate_w(problem, x, y, cfg, None, n).value
    return total / cfg.depth_cap
