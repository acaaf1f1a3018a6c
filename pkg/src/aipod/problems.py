"""Bilevel problem oracles and built-in problem families.

A problem bundles an upper objective ``f(x, y)``, a lower objective
``g(x, y)`` that is strongly convex in ``y``, the upper constraint
``B x = e`` and the coupled lower constraint ``A y + h(x) = c``.  Every
first- and second-order oracle can be called deterministically
(``token=None``) or stochastically, in which case zero-mean Gaussian noise
drawn from the token's substream is added.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .errors import CapabilityError, InputError
from .geometry import (
    AffineConstraint,
    SubspaceDecomposition,
    consensus_constraints,
    decompose,
)
from .rng import Component, SampleToken, init_rng


@dataclass(frozen=True)
class NoiseModel:
    std_f: float = 0.1
    std_g1: float = 0.1
    std_g2: float = 0.1

    def __post_init__(self):
        for name in ("std_f", "std_g1", "std_g2"):
            if getattr(self, name) < 0:
                raise InputError(f"noise {name} must be nonnegative")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ProblemMetadata:
    mu_g: float
    l_g1: float
    noise: NoiseModel
    coupling_is_zero: bool

    def __post_init__(self):
        if not 0 < self.mu_g <= self.l_g1:
            raise InputError(f"need 0 < mu_g <= l_g1, got {self.mu_g}, {self.l_g1}")


@dataclass(frozen=True)
class Dims:
    d_x: int
    d_y: int
    m_x: int
    m_y: int


def _noise(token: SampleToken | None, component: Component, shape, std: float, client: int = 0):
    if token is None or std == 0.0:
        return None
    return std * token.rng(component, client).standard_normal(shape)


def _sym_noise(token, shape, std, client=0):
    E = _noise(token, Component.HESS_YY_G, shape, std, client)
    if E is None:
        return None
    return 0.5 * (E + E.T)


class BilevelProblem:
    """Oracle bundle for one equality-constrained bilevel instance.

    Subclasses provide the deterministic pieces (``_grad_x_f`` ...); this
    base adds the noise model and the constraint plumbing.
    """

    kind = "abstract"

    dims: Dims
    upper: AffineConstraint
    lower_dec: SubspaceDecomposition
    lower_target: np.ndarray
    metadata: ProblemMetadata
    spec: "ProblemSpec"

    # --- coupling h(x) ---------------------------------------------------
    def h(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(self.dims.m_y)

    def jac_h(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((self.dims.m_y, self.dims.d_x))

    def lower_constraint(self, x: np.ndarray) -> AffineConstraint:
        return AffineConstraint(self.lower_dec, self.lower_target - self.h(x))

    @property
    def noise(self) -> NoiseModel:
        return self.metadata.noise

    # --- objectives and oracles -----------------------------------------
    def f(self, x, y) -> float:
        raise NotImplementedError

    def grad_x_f(self, x, y, token: SampleToken | None = None) -> np.ndarray:
        out = self._grad_x_f(x, y)
        n = _noise(token, Component.GRAD_X_F, out.shape, self.noise.std_f)
        return out if n is None else out + n

    def grad_y_f(self, x, y, token: SampleToken | None = None) -> np.ndarray:
        out = self._grad_y_f(x, y)
        n = _noise(token, Component.GRAD_Y_F, out.shape, self.noise.std_f)
        return out if n is None else out + n

    def grad_y_g(self, x, y, token: SampleToken | None = None) -> np.ndarray:
        out = self._grad_y_g(x, y)
        n = _noise(token, Component.GRAD_Y_G, out.shape, self.noise.std_g1)
        return out if n is None else out + n

    def hess_yy_g(self, x, y, token: SampleToken | None = None) -> np.ndarray:
        out = self._hess_yy_g(x, y)
        n = _sym_noise(token, out.shape, self.noise.std_g2)
        return out if n is None else out + n

    def hess_xy_g(self, x, y, token: SampleToken | None = None) -> np.ndarray:
        """Mixed block with shape (d_x, d_y): entry (i, j) is d2g/dx_i dy_j."""
        out = self._hess_xy_g(x, y)
        n = _noise(token, Component.HESS_XY_G, out.shape, self.noise.std_g2)
        return out if n is None else out + n

    def hvp_yy_g(self, x, y, v, token: SampleToken | None = None) -> np.ndarray:
        return self.hess_yy_g(x, y, token) @ v

    def xy_g_matvec(self, x, y, v, token: SampleToken | None = None) -> np.ndarray:
        return self.hess_xy_g(x, y, token) @ v

    def exact_lower_solution(self, x: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"no closed-form lower solution for problem kind {self.kind!r}")

    def upper_value(self, x: np.ndarray) -> float:
        return self.f(x, self.exact_lower_solution(x))

    def initial_point(self, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Feasible start: projected standard Gaussians from the init stream."""
        rng = init_rng(seed)
        x0 = self.upper.project(rng.standard_normal(self.dims.d_x))
        y0 = self.lower_constraint(x0).project(rng.standard_normal(self.dims.d_y))
        return x0, y0

    def to_json(self) -> str:
        return self.spec.to_json()


def exact_lower_solution(problem: BilevelProblem, x: np.ndarray) -> np.ndarray:
    return problem.exact_lower_solution(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# helpers for random rank-deficient matrices


def _low_rank(rng: np.random.Generator, m: int, d: int, rank: int) -> np.ndarray:
    if rank == 0:
        return np.zeros((m, d))
    return rng.standard_normal((m, rank)) @ rng.standard_normal((rank, d)) / np.sqrt(rank)


class SyntheticProblem(BilevelProblem):
    """``F(x) = sin(c^T x + d^T y*(x)) + ln(||x + y*(x)||^2 + 1)`` with
    ``g(x, y) = ||x - y||^2 / 2``, ``B x = 0`` and ``A y + H x = 0``."""

    kind = "synthetic"

    def __init__(self, spec: "ProblemSpec"):
        d, ra, rb = spec.dims, spec.rank_a, spec.rank_b
        if not (0 < ra < d and 0 < rb < d):
            raise InputError(f"need 0 < rank_a, rank_b < d; got rank_a={ra}, rank_b={rb}, d={d}")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        A = _low_rank(rng, d, d, ra)
        B = _low_rank(rng, d, d, rb)
        G3 = rng.standard_normal((d, d)) / d
        # Ran(H) inside Ran(A) keeps Y(x) nonempty for every x
        self.H = A @ G3 if spec.coupling else np.zeros((d, d))
        self.c_vec = rng.standard_normal(d) / np.sqrt(d)
        self.d_vec = rng.standard_normal(d) / np.sqrt(d)
        self.dims = Dims(d, d, d, d)
        self.upper = AffineConstraint(decompose(B), np.zeros(d))
        self.lower_dec = decompose(A)
        self.lower_target = np.zeros(d)
        self.metadata = ProblemMetadata(1.0, 1.0, spec.noise, not spec.coupling)
        self._eye = np.eye(d)

    def h(self, x):
        return self.H @ x

    def jac_h(self, x):
        return self.H

    def f(self, x, y):
        s = x + y
        return float(np.sin(self.c_vec @ x + self.d_vec @ y) + np.log(s @ s + 1.0))

    def _common(self, x, y):
        s = x + y
        return np.cos(self.c_vec @ x + self.d_vec @ y), 2.0 * s / (s @ s + 1.0)

    def _grad_x_f(self, x, y):
        cs, ls = self._common(x, y)
        return cs * self.c_vec + ls

    def _grad_y_f(self, x, y):
        cs, ls = self._common(x, y)
        return cs * self.d_vec + ls

    def _grad_y_g(self, x, y):
        return y - x

    def _hess_yy_g(self, x, y):
        return self._eye.copy()

    def _hess_xy_g(self, x, y):
        return -self._eye

    def hvp_yy_g(self, x, y, v, token=None):
        E = _sym_noise(token, (self.dims.d_y, self.dims.d_y), self.noise.std_g2)
        return v.copy() if E is None else v + E @ v

    def xy_g_matvec(self, x, y, v, token=None):
        E = _noise(token, Component.HESS_XY_G, (self.dims.d_x, self.dims.d_y), self.noise.std_g2)
        return -v if E is None else E @ v - v

    def exact_lower_solution(self, x):
        # argmin ||y - x||^2 over Y(x) is the projection of x
        return self.lower_constraint(x).project(x)


class QuadraticProblem(BilevelProblem):
    """Convex quadratic test family with a tunable lower-level spectrum.

    ``g(x, y) = y^T D y / 2 - y^T Q x`` with eig(D) spread over
    ``[mu_g, l_g1]``, ``f(x, y) = ||y - t||^2 / 2 + lam ||x||^2 / 2 + s^T x``,
    ``B x = e`` and ``A y + H x = c``.  Ranks may be zero (unconstrained).
    """

    kind = "quadratic"
    lam = 0.5

    def __init__(self, spec: "ProblemSpec"):
        d, ra, rb = spec.dims, spec.rank_a, spec.rank_b
        if not (0 <= ra < d and 0 <= rb < d):
            raise InputError(f"need 0 <= rank < d; got rank_a={ra}, rank_b={rb}, d={d}")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        A = _low_rank(rng, d, d, ra)
        B = _low_rank(rng, d, d, rb)
        G3 = rng.standard_normal((d, d)) / np.sqrt(d)
        self.H = A @ G3 if spec.coupling else np.zeros((d, d))
        U, _ = np.linalg.qr(rng.standard_normal((d, d)))
        spectrum = np.linspace(spec.mu_g, spec.l_g1, d)
        self.D = (U * spectrum) @ U.T
        self.D = 0.5 * (self.D + self.D.T)
        self.Q = rng.standard_normal((d, d)) / np.sqrt(d)
        self.t = rng.standard_normal(d)
        self.s = rng.standard_normal(d) / np.sqrt(d)
        c = A @ rng.standard_normal(d)
        e = B @ rng.standard_normal(d)
        self.dims = Dims(d, d, d, d)
        self.upper = AffineConstraint(decompose(B), e)
        self.lower_dec = decompose(A)
        self.lower_target = c
        self.metadata = ProblemMetadata(spec.mu_g, spec.l_g1, spec.noise, not spec.coupling)

    def h(self, x):
        return self.H @ x

    def jac_h(self, x):
        return self.H

    def f(self, x, y):
        r = y - self.t
        return float(0.5 * r @ r + 0.5 * self.lam * x @ x + self.s @ x)

    def _grad_x_f(self, x, y):
        return self.lam * x + self.s

    def _grad_y_f(self, x, y):
        return y - self.t

    def _grad_y_g(self, x, y):
        return self.D @ y - self.Q @ x

    def _hess_yy_g(self, x, y):
        return self.D.copy()

    def _hess_xy_g(self, x, y):
        return -self.Q.T

    def exact_lower_solution(self, x):
        con = self.lower_constraint(x)
        dec = self.lower_dec
        y_p = con.offset
        V2 = dec.null_basis
        R = V2.T @ self.D @ V2
        z = np.linalg.solve(R, V2.T @ (self.Q @ x - self.D @ y_p))
        return y_p + V2 @ z


class ClientQuadratic:
    """One client of the federated quadratic family.

    ``f_m(x, y) = ||y - t||^2 / 2 + lam ||x - z||^2 / 2`` and
    ``g_m(x, y) = (y - Q x - b)^T diag(D) (y - Q x - b) / 2``.
    """

    lam = 0.1

    def __init__(self, cid: int, Q, b, D, t, z, noise: NoiseModel):
        self.cid = cid
        self.Q, self.b, self.D, self.t, self.z = Q, b, D, t, z
        self.noise = noise
        self.d = len(b)

    @property
    def _client(self) -> int:
        return self.cid + 1

    def f(self, x, y):
        r = y - self.t
        q = x - self.z
        return float(0.5 * r @ r + 0.5 * self.lam * q @ q)

    def _add(self, out, token, component, std):
        n = _noise(token, component, out.shape, std, self._client)
        return out if n is None else out + n

    def grad_x_f(self, x, y, token=None):
        return self._add(self.lam * (x - self.z), token, Component.GRAD_X_F, self.noise.std_f)

    def grad_y_f(self, x, y, token=None):
        return self._add(y - self.t, token, Component.GRAD_Y_F, self.noise.std_f)

    def grad_y_g(self, x, y, token=None):
        return self._add(self.D * (y - self.Q @ x - self.b), token, Component.GRAD_Y_G, self.noise.std_g1)

    def hess_yy_g(self, x, y, token=None):
        out = np.diag(self.D)
        E = _sym_noise(token, out.shape, self.noise.std_g2, self._client)
        return out if E is None else out + E

    def hess_xy_g(self, x, y, token=None):
        out = -self.Q.T * self.D
        return self._add(out, token, Component.HESS_XY_G, self.noise.std_g2)

    def hvp_yy_g(self, x, y, v, token=None):
        E = _sym_noise(token, (self.d, self.d), self.noise.std_g2, self._client)
        return self.D * v if E is None else self.D * v + E @ v

    def xy_g_matvec(self, x, y, v, token=None):
        E = _noise(token, Component.HESS_XY_G, (self.d, self.d), self.noise.std_g2, self._client)
        out = -(self.Q.T @ (self.D * v))
        return out if E is None else out + E @ v


class FederatedQuadraticProblem(BilevelProblem):
    """Consensus-lifted federated problem over ``M`` quadratic clients.

    The lifted objectives are ``f = sum_m f_m`` and ``g = sum_m g_m`` on the
    stacked variables, with ``B = A`` the consensus matrix and ``e = c = 0``.
    Every lifted oracle is evaluated client by client through the same
    :class:`ClientQuadratic` calls a federated simulation makes.
    """

    kind = "federated-quadratic"

    def __init__(self, spec: "ProblemSpec"):
        M, d, het = spec.m_clients, spec.dims, spec.heterogeneity
        if M < 2:
            raise InputError("federated problem needs m_clients >= 2")
        if d < 1 or het < 0:
            raise InputError("need d >= 1 and heterogeneity >= 0")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.M, self.d = M, d
        self.clients: list[ClientQuadratic] = []
        for m in range(M):
            if spec.identical_clients and m > 0:
                c0 = self.clients[0]
                args = (c0.Q, c0.b, c0.D, c0.t, c0.z)
            else:
                args = (
                    rng.standard_normal((d, d)) / np.sqrt(d),
                    rng.standard_normal(d),
                    1.0 + het * rng.random(d),
                    rng.standard_normal(d),
                    rng.standard_normal(d),
                )
            self.clients.append(ClientQuadratic(m, *args, noise=spec.noise))
        n = M * d
        A, dec = consensus_constraints(M, d)
        self.consensus_matrix = A
        self.dims = Dims(n, n, A.shape[0], A.shape[0])
        self.upper = AffineConstraint(dec, np.zeros(A.shape[0]))
        self.lower_dec = dec
        self.lower_target = np.zeros(A.shape[0])
        self.metadata = ProblemMetadata(1.0, 1.0 + het, spec.noise, True)

    # block helpers
    def split(self, v: np.ndarray) -> list[np.ndarray]:
        return list(np.asarray(v).reshape(self.M, self.d))

    def join(self, blocks) -> np.ndarray:
        return np.concatenate(blocks)

    def _per_client(self, name, x, y, token, *extra):
        xs, ys = self.split(x), self.split(y)
        ex = [self.split(e) for e in extra]
        out = []
        for m, c in enumerate(self.clients):
            args = [xs[m], ys[m]] + [e[m] for e in ex]
            out.append(getattr(c, name)(*args, token=token))
        return self.join(out)

    def f(self, x, y):
        xs, ys = self.split(x), self.split(y)
        return float(sum(c.f(xs[m], ys[m]) for m, c in enumerate(self.clients)))

    def grad_x_f(self, x, y, token=None):
        return self._per_client("grad_x_f", x, y, token)

    def grad_y_f(self, x, y, token=None):
        return self._per_client("grad_y_f", x, y, token)

    def grad_y_g(self, x, y, token=None):
        return self._per_client("grad_y_g", x, y, token)

    def hvp_yy_g(self, x, y, v, token=None):
        return self._per_client("hvp_yy_g", x, y, token, v)

    def xy_g_matvec(self, x, y, v, token=None):
        return self._per_client("xy_g_matvec", x, y, token, v)

    def _block_diag(self, name, x, y, token):
        xs, ys = self.split(x), self.split(y)
        n = self.M * self.d
        out = np.zeros((n, n))
        for m, c in enumerate(self.clients):
            sl = slice(m * self.d, (m + 1) * self.d)
            out[sl, sl] = getattr(c, name)(xs[m], ys[m], token=token)
        return out

    def hess_yy_g(self, x, y, token=None):
        return self._block_diag("hess_yy_g", x, y, token)

    def hess_xy_g(self, x, y, token=None):
        return self._block_diag("hess_xy_g", x, y, token)

    def exact_lower_solution(self, x):
        xs = self.split(x)
        num = sum(c.D * (c.Q @ xs[m] + c.b) for m, c in enumerate(self.clients))
        den = sum(c.D for c in self.clients)
        return np.tile(num / den, self.M)


# ---------------------------------------------------------------------------
# serialisable problem description

_KINDS = {
    "synthetic": SyntheticProblem,
    "quadratic": QuadraticProblem,
    "federated-quadratic": FederatedQuadraticProblem,
}


@dataclass(frozen=True)
class ProblemSpec:
    """Everything needed to rebuild a problem bit-identically."""

    kind: str = "synthetic"
    dims: int = 100
    seed: int = 0
    rank_a: int = 50
    rank_b: int = 50
    noise: NoiseModel = field(default_factory=NoiseModel)
    heterogeneity: float = 0.0
    m_clients: int = 5
    coupling: bool = True
    mu_g: float = 0.5
    l_g1: float = 1.0
    identical_clients: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InputError(f"unknown problem kind {self.kind!r}; expected one of {sorted(_KINDS)}")
        if self.dims < 1:
            raise InputError("dims must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProblemSpec":
        data = dict(data)
        if "d" in data:
            if "dims" in data and data["dims"] != data["d"]:
                raise InputError("problem keys 'd' and 'dims' disagree")
            data["dims"] = data.pop("d")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InputError(f"unknown problem keys: {', '.join(unknown)}")
        if "noise" in data:
            noise = data["noise"]
            if isinstance(noise, (int, float)):
                data["noise"] = NoiseModel(float(noise), float(noise), float(noise))
            else:
                bad = sorted(set(noise) - {"std_f", "std_g1", "std_g2"})
                if bad:
                    raise InputError(f"unknown noise keys: {', '.join(bad)}")
                data["noise"] = NoiseModel(**noise)
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        return cls.from_dict(json.loads(text))

    def build(self) -> BilevelProblem:
        return _KINDS[self.kind](self)


def build_problem(spec: ProblemSpec | dict) -> BilevelProblem:
    if isinstance(spec, dict):
        spec = ProblemSpec.from_dict(spec)
    return spec.build()


def build_synthetic(d: int, rank_a: int, rank_b: int, seed: int,
                    noise: NoiseModel | None = None, coupling: bool = True) -> SyntheticProblem:
    if rank_a > d or rank_b > d:
        raise InputError(f"rank request exceeds d={d}")
    spec = ProblemSpec("synthetic", d, seed, rank_a, rank_b,
                       noise if noise is not None else NoiseModel(), coupling=coupling)
    return SyntheticProblem(spec)


def build_quadratic(d: int, rank_a: int, rank_b: int, seed: int, mu_g: float = 0.5,
                    l_g1: float = 1.0, noise: NoiseModel | None = None,
                    coupling: bool = True) -> QuadraticProblem:
    spec = ProblemSpec("quadratic", d, seed, rank_a, rank_b,
                       noise if noise is not None else NoiseModel.zero(),
                       coupling=coupling, mu_g=mu_g, l_g1=l_g1)
    return QuadraticProblem(spec)


def build_federated_quadratic(M: int, d: int, heterogeneity: float, seed: int,
                              noise: NoiseModel | None = None,
                              identical_clients: bool = False) -> FederatedQuadraticProblem:
    spec = ProblemSpec("federated-quadratic", d, seed, 0, 0,
                       noise if noise is not None else NoiseModel(),
                       heterogeneity=heterogeneity, m_clients=M, coupling=False,
                       identical_clients=identical_clients)
    return FederatedQuadraticProblem(spec)
