"""AiPOD, E-AiPOD and E2-AiPOD solver loops.

All randomness comes from counter-addressed tokens (see :mod:`aipod.rng`),
so a run is a pure function of ``(problem, config)`` and metric evaluation
never touches the solver's draws.
"""
from __future__ import annotations

import functools
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from .errors import CapabilityError, InputError, RunError
from .hypergrad import NeumannConfig, analysis_c_tilde, estimate_w, stationarity
from .problems import BilevelProblem
from .rng import RoundDraws, Slot, Stream

VARIANTS = ("aipod", "e-aipod", "e2-aipod")


@dataclass(frozen=True)
class SolverConfig:
    """Solver hyperparameters.  ``K=None`` means ``round(400 / p)``."""

    variant: str = "e-aipod"
    alpha: float = 0.02
    beta: float = 0.01
    rho: float = 0.01
    delta: float = 1.0
    p: float = 0.3
    q: float = 0.3
    S: int = 5
    T: int = 2
    N: int | None = None
    K: int | None = None
    c_tilde: float = 1.0
    analysis_c_tilde: bool = False
    ll_batch: int = 1
    master_seed: int = 0
    eval_every: int | None = None
    record_wall_time: bool = False
    keep_iterates: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("alpha", "beta", "rho"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        for name in ("p", "q"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise InputError(f"{name} must lie in (0, 1], got {v}")
        if not self.delta >= 1:
            raise InputError(f"delta must be >= 1, got {self.delta}")
        if self.N is not None and self.N < 1:
            raise InputError("N must be a positive integer")
        for name in ("S", "T", "ll_batch"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be a positive integer")
        if self.K is not None and self.K < 0:
            raise InputError("K must be nonnegative")
        if self.eval_every is not None and self.eval_every < 1:
            raise InputError("eval_every must be positive")
        if not 0 < self.c_tilde <= 1:
            raise InputError("c_tilde must lie in (0, 1]")

    @property
    def n_outer(self) -> int:
        return self.K if self.K is not None else int(round(400 / self.p))

    @property
    def cadence(self) -> int:
        if self.eval_every is not None:
            return self.eval_every
        K = self.n_outer
        return 1 if K <= 2000 else math.ceil(K / 2000)

    def _c_tilde(self, problem: BilevelProblem) -> float:
        return analysis_c_tilde(problem) if self.analysis_c_tilde else self.c_tilde

    def neumann_depth(self, problem: BilevelProblem) -> int:
        """``N`` if set, else the smallest depth whose series bias
        ``(1 - c mu / l)^N`` falls below ``1/K`` (capped at 64)."""
        if self.N is not None:
            return self.N
        md = problem.metadata
        ratio = self._c_tilde(problem) * md.mu_g / md.l_g1
        if ratio >= 1.0:
            return 1
        K = max(self.n_outer, 2)
        return int(min(64, max(1, math.ceil(math.log(K) / -math.log1p(-ratio)))))

    @property
    def medium_steps(self) -> int:
        return self.N if self.N is not None else 5

    def neumann(self, problem: BilevelProblem) -> NeumannConfig:
        return NeumannConfig(self._c_tilde(problem), self.neumann_depth(problem), problem.metadata.l_g1)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class Counters:
    ll_projections: int = 0
    ul_explicit_projections: int = 0
    ul_implicit_projections: int = 0
    g_grad_samples: int = 0
    g_hess_samples: int = 0
    f_grad_samples: int = 0

    def __iadd__(self, other: "Counters") -> "Counters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def snapshot(self) -> "Counters":
        return replace(self)


@dataclass
class IterateState:
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray | None = None
    k: int = 0
    counters: Counters = field(default_factory=Counters)


@dataclass(frozen=True)
class MetricRow:
    k: int
    error_inst: float
    error_running_avg: float
    stationarity: float
    counters: Counters
    wall_ms: float = 0.0
    ll_comm: int = 0
    ul_comm: int = 0
    ml_comm: int = 0


@dataclass
class RunTrace:
    rows: list[MetricRow] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    xs: list[np.ndarray] = field(default_factory=list)
    ys: list[np.ndarray] = field(default_factory=list)
    final: IterateState | None = None

    @property
    def final_row(self) -> MetricRow:
        return self.rows[-1]

    def row_at(self, k: int) -> MetricRow:
        """Last emitted row with index ``<= k``."""
        best = self.rows[0]
        for row in self.rows:
            if row.k > k:
                break
            best = row
        return best


class Tracer:
    """Emits metric rows at the configured cadence and keeps the running mean."""

    def __init__(self, problem: BilevelProblem, cfg: SolverConfig, trace: RunTrace):
        self.problem = problem
        self.cfg = cfg
        self.trace = trace
        self.total = 0.0
        self.count = 0
        self.t0 = time.perf_counter()
        self.K = cfg.n_outer

    def due(self, k: int) -> bool:
        return k % self.cfg.cadence == 0 or k == self.K - 1

    def emit(self, k, x_metric, y, counters: Counters, x_lower=None, comm=(0, 0, 0)):
        pb = self.problem
        ystar = pb.exact_lower_solution(x_metric if x_lower is None else x_lower)
        stat = stationarity(pb, x_metric)
        diff = y - ystar
        err = stat + float(diff @ diff)
        self.total += err
        self.count += 1
        wall = (time.perf_counter() - self.t0) * 1e3 if self.cfg.record_wall_time else 0.0
        self.trace.rows.append(MetricRow(k, err, self.total / self.count, stat, counters.snapshot(),
                                         wall, *comm))

    def keep(self, x, y):
        if self.cfg.keep_iterates:
            self.trace.xs.append(x.copy())
            self.trace.ys.append(y.copy())


class Progress:
    """Tracks the current outer round so failures can name it."""

    def __init__(self, cfg: SolverConfig):
        self.variant = cfg.variant
        self.seed = cfg.master_seed
        self.k = -1

    def rounds(self, K: int):
        for k in range(K):
            self.k = k
            yield k


def reports_round(fn):
    """Wrap solver failures inside the loop as :class:`RunError`."""

    @functools.wraps(fn)
    def wrapper(problem, cfg, progress: Progress | None = None):
        prog = progress if progress is not None else Progress(cfg)
        try:
            return fn(problem, cfg, prog)
        except RunError:
            raise
        except Exception as exc:
            if prog.k < 0:
                raise
            raise RunError(prog.variant, prog.seed, prog.k, exc) from exc

    return wrapper


def _check_steps(problem: BilevelProblem, cfg: SolverConfig):
    md = problem.metadata
    if cfg.beta > 1.0 / md.l_g1:
        warnings.warn(f"beta={cfg.beta} exceeds 1/l_g1={1.0 / md.l_g1:.4g}", RuntimeWarning, stacklevel=3)
    if cfg.variant == "e2-aipod":
        s2 = md.noise.std_g2 ** 2
        bound = min(1.0 / md.l_g1, md.mu_g / (4 * s2) if s2 > 0 else math.inf)
        if cfg.rho > bound:
            warnings.warn(f"rho={cfg.rho} exceeds {bound:.4g}", RuntimeWarning, stacklevel=3)


def _new_trace(problem, cfg, seed) -> RunTrace:
    meta = {
        "variant": cfg.variant,
        "seed": seed,
        "config": cfg.to_dict(),
        "problem": problem.spec.to_dict(),
        "neumann_depth": cfg.neumann_depth(problem),
    }
    return RunTrace(metadata=meta)


# ---------------------------------------------------------------------------
# lower level


def lower_grad(problem: BilevelProblem, x, y, draws: RoundDraws | None, s: int, batch: int = 1):
    """Mini-batch ``grad_y g`` for LL step ``s``; ``batch=1`` uses one draw."""
    if draws is None:
        return problem.grad_y_g(x, y)
    if batch == 1:
        return problem.grad_y_g(x, y, draws.phi(Slot.LOWER, s))
    acc = problem.grad_y_g(x, y, draws.phi(Slot.LOWER, s * batch))
    for j in range(1, batch):
        acc = acc + problem.grad_y_g(x, y, draws.phi(Slot.LOWER, s * batch + j))
    return acc / batch


def lower_pgd(problem: BilevelProblem, x, y0, beta: float, S: int,
              draws: RoundDraws | None = None, batch: int = 1) -> tuple[np.ndarray, Counters]:
    """``S`` steps of projected SGD on ``g(x, .)`` over ``Y(x)``."""
    cnt = Counters()
    con = problem.lower_constraint(x)
    y = y0
    for s in range(S):
        g = lower_grad(problem, x, y, draws, s, batch)
        y = con.project(y - beta * g)
    cnt.ll_projections = S
    cnt.g_grad_samples = S * batch
    return y, cnt


def eaipod_lower(problem: BilevelProblem, x, y0, r0, beta: float, p: float, S: int,
                 draws: RoundDraws | None = None, batch: int = 1,
                 coin_p: float | None = None) -> tuple[np.ndarray, np.ndarray, Counters]:
    """Lower loop with randomly skipped projections and drift correction ``r``.

    ``coin_p`` overrides the coin probability without touching the update
    algebra (a test hook: ``coin_p=0`` never projects).
    """
    cnt = Counters()
    con = problem.lower_constraint(x)
    prob = p if coin_p is None else coin_p
    y, r = y0, r0
    lag = 1.0 / p - 1.0
    for s in range(S):
        g = lower_grad(problem, x, y, draws, s, batch)
        y_hat = y - beta * (g - r)
        if _coin(draws, Stream.COIN_LL, s, prob):
            # same as projecting y_hat - (beta/p) r; written so p = 1 is plain PGD
            y_new = con.project(y - beta * (g + lag * r))
            r = r + (p / beta) * (y_new - y_hat)
            y = y_new
            cnt.ll_projections += 1
        else:
            y = y_hat
    cnt.g_grad_samples = S * batch
    return y, r, cnt


def _coin(draws, stream, index, prob) -> bool:
    if draws is None:
        # deterministic mode: project iff the probability is one
        return prob >= 1.0
    return draws.coin(stream, index, prob)


# ---------------------------------------------------------------------------
# solvers


@reports_round
def run_aipod(problem: BilevelProblem, cfg: SolverConfig, prog: Progress) -> RunTrace:
    seed = cfg.master_seed
    _check_steps(problem, cfg)
    ncfg = cfg.neumann(problem)
    trace = _new_trace(problem, cfg, seed)
    tr = Tracer(problem, cfg, trace)
    x, y = problem.initial_point(seed)
    cnt = Counters()
    K = cfg.n_outer
    if K == 0:
        tr.emit(0, x, y, cnt)
    for k in prog.rounds(K):
        draws = RoundDraws(seed, k)
        y, c = lower_pgd(problem, x, y, cfg.beta, cfg.S, draws, cfg.ll_batch)
        cnt += c
        ws = estimate_w(problem, x, y, ncfg, draws)
        hf = problem.grad_x_f(x, y, draws.xi(Slot.UPPER, 0)) + ws.value
        x_new = problem.upper.project(x - cfg.alpha * hf)
        cnt.f_grad_samples += 1
        cnt.g_hess_samples += ws.phi_samples
        cnt.ul_implicit_projections += ws.projections
        cnt.ul_explicit_projections += 1
        if tr.due(k):
            tr.emit(k, x, y, cnt)
        x = x_new
        tr.keep(x, y)
    trace.final = IterateState(x, y, None, K, cnt)
    return trace


@reports_round
def run_eaipod(problem: BilevelProblem, cfg: SolverConfig, prog: Progress) -> RunTrace:
    seed = cfg.master_seed
    _check_steps(problem, cfg)
    ncfg = cfg.neumann(problem)
    trace = _new_trace(problem, cfg, seed)
    tr = Tracer(problem, cfg, trace)
    x, y = problem.initial_point(seed)
    r = np.zeros_like(y)
    cnt = Counters()
    K = cfg.n_outer
    if K == 0:
        tr.emit(0, x, y, cnt)
    for k in prog.rounds(K):
        draws = RoundDraws(seed, k)
        y, r, c = eaipod_lower(problem, x, y, r, cfg.beta, cfg.p, cfg.S, draws, cfg.ll_batch)
        cnt += c
        ws = estimate_w(problem, x, y, ncfg, draws)
        xt = x
        for t in range(cfg.T):
            xt = xt - cfg.alpha * (problem.grad_x_f(xt, y, draws.xi(Slot.UPPER, t)) + ws.value)
        x_new = _relax(x, problem.upper.project(xt), cfg.delta)
        cnt.f_grad_samples += cfg.T
        cnt.g_hess_samples += ws.phi_samples
        cnt.ul_implicit_projections += ws.projections
        cnt.ul_explicit_projections += 1
        if tr.due(k):
            tr.emit(k, x, y, cnt)
        x = x_new
        tr.keep(x, y)
    trace.final = IterateState(x, y, r, K, cnt)
    return trace


def _relax(x, proj, delta):
    if delta == 1.0:
        return proj
    return (1.0 - delta) * x + delta * proj


def e2aipod_medium(problem: BilevelProblem, x, y, rho: float, q: float, N: int,
                   draws: RoundDraws | None = None,
                   coin_q: float | None = None) -> tuple[np.ndarray, Counters]:
    """Approximate ``u*(x, y)`` by ``N`` skipped-projection steps from ``u = e = 0``."""
    cnt = Counters()
    P = problem.lower_dec.project_null
    prob = q if coin_q is None else coin_q
    lag = 1.0 / q - 1.0
    u = np.zeros(problem.dims.d_y)
    e = np.zeros(problem.dims.d_y)
    for n in range(N):
        xi = None if draws is None else draws.xi(Slot.MEDIUM, n)
        phi = None if draws is None else draws.phi(Slot.MEDIUM, n)
        gf = problem.grad_y_f(x, y, xi)
        hv = problem.hvp_yy_g(x, y, u, phi)
        u_hat = u - rho * (gf + hv - e)
        if _coin(draws, Stream.COIN_ML, n, prob):
            u_new = P(u - rho * (gf + hv + lag * e))
            e = e + (q / rho) * (u_new - u_hat)
            u = u_new
            cnt.ul_implicit_projections += 1
        else:
            u = u_hat
    cnt.f_grad_samples = N
    cnt.g_hess_samples = N
    return u, cnt


@reports_round
def run_e2aipod(problem: BilevelProblem, cfg: SolverConfig, prog: Progress) -> RunTrace:
    if not problem.metadata.coupling_is_zero:
        raise CapabilityError("e2-aipod requires a problem with zero coupling h(x)")
    seed = cfg.master_seed
    _check_steps(problem, cfg)
    trace = _new_trace(problem, cfg, seed)
    tr = Tracer(problem, cfg, trace)
    x, y = problem.initial_point(seed)
    r = np.zeros_like(y)
    cnt = Counters()
    K = cfg.n_outer
    if K == 0:
        tr.emit(0, x, y, cnt)
    for k in prog.rounds(K):
        draws = RoundDraws(seed, k)
        y, r, c = eaipod_lower(problem, x, y, r, cfg.beta, cfg.p, cfg.S, draws, cfg.ll_batch)
        cnt += c
        u, c = e2aipod_medium(problem, x, y, cfg.rho, cfg.q, cfg.medium_steps, draws)
        cnt += c
        d_f = problem.grad_x_f(x, y, draws.xi(Slot.UPPER, 0)) + \
            problem.xy_g_matvec(x, y, u, draws.phi(Slot.UPPER, 0))
        cnt.f_grad_samples += 1
        cnt.g_hess_samples += 1
        if k % cfg.T == 0:
            x_new = problem.upper.project(x - cfg.alpha * d_f)
            cnt.ul_explicit_projections += 1
        else:
            x_new = x - cfg.alpha * d_f
        if tr.due(k):
            # metric at the projected point; this projection is not counted
            tr.emit(k, problem.upper.project(x), y, cnt, x_lower=x)
        x = x_new
        tr.keep(x, y)
    trace.final = IterateState(x, y, r, K, cnt)
    return trace


_RUNNERS = {"aipod": run_aipod, "e-aipod": run_eaipod, "e2-aipod": run_e2aipod}


def run_solver(problem: BilevelProblem, cfg: SolverConfig) -> RunTrace:
    return _RUNNERS[cfg.variant](problem, cfg)
