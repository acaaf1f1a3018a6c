"""Simulated federated bilevel training over a consensus constraint.

Clients hold local copies ``x_m, y_m`` and only exchange ``d``-vectors with
a server whose single operation is :func:`server_average`.  Projection onto
the consensus set is exactly that average, so every run here reproduces the
centralised solver on the lifted problem.  The update direction follows
``grad_x f - G v`` (descent on the hypergradient) and the outer aggregation
uses the mean of client models, not their sum.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapabilityError
from .geometry import consensus_constraints, server_average
from .hypergrad import NeumannConfig
from .problems import FederatedQuadraticProblem
from .rng import RoundDraws, Slot, Stream
from .solvers import (
    Counters,
    IterateState,
    Progress,
    RunTrace,
    SolverConfig,
    Tracer,
    _check_steps,
    _new_trace,
    reports_round,
)

__all__ = [
    "ClientState",
    "CommLog",
    "consensus_constraints",
    "server_average",
    "fed_w_hvp",
    "run_fed_eaipod",
    "run_fed_e2aipod",
]


@dataclass
class ClientState:
    m: int
    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    u: np.ndarray | None = None
    e: np.ndarray | None = None


@dataclass
class CommLog:
    ll_rounds: int = 0
    ul_rounds: int = 0
    ml_rounds: int = 0
    hvp_rounds: int = 0
    scalars_transferred: int = 0

    def __iadd__(self, other: "CommLog") -> "CommLog":
        self.ll_rounds += other.ll_rounds
        self.ul_rounds += other.ul_rounds
        self.ml_rounds += other.ml_rounds
        self.hvp_rounds += other.hvp_rounds
        self.scalars_transferred += other.scalars_transferred
        return self

    def as_columns(self) -> tuple[int, int, int]:
        return self.ll_rounds, self.ul_rounds, self.ml_rounds


class _Server:
    """Counts every averaging round and the scalars it receives."""

    def __init__(self, log: CommLog):
        self.log = log

    def average(self, blocks: Sequence[np.ndarray], kind: str) -> np.ndarray:
        setattr(self.log, kind, getattr(self.log, kind) + 1)
        self.log.scalars_transferred += sum(b.size for b in blocks)
        return server_average(blocks)


FED_CONVENTIONS = {"ul_direction": "grad_x f - G v", "aggregation": "mean", "depth": "shared"}


def _require_consensus(problem):
    if not isinstance(problem, FederatedQuadraticProblem):
        raise CapabilityError("federated solvers need a consensus problem from build_federated_quadratic")


def fed_w_hvp(clients, xs, ys, cfg: NeumannConfig, draws: RoundDraws | None,
              depth: int | None = None) -> tuple[list[np.ndarray], CommLog, int]:
    """Per-client implicit-gradient parts using only vector exchanges.

    The depth is drawn once by the server.  Returns ``(w_m list, log, depth)``
    where ``log`` holds ``depth + 1`` averaging rounds.
    """
    log = CommLog()
    server = _Server(log)
    if depth is None:
        depth = draws.depth(cfg.depth_cap) if draws is not None else 0
    xi = None if draws is None else draws.xi(Slot.UPPER, 0)
    zs = [c.grad_y_f(xs[m], ys[m], xi) for m, c in enumerate(clients)]
    v = cfg.scale * server.average(zs, "hvp_rounds")
    for n in range(1, depth + 1):
        tok = None if draws is None else draws.phi(Slot.NEUMANN, n)
        local = [v - cfg.step * c.hvp_yy_g(xs[m], ys[m], v, tok) for m, c in enumerate(clients)]
        v = server.average(local, "hvp_rounds")
    tok0 = None if draws is None else draws.phi(Slot.NEUMANN, 0)
    ws = [-c.xy_g_matvec(xs[m], ys[m], v, tok0) for m, c in enumerate(clients)]
    return ws, log, depth


def _client_lower_grad(c, x, y, draws, s, batch):
    if batch == 1:
        return c.grad_y_g(x, y, draws.phi(Slot.LOWER, s))
    acc = c.grad_y_g(x, y, draws.phi(Slot.LOWER, s * batch))
    for j in range(1, batch):
        acc = acc + c.grad_y_g(x, y, draws.phi(Slot.LOWER, s * batch + j))
    return acc / batch


def _fed_lower(problem, states, cfg: SolverConfig, draws, server: _Server, cnt: Counters):
    beta, p = cfg.beta, cfg.p
    lag = 1.0 / p - 1.0
    for s in range(cfg.S):
        gs = [_client_lower_grad(c, st.x, st.y, draws, s, cfg.ll_batch)
              for c, st in zip(problem.clients, states)]
        y_hats = [st.y - beta * (g - st.r) for st, g in zip(states, gs)]
        if draws.coin(Stream.COIN_LL, s, p):
            avg = server.average([st.y - beta * (g + lag * st.r) for st, g in zip(states, gs)],
                                 "ll_rounds")
            for st, yh in zip(states, y_hats):
                st.r = st.r + (p / beta) * (avg - yh)
                st.y = avg
            cnt.ll_projections += 1
        else:
            for st, yh in zip(states, y_hats):
                st.y = yh
    cnt.g_grad_samples += cfg.S * cfg.ll_batch


def _init_states(problem, seed) -> list[ClientState]:
    x0, y0 = problem.initial_point(seed)
    xs, ys = problem.split(x0), problem.split(y0)
    return [ClientState(m, xs[m].copy(), ys[m].copy(), np.zeros(problem.d)) for m in range(problem.M)]


def _lifted(problem, states, attr):
    return problem.join([getattr(st, attr) for st in states])


@reports_round
def run_fed_eaipod(problem: FederatedQuadraticProblem, cfg: SolverConfig, prog: Progress) -> tuple[RunTrace, CommLog]:
    """Federated E-AiPOD; ``p = T = delta = 1`` is federated AiPOD."""
    _require_consensus(problem)
    seed = cfg.master_seed
    _check_steps(problem, cfg)
    ncfg = cfg.neumann(problem)
    trace = _new_trace(problem, cfg, seed)
    trace.metadata["federated"] = dict(FED_CONVENTIONS)
    tr = Tracer(problem, cfg, trace)
    states = _init_states(problem, seed)
    log = CommLog()
    server = _Server(log)
    cnt = Counters()
    K = cfg.n_outer
    if K == 0:
        tr.emit(0, _lifted(problem, states, "x"), _lifted(problem, states, "y"), cnt, comm=log.as_columns())
    for k in prog.rounds(K):
        draws = RoundDraws(seed, k)
        _fed_lower(problem, states, cfg, draws, server, cnt)
        xs = [st.x for st in states]
        ys = [st.y for st in states]
        ws, wlog, depth = fed_w_hvp(problem.clients, xs, ys, ncfg, draws)
        log += wlog
        local = []
        for c, st, w in zip(problem.clients, states, ws):
            xt = st.x
            for t in range(cfg.T):
                xt = xt - cfg.alpha * (c.grad_x_f(xt, st.y, draws.xi(Slot.UPPER, t)) + w)
            local.append(xt)
        avg = server.average(local, "ul_rounds")
        cnt.f_grad_samples += cfg.T
        cnt.g_hess_samples += depth + 1
        cnt.ul_implicit_projections += depth
        cnt.ul_explicit_projections += 1
        if tr.due(k):
            tr.emit(k, problem.join(xs), problem.join(ys), cnt, comm=log.as_columns())
        for st in states:
            st.x = avg if cfg.delta == 1.0 else (1.0 - cfg.delta) * st.x + cfg.delta * avg
        tr.keep(_lifted(problem, states, "x"), _lifted(problem, states, "y"))
    trace.final = IterateState(_lifted(problem, states, "x"), _lifted(problem, states, "y"),
                               _lifted(problem, states, "r"), K, cnt)
    trace.metadata["comm"] = vars(log).copy()
    return trace, log


def _fed_medium(problem, states, cfg: SolverConfig, draws, server: _Server, cnt: Counters):
    rho, q = cfg.rho, cfg.q
    lag = 1.0 / q - 1.0
    for st in states:
        st.u = np.zeros(problem.d)
        st.e = np.zeros(problem.d)
    for n in range(cfg.medium_steps):
        xi = draws.xi(Slot.MEDIUM, n)
        phi = draws.phi(Slot.MEDIUM, n)
        gfs = [c.grad_y_f(st.x, st.y, xi) for c, st in zip(problem.clients, states)]
        hvs = [c.hvp_yy_g(st.x, st.y, st.u, phi) for c, st in zip(problem.clients, states)]
        u_hats = [st.u - rho * (gf + hv - st.e) for st, gf, hv in zip(states, gfs, hvs)]
        if draws.coin(Stream.COIN_ML, n, q):
            avg = server.average([st.u - rho * (gf + hv + lag * st.e)
                                  for st, gf, hv in zip(states, gfs, hvs)], "ml_rounds")
            for st, uh in zip(states, u_hats):
                st.e = st.e + (q / rho) * (avg - uh)
                st.u = avg
            cnt.ul_implicit_projections += 1
        else:
            for st, uh in zip(states, u_hats):
                st.u = uh
    cnt.f_grad_samples += cfg.medium_steps
    cnt.g_hess_samples += cfg.medium_steps


@reports_round
def run_fed_e2aipod(problem: FederatedQuadraticProblem, cfg: SolverConfig, prog: Progress) -> tuple[RunTrace, CommLog]:
    _require_consensus(problem)
    seed = cfg.master_seed
    _check_steps(problem, cfg)
    trace = _new_trace(problem, cfg, seed)
    trace.metadata["federated"] = dict(FED_CONVENTIONS)
    tr = Tracer(problem, cfg, trace)
    states = _init_states(problem, seed)
    log = CommLog()
    server = _Server(log)
    cnt = Counters()
    K = cfg.n_outer
    if K == 0:
        x = _lifted(problem, states, "x")
        tr.emit(0, x, _lifted(problem, states, "y"), cnt, comm=log.as_columns())
    for k in prog.rounds(K):
        draws = RoundDraws(seed, k)
        _fed_lower(problem, states, cfg, draws, server, cnt)
        _fed_medium(problem, states, cfg, draws, server, cnt)
        x_lift = _lifted(problem, states, "x")
        y_lift = _lifted(problem, states, "y")
        steps = [st.x - cfg.alpha * (c.grad_x_f(st.x, st.y, draws.xi(Slot.UPPER, 0))
                                     + c.xy_g_matvec(st.x, st.y, st.u, draws.phi(Slot.UPPER, 0)))
                 for c, st in zip(problem.clients, states)]
        cnt.f_grad_samples += 1
        cnt.g_hess_samples += 1
        if k % cfg.T == 0:
            avg = server.average(steps, "ul_rounds")
            steps = [avg] * len(states)
            cnt.ul_explicit_projections += 1
        if tr.due(k):
            tr.emit(k, problem.upper.project(x_lift), y_lift, cnt, x_lower=x_lift, comm=log.as_columns())
        for st, xn in zip(states, steps):
            st.x = xn
        tr.keep(_lifted(problem, states, "x"), _lifted(problem, states, "y"))
    trace.final = IterateState(_lifted(problem, states, "x"), _lifted(problem, states, "y"),
                               _lifted(problem, states, "r"), K, cnt)
    trace.metadata["comm"] = vars(log).copy()
    return trace, log
