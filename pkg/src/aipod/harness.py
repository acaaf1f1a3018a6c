"""Experiment configuration, execution, CSV traces and self-checks."""
from __future__ import annotations

import csv
import io
import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import CapabilityError, InputError
from .federated import FED_CONVENTIONS, run_fed_e2aipod, run_fed_eaipod
from .geometry import weighted_norm_sq
from .hypergrad import (
    NeumannConfig,
    closed_form_ustar,
    estimate_w,
    exact_implicit_jacobian,
    exact_upper_gradient,
    exact_w,
)
from .problems import NoiseModel, ProblemSpec, build_federated_quadratic, build_problem
from .solvers import RunTrace, SolverConfig, e2aipod_medium, run_solver, run_e2aipod, run_eaipod

CSV_COLUMNS = (
    "run_id", "variant", "seed", "k", "error_inst", "error_running_avg", "stationarity",
    "ll_proj", "ul_proj_explicit", "ul_proj_implicit", "g_grad_samples", "g_hess_samples",
    "f_grad_samples", "ll_comm", "ul_comm", "ml_comm", "wall_ms",
)

_HARNESS_KEYS = {"problem", "repeats", "output_dir", "variants", "federated"}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    repeats: int = 1
    output_dir: str = "runs"
    variants: tuple[str, ...] | None = None
    federated: bool = False

    def __post_init__(self):
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")

    @property
    def variant_list(self) -> tuple[str, ...]:
        return self.variants if self.variants else (self.solver.variant,)

    def seeds(self) -> list[int]:
        return [self.solver.master_seed + i for i in range(self.repeats)]


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment document; missing keys take the defaults."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed config: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError("config must be a JSON object")
    solver_keys = SolverConfig.field_names()
    unknown = sorted(set(data) - solver_keys - _HARNESS_KEYS)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    problem = ProblemSpec.from_dict(data.get("problem", {}))
    try:
        solver = SolverConfig(**{k: v for k, v in data.items() if k in solver_keys})
    except TypeError as exc:
        raise InputError(str(exc)) from exc
    variants = data.get("variants")
    if variants is not None:
        variants = tuple(variants)
        for v in variants:
            replace(solver, variant=v)  # validates the name
    return ExperimentConfig(problem, solver, int(data.get("repeats", 1)),
                            str(data.get("output_dir", "runs")), variants,
                            bool(data.get("federated", False)))


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"problem": cfg.problem.to_dict()}
    out.update(cfg.solver.to_dict())
    out["repeats"] = cfg.repeats
    out["output_dir"] = cfg.output_dir
    out["federated"] = cfg.federated
    if cfg.variants is not None:
        out["variants"] = list(cfg.variants)
    return out


def emit_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# running


def _num(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def trace_to_csv(trace: RunTrace, run_id: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    variant = trace.metadata["variant"]
    seed = trace.metadata["seed"]
    for r in trace.rows:
        c = r.counters
        w.writerow([run_id, variant, seed, r.k, _num(r.error_inst), _num(r.error_running_avg),
                    _num(r.stationarity), c.ll_projections, c.ul_explicit_projections,
                    c.ul_implicit_projections, c.g_grad_samples, c.g_hess_samples,
                    c.f_grad_samples, r.ll_comm, r.ul_comm, r.ml_comm, _num(r.wall_ms)])
    return buf.getvalue()


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def execute(spec: ProblemSpec, solver: SolverConfig, federated: bool = False) -> RunTrace:
    if federated:
        require_consensus_kind(spec)
    problem = build_problem(spec)
    if not federated:
        return run_solver(problem, solver)
    if solver.variant == "e2-aipod":
        return run_fed_e2aipod(problem, solver)[0]
    if solver.variant == "aipod":
        solver = replace(solver, p=1.0, T=1, delta=1.0)
    return run_fed_eaipod(problem, solver)[0]


def _task(args):
    run_id, spec, solver, federated, param = args
    trace = execute(spec, solver, federated)
    final = trace.final_row
    c = final.counters
    record = {
        "run_id": run_id,
        "variant": solver.variant,
        "seed": solver.master_seed,
        "param": param,
        "K": solver.n_outer,
        "neumann_depth": trace.metadata["neumann_depth"],
        "final_error_running_avg": final.error_running_avg,
        "final_stationarity": final.stationarity,
        "ll_projections": c.ll_projections,
        "ul_explicit_projections": c.ul_explicit_projections,
        "ul_implicit_projections": c.ul_implicit_projections,
        "ll_comm": final.ll_comm,
        "ul_comm": final.ul_comm,
        "ml_comm": final.ml_comm,
    }
    return run_id, trace_to_csv(trace, run_id), record


def _fmt_param(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _tasks(cfg: ExperimentConfig, param: str | None, values: Iterable | None):
    grid = [(None, cfg.solver)] if param is None else \
        [(v, replace(cfg.solver, **{param: v})) for v in values]
    for value, base in grid:
        for variant in cfg.variant_list:
            for seed in cfg.seeds():
                solver = replace(base, variant=variant, master_seed=seed)
                run_id = f"{variant}_seed{seed}"
                if param is not None:
                    run_id = f"{variant}_{param}{_fmt_param(value)}_seed{seed}"
                yield run_id, cfg.problem, solver, cfg.federated, value


def _summarise(cfg, records, param):
    groups: dict[str, list[dict]] = {}
    for rec in records:
        key = rec["variant"] if param is None else f"{rec['variant']}_{param}{_fmt_param(rec['param'])}"
        groups.setdefault(key, []).append(rec)
    notes: dict[str, Any] = {"constraint_ranks": [cfg.problem.rank_a, cfg.problem.rank_b]}
    if cfg.federated:
        notes["federated"] = dict(FED_CONVENTIONS)
    medians = {}
    for key, recs in groups.items():
        medians[key] = {
            name: statistics.median(r[name] for r in recs)
            for name in ("final_error_running_avg", "ll_projections", "ul_explicit_projections",
                         "ul_implicit_projections", "ll_comm", "ul_comm", "ml_comm")
        }
        medians[key]["runs"] = len(recs)
    return {
        "config": config_to_dict(cfg),
        "sweep_param": param,
        "runs": records,
        "medians": medians,
        "notes": notes,
    }


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, out: str | os.PathLike | None = None,
                   param: str | None = None, values: Iterable | None = None) -> dict[str, Any]:
    """Run every (variant, seed[, value]) combination and write CSVs plus ``summary.json``.

    Any solver failure propagates as :class:`aipod.errors.RunError`.
    """
    if param is not None and param not in SolverConfig.field_names():
        raise InputError(f"cannot sweep unknown solver parameter {param!r}")
    out_dir = Path(out if out is not None else cfg.output_dir)
    tasks = list(_tasks(cfg, param, values))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    out_dir.mkdir(parents=True, exist_ok=True)
    for run_id, text, _ in results:
        with open(out_dir / f"{run_id}.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    summary = _summarise(cfg, [r for _, _, r in results], param)
    with open(out_dir / "summary.json", "w", encoding="utf-8", newline="") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def sweep(cfg: ExperimentConfig, param: str, values: Iterable, jobs: int = 1,
          out: str | os.PathLike | None = None) -> dict[str, Any]:
    return run_experiment(cfg, jobs, out, param, list(values))


# ---------------------------------------------------------------------------
# self-checks


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: error={self.error:.3e} tol={self.tol:.0e}"


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _fd_gradient(fun, x, h=1e-5):
    return np.array([(fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def _fd_jacobian(fun, x, h=1e-5):
    return np.column_stack([(fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def _neumann_sum_matrix(problem, x, y, cfg: NeumannConfig):
    """``V2 [(c/l) sum_{n<N} (I - (c/l) R)^n] V2^T`` built as a dense matrix."""
    V2 = problem.lower_dec.null_basis
    R = V2.T @ problem.hess_yy_g(x, y) @ V2
    D = np.eye(R.shape[0]) - cfg.step * R
    acc = np.zeros_like(D)
    term = np.eye(R.shape[0])
    for _ in range(cfg.depth_cap):
        acc += term
        term = term @ D
    return V2 @ (cfg.step * acc) @ V2.T


def _leading_matrix(problem, x, y):
    Jh_t_Ap_t = problem.jac_h(x).T @ problem.lower_dec.pinv.T
    return Jh_t_Ap_t @ problem.hess_yy_g(x, y) - problem.hess_xy_g(x, y), Jh_t_Ap_t


def verify(kind: str = "synthetic", d: int = 12, seed: int = 0, corrupt_xy: bool = False,
           rank: int | None = None) -> list[CheckResult]:
    """Run the noiseless oracle checks on a small instance."""
    if d > 20:
        raise InputError("verify is meant for d <= 20")
    if d < 2:
        raise InputError("verify needs d >= 2")
    r = rank if rank is not None else max(1, d // 2 - 1)
    if kind == "synthetic":
        spec = ProblemSpec("synthetic", d, seed, r, r, NoiseModel.zero())
    elif kind == "quadratic":
        spec = ProblemSpec("quadratic", d, seed, r, 0 if rank == 0 else r, NoiseModel.zero())
    else:
        raise InputError(f"verify supports kinds 'synthetic' and 'quadratic', not {kind!r}")
    pb = build_problem(spec)
    if corrupt_xy:
        base = pb._hess_xy_g
        pb._hess_xy_g = lambda x, y: base(x, y) + 0.1
        pb.xy_g_matvec = lambda x, y, v, token=None: pb.hess_xy_g(x, y, token) @ v
    rng = np.random.default_rng(seed + 1)
    x = pb.upper.project(rng.standard_normal(d))
    y = pb.exact_lower_solution(x)
    results = []

    F = lambda z: pb.f(z, pb.exact_lower_solution(z))  # noqa: E731
    results.append(CheckResult("hypergradient vs finite differences",
                               _rel(exact_upper_gradient(pb, x), _fd_gradient(F, x)), 1e-5))
    results.append(CheckResult("implicit Jacobian vs finite differences",
                               _rel(exact_implicit_jacobian(pb, x), _fd_jacobian(pb.exact_lower_solution, x)),
                               1e-5))

    ncfg = NeumannConfig(1.0, 30, pb.metadata.l_g1)
    mean_w = sum(estimate_w(pb, x, y, ncfg, None, n).value for n in range(ncfg.depth_cap)) / ncfg.depth_cap
    z = pb.grad_y_f(x, y)
    lead, Jh_t_Ap_t = _leading_matrix(pb, x, y)
    trunc = lead @ (_neumann_sum_matrix(pb, x, y, ncfg) @ z) - Jh_t_Ap_t @ z
    results.append(CheckResult("exhaustive Neumann mean vs truncated sum", _rel(mean_w, trunc), 1e-10))
    q = 1.0 - ncfg.c_tilde * pb.metadata.mu_g / pb.metadata.l_g1
    bound = np.linalg.norm(lead, 2) * q ** ncfg.depth_cap / pb.metadata.mu_g * np.linalg.norm(z)
    gap = float(np.linalg.norm(mean_w - exact_w(pb, x, y)))
    results.append(CheckResult("Neumann bias within geometric bound", max(gap - bound, 0.0), 1e-10))

    rho = 0.5 / pb.metadata.l_g1
    u, _ = e2aipod_medium(pb, x, y, rho, 1.0, 400)
    ustar = closed_form_ustar(pb, x, y)
    results.append(CheckResult("medium loop vs closed-form u*", float(np.linalg.norm(u - ustar)), 1e-6))

    Bdec = pb.upper.decomposition
    g = rng.standard_normal(d)
    worst = 0.0
    for lam in (0.1, 1.0, 10.0):
        lhs = np.linalg.norm((x - pb.upper.project(x - lam * g)) / lam) ** 2
        worst = max(worst, abs(lhs - weighted_norm_sq(Bdec, g)) / max(1.0, lhs))
    results.append(CheckResult("projected-gradient identity across step sizes", worst, 1e-10))

    fed = build_federated_quadratic(3, 2, 0.5, seed)
    for variant, fed_run, central in (("e-aipod", run_fed_eaipod, run_eaipod),
                                      ("e2-aipod", run_fed_e2aipod, run_e2aipod)):
        cfg = SolverConfig(variant=variant, K=20, N=3, keep_iterates=True, master_seed=seed)
        tf, _ = fed_run(fed, cfg)
        tc = central(fed, cfg)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(tf.xs + tf.ys, tc.xs + tc.ys))
        results.append(CheckResult(f"federated {variant} equals lifted run", diff, 0.0))
    return results


def require_consensus_kind(spec: ProblemSpec):
    if spec.kind != "federated-quadratic":
        raise CapabilityError("federated runs need problem kind 'federated-quadratic'")
