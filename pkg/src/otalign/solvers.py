"""Discrete optimal transport solvers.

Three routes to a transport plan between histograms: entropic Sinkhorn
scaling (plain or log-domain), proximal-point iterations that converge to
the unregularized optimum, and an exact min-cost-flow oracle for small
instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    InfeasibleMarginalsError,
    InvalidArgumentError,
    NumericInstabilityError,
)

try:
    from . import _kernels
except ImportError:  # numba not installed; numpy fallbacks below
    _kernels = None

__all__ = [
    "SolverConfig",
    "SolverReport",
    "TransportPlan",
    "uniform_histogram",
    "validate_histogram",
    "marginal_residual",
    "plan_support_size",
    "solve",
    "solve_exact",
    "solve_sinkhorn",
    "solve_ipot",
]

# Integer resolution used when the exact solver rounds a problem: mass in
# units of 1e-12 of the total, costs in units of 1e-9.
MASS_UNITS = 10**12
COST_RESOLUTION = 1e-9

# Plain Sinkhorn scaling switches to the log-domain kernel once any entry of
# C / epsilon exceeds this, i.e. once exp(-C/epsilon) risks under/overflow.
LOG_DOMAIN_THRESHOLD = 30.0

# Largest tolerated gap between source and target total mass.
FEASIBILITY_TOL = 1e-6

_METHODS = ("sinkhorn", "ipot", "exact")


def validate_histogram(weights, tol: float = 1e-9) -> np.ndarray:
    """Check that `weights` is a probability histogram and return it as float64.

    Entries must be finite, nonnegative, and sum to 1 within `tol`.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise InvalidArgumentError(f"histogram must be a 1-d array with >= 1 entry, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("histogram entries must be finite")
    if np.any(w < 0):
        raise InvalidArgumentError(f"histogram entries must be nonnegative, min is {w.min()}")
    total = float(w.sum())
    if abs(total - 1.0) > tol:
        raise InvalidArgumentError(f"histogram mass {total!r} is not 1 within {tol}")
    return w


def uniform_histogram(n: int) -> np.ndarray:
    """Uniform histogram of length `n` whose entries sum to exactly 1.0."""
    if n < 1:
        raise InvalidArgumentError(f"histogram length must be >= 1, got {n}")
    w = np.full(n, 1.0 / n)
    # Pin the last entry against the summation numpy actually performs;
    # pairwise accumulation means 1 - w[:-1].sum() alone can land an ulp off.
    for _ in range(4):
        gap = 1.0 - w.sum()
        if gap == 0.0:
            break
        w[-1] += gap
    return w


@dataclass
class SolverConfig:
    """Configuration shared by all solver entry points.

    Defaults mirror the scoring regime used elsewhere in the package:
    proximal-point iterations with beta = 0.5, 20 outer steps, one inner
    scaling step each.  `log_domain` only affects Sinkhorn: "auto" switches
    to log-space kernels when max(C)/epsilon exceeds LOG_DOMAIN_THRESHOLD,
    "always"/"never" force one route.
    """

    method: str = "ipot"
    epsilon: float = 0.1
    beta: float = 0.5
    outer_iterations: int = 20
    inner_iterations: int = 1
    tolerance: float = 1e-9
    log_domain: str = "auto"

    def __post_init__(self):
        if self.method not in _METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}, expected one of {_METHODS}")
        if self.method == "sinkhorn" and not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if self.method == "ipot" and not self.beta > 0:
            raise InvalidArgumentError(f"beta must be positive, got {self.beta}")
        if self.outer_iterations < 1:
            raise InvalidArgumentError(f"outer_iterations must be >= 1, got {self.outer_iterations}")
        if self.inner_iterations < 1:
            raise InvalidArgumentError(f"inner_iterations must be >= 1, got {self.inner_iterations}")
        if self.tolerance < 0:
            raise InvalidArgumentError(f"tolerance must be >= 0, got {self.tolerance}")
        if self.log_domain not in ("auto", "always", "never"):
            raise InvalidArgumentError(f"log_domain must be auto/always/never, got {self.log_domain!r}")


@dataclass
class SolverReport:
    """Outcome of an iterative solve."""

    iterations_run: int
    final_marginal_residual: float
    converged: bool


@dataclass
class TransportPlan:
    """A coupling together with the marginals it was solved against."""

    entries: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray

    def validate(self, tol: float = 1e-6) -> None:
        """Raise unless entries are nonnegative with marginal residual <= tol."""
        if np.any(self.entries < 0):
            raise InvalidArgumentError(f"plan entries must be nonnegative, min is {self.entries.min()}")
        res = marginal_residual(self.entries, self.source_marginal, self.target_marginal)
        if res > tol:
            raise InvalidArgumentError(f"plan marginal residual {res:.3e} exceeds {tol}")


def _plan_entries(plan) -> np.ndarray:
    entries = plan.entries if isinstance(plan, TransportPlan) else plan
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2:
        raise InvalidArgumentError(f"plan must be a 2-d array, got shape {entries.shape}")
    return entries


def marginal_residual(plan, mu, nu) -> float:
    """Largest absolute row/column-sum deviation of `plan` from (mu, nu)."""
    t = _plan_entries(plan)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if t.shape != (mu.size, nu.size):
        raise InvalidArgumentError(f"plan shape {t.shape} does not match marginals ({mu.size}, {nu.size})")
    row = np.abs(t.sum(axis=1) - mu).max()
    col = np.abs(t.sum(axis=0) - nu).max()
    return float(max(row, col))


def plan_support_size(plan, threshold: float = 1e-8) -> int:
    """Number of plan entries strictly above `threshold`."""
    if threshold < 0:
        raise InvalidArgumentError(f"threshold must be >= 0, got {threshold}")
    return int(np.count_nonzero(_plan_entries(plan) > threshold))


def _check_problem(C, mu, nu):
    C = np.asarray(C, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if C.ndim != 2:
        raise InvalidArgumentError(f"cost matrix must be 2-d, got shape {C.shape}")
    if mu.ndim != 1 or nu.ndim != 1:
        raise InvalidArgumentError("marginals must be 1-d arrays")
    if C.shape != (mu.size, nu.size):
        raise InvalidArgumentError(f"cost shape {C.shape} does not match marginals ({mu.size}, {nu.size})")
    if not np.all(np.isfinite(C)):
        raise InvalidArgumentError("cost matrix entries must be finite")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(nu))):
        raise InvalidArgumentError("marginal entries must be finite")
    if np.any(mu < 0) or np.any(nu < 0):
        raise InvalidArgumentError("marginal entries must be nonnegative")
    gap = abs(float(mu.sum()) - float(nu.sum()))
    if gap > FEASIBILITY_TOL:
        raise InfeasibleMarginalsError(f"total masses differ by {gap:.3e} (limit {FEASIBILITY_TOL})")
    return C, mu, nu


def _forced_plan(mu: np.ndarray, nu: np.ndarray) -> np.ndarray | None:
    # With a single row or column the marginals pin every entry.
    if mu.size == 1:
        return nu[np.newaxis, :].copy()
    if nu.size == 1:
        return mu[:, np.newaxis].copy()
    return None


# ---------------------------------------------------------------------------
# Exact solver: successive shortest paths on the bipartite flow network.
# ---------------------------------------------------------------------------


def _integerize(weights: np.ndarray, units: int) -> np.ndarray:
    scaled = np.floor(weights / weights.sum() * units + 0.5).astype(np.int64)
    # Rounding can leave a small deficit; absorb it into the largest entry.
    scaled[int(np.argmax(scaled))] += units - int(scaled.sum())
    return scaled


def _min_cost_flow_plan(C: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    K, M = C.shape
    supply = _integerize(mu, MASS_UNITS).astype(np.float64)
    demand = _integerize(nu, MASS_UNITS).astype(np.float64)
    # Integer costs held in float64: path sums stay far below 2**53 so the
    # arithmetic is exact.
    cost = np.floor(C / COST_RESOLUTION + 0.5)

    # Nodes: 0..K-1 sources, K..K+M-1 sinks, then super source and sink.
    n_nodes = K + M + 2
    src = K + M
    snk = K + M + 1
    sources = np.arange(K)
    sinks = np.arange(K, K + M)

    flow = np.zeros((K, M), dtype=np.float64)
    pot = np.zeros(n_nodes)

    # Initial potentials from a one-pass forward relaxation; keeps reduced
    # costs nonnegative even when C has negative entries.
    pot[sinks] = cost.min(axis=0)
    pot[snk] = float(pot[sinks].min())

    remaining = float(supply.sum())
    guard = 4 * K * M + 16 * (K + M) + 64
    rounds = 0
    while remaining > 0:
        rounds += 1
        if rounds > guard:
            raise NumericInstabilityError("min-cost-flow failed to terminate; cost scale too extreme")
        dist = np.full(n_nodes, np.inf)
        dist[src] = 0.0
        pred = np.full(n_nodes, -1, dtype=np.int64)
        done = np.zeros(n_nodes, dtype=bool)
        while True:
            open_dist = np.where(done, np.inf, dist)
            u = int(np.argmin(open_dist))
            if not np.isfinite(open_dist[u]):
                raise NumericInstabilityError("augmenting path search exhausted; instance infeasible after rounding")
            done[u] = True
            if u == snk:
                break
            du = dist[u]
            if u == src:
                active = supply > 0
                cand = du + pot[src] - pot[sources]
                upd = active & (cand < dist[sources]) & ~done[sources]
                dist[sources[upd]] = cand[upd]
                pred[sources[upd]] = src
            elif u < K:
                cand = du + cost[u] + pot[u] - pot[sinks]
                upd = (cand < dist[sinks]) & ~done[sinks]
                dist[sinks[upd]] = cand[upd]
                pred[sinks[upd]] = u
            elif u < K + M:
                j = u - K
                if demand[j] > 0:
                    cand = du + pot[u] - pot[snk]
                    if cand < dist[snk]:
                        dist[snk] = cand
                        pred[snk] = u
                back = flow[:, j] > 0
                cand = du - cost[:, j] + pot[u] - pot[sources]
                upd = back & (cand < dist[sources]) & ~done[sources]
                dist[sources[upd]] = cand[upd]
                pred[sources[upd]] = u
        # Unreachable nodes (dist = inf) must also advance by the target
        # distance or their stale potentials break dual feasibility later.
        pot += np.minimum(dist, dist[snk])

        # Walk the path back from the sink, collecting arcs and bottleneck.
        path = []
        v = snk
        while v != src:
            u = int(pred[v])
            path.append((u, v))
            v = u
            if len(path) > n_nodes:
                raise NumericInstabilityError("augmenting path reconstruction cycled; dual potentials corrupt")
        path.reverse()
        bottleneck = np.inf
        for u, v in path:
            if u == src:
                bottleneck = min(bottleneck, supply[v])
            elif v == snk:
                bottleneck = min(bottleneck, demand[u - K])
            elif u < K:
                continue
            else:
                bottleneck = min(bottleneck, flow[v, u - K])
        for u, v in path:
            if u == src:
                supply[v] -= bottleneck
            elif v == snk:
                demand[u - K] -= bottleneck
            elif u < K:
                flow[u, v - K] += bottleneck
            else:
                flow[v, u - K] -= bottleneck
        remaining -= bottleneck

    scale = 0.5 * (mu.sum() + nu.sum()) / MASS_UNITS
    return flow * scale


def solve_exact(C, mu, nu) -> tuple[TransportPlan, float]:
    """Optimal transport plan and cost via min-cost flow.

    The instance is rounded to integers (mass at 1e-12 of the total, cost at
    1e-9 resolution) and solved with successive shortest paths; ties are
    broken toward the lowest node index, so the returned vertex is
    deterministic.  The plan of a K x M instance has at most K + M - 1
    nonzero entries.
    """
    C, mu, nu = _check_problem(C, mu, nu)
    forced = _forced_plan(mu, nu)
    entries = forced if forced is not None else _min_cost_flow_plan(C, mu, nu)
    distance = float(np.sum(entries * C))
    return TransportPlan(entries, mu, nu), distance


# ---------------------------------------------------------------------------
# Sinkhorn scaling, plain and log-domain.
# ---------------------------------------------------------------------------


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - np.expand_dims(safe, axis)).sum(axis=axis)
    with np.errstate(divide="ignore"):
        return safe + np.log(s)


def _sinkhorn_scaling(C, mu, nu, epsilon, max_iter, tol):
    with np.errstate(over="ignore"):
        kern = np.exp(-C / epsilon)
    v = np.ones_like(nu)
    kv = kern @ v
    iterations = 0
    for iterations in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = mu / kv
            v = nu / (kern.T @ u)
            kv = kern @ v
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise NumericInstabilityError(
                "sinkhorn scaling factors left float range; increase epsilon or use the log-domain kernel"
            )
        # Column sums match nu exactly after the v-update, so the row error
        # is the whole residual.
        residual = float(np.abs(u * kv - mu).max())
        if residual <= tol:
            break
    plan = u[:, np.newaxis] * kern * v[np.newaxis, :]
    return plan, iterations


def _sinkhorn_log(C, mu, nu, epsilon, max_iter, tol):
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    scaled = C / epsilon
    if _kernels is not None:
        plan, iterations, _ = _kernels.sinkhorn_log(scaled, log_mu, log_nu, mu, max_iter, tol)
        return plan, iterations
    psi = np.zeros_like(nu)
    lse_rows = _logsumexp(psi[np.newaxis, :] - scaled, axis=1)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        phi = log_mu - lse_rows
        psi = log_nu - _logsumexp(phi[:, np.newaxis] - scaled, axis=0)
        lse_rows = _logsumexp(psi[np.newaxis, :] - scaled, axis=1)
        if np.any(np.isnan(psi)) or np.any(np.isnan(phi)):
            raise NumericInstabilityError("log-domain sinkhorn potentials became NaN")
        residual = float(np.abs(np.exp(phi + lse_rows) - mu).max())
        if residual <= tol:
            break
    plan = np.exp(phi[:, np.newaxis] + psi[np.newaxis, :] - scaled)
    return plan, iterations


def solve_sinkhorn(C, mu, nu, config: SolverConfig) -> tuple[TransportPlan, float, SolverReport]:
    """Entropic-regularized transport via Sinkhorn scaling.

    Runs at most `config.outer_iterations` scaling steps, stopping early
    once the marginal residual drops to `config.tolerance`.  The reported
    distance is <T, C> for the entropic plan, which upper-bounds the
    unregularized optimum.
    """
    if config.method != "sinkhorn":
        raise InvalidArgumentError(f"config.method is {config.method!r}, expected 'sinkhorn'")
    C, mu, nu = _check_problem(C, mu, nu)
    forced = _forced_plan(mu, nu)
    if forced is not None:
        residual = marginal_residual(forced, mu, nu)
        distance = float(np.sum(forced * C))
        return TransportPlan(forced, mu, nu), distance, SolverReport(0, residual, True)
    use_log = config.log_domain == "always" or (
        config.log_domain == "auto" and float(np.abs(C).max()) / config.epsilon > LOG_DOMAIN_THRESHOLD
    )
    if use_log:
        entries, iterations = _sinkhorn_log(C, mu, nu, config.epsilon, config.outer_iterations, config.tolerance)
    else:
        entries, iterations = _sinkhorn_scaling(C, mu, nu, config.epsilon, config.outer_iterations, config.tolerance)
    if not np.all(np.isfinite(entries)):
        raise NumericInstabilityError("sinkhorn plan contains non-finite entries; increase epsilon")
    residual = marginal_residual(entries, mu, nu)
    distance = float(np.sum(entries * C))
    report = SolverReport(iterations, residual, residual <= config.tolerance)
    return TransportPlan(entries, mu, nu), distance, report


# ---------------------------------------------------------------------------
# Proximal-point iterations (converge to the unregularized optimum).
# ---------------------------------------------------------------------------


def _ipot_entries(C, mu, nu, beta, outer, inner, tol):
    # Overflow to inf is tolerated here; the iteration detects the resulting
    # non-finite plan and raises.
    with np.errstate(over="ignore"):
        kern = np.exp(-C / beta)
    if _kernels is not None:
        plan, iterations, residual = _kernels.ipot(kern, mu, nu, outer, inner, tol)
        if iterations < 0:
            raise NumericInstabilityError(
                "proximal-point plan left float range; increase beta or reduce the cost scale"
            )
        return plan, iterations, residual
    plan = np.outer(mu, nu)
    b = np.ones_like(nu)
    iterations = 0
    for iterations in range(1, outer + 1):
        q = kern * plan
        prev = plan
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for _ in range(inner):
                # np.where guards 0/0 for zero-mass marginal entries.
                a = np.where(mu > 0, mu / (q @ b), 0.0)
                b = np.where(nu > 0, nu / (q.T @ a), 0.0)
        plan = a[:, np.newaxis] * q * b[np.newaxis, :]
        if not np.all(np.isfinite(plan)):
            raise NumericInstabilityError(
                "proximal-point plan left float range; increase beta or reduce the cost scale"
            )
        # A small marginal residual alone cannot certify convergence here: on
        # symmetric instances the first iterate already has exact marginals
        # while the outer sequence is still far from optimal.  Require the
        # fixed-point update to have stalled too.
        residual = float(np.abs(plan.sum(axis=1) - mu).max())
        change = float(np.abs(plan - prev).max())
        if max(residual, change) <= tol:
            break
    return plan, iterations, residual


def solve_ipot(C, mu, nu, config: SolverConfig) -> tuple[TransportPlan, float, SolverReport]:
    """Unregularized transport via proximal-point iterations.

    Each outer step applies `config.inner_iterations` Sinkhorn updates to
    the kernel exp(-C/beta) * plan with warm-started scaling vectors; the
    iterates approach the true optimal plan rather than an entropic
    smoothing of it.
    """
    if config.method != "ipot":
        raise InvalidArgumentError(f"config.method is {config.method!r}, expected 'ipot'")
    C, mu, nu = _check_problem(C, mu, nu)
    forced = _forced_plan(mu, nu)
    if forced is not None:
        residual = marginal_residual(forced, mu, nu)
        distance = float(np.sum(forced * C))
        return TransportPlan(forced, mu, nu), distance, SolverReport(0, residual, True)
    entries, iterations, _ = _ipot_entries(
        C, mu, nu, config.beta, config.outer_iterations, config.inner_iterations, config.tolerance
    )
    residual = marginal_residual(entries, mu, nu)
    distance = float(np.sum(entries * C))
    report = SolverReport(iterations, residual, residual <= config.tolerance)
    return TransportPlan(entries, mu, nu), distance, report


def solve(C, mu, nu, config: SolverConfig | None = None) -> tuple[TransportPlan, float, SolverReport]:
    """Dispatch on `config.method`; exact solves get a zero-iteration report."""
    config = config if config is not None else SolverConfig()
    if config.method == "exact":
        plan, distance = solve_exact(C, mu, nu)
        residual = marginal_residual(plan.entries, plan.source_marginal, plan.target_marginal)
        return plan, distance, SolverReport(0, residual, True)
    if config.method == "sinkhorn":
        return solve_sinkhorn(C, mu, nu, config)
    return solve_ipot(C, mu, nu, config)
