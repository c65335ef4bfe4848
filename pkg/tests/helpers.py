"""Shared oracles and generators for the test suite.

Everything here is an independent route to a result the package also
computes: an LP solver for transport optima, the northwest-corner rule for
feasible plans, and central finite differences for loss gradients.
"""

import numpy as np
from scipy.optimize import linprog

from otalign import training
from otalign.alignment import cosine_similarity_matrix
from otalign.solvers import plan_support_size, solve_exact, uniform_histogram


def random_instance(rng, k_range=(2, 8), m_range=(2, 8)):
    """Random cost matrix with uniform marginals, per the sweep recipe."""
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    cost = rng.uniform(0.0, 1.0, (k, m))
    return cost, uniform_histogram(k), uniform_histogram(m)


def lp_distance(cost, mu, nu) -> float:
    """Transport optimum via scipy's LP code path, nothing shared with ours."""
    k, m = cost.shape
    rows = []
    for i in range(k):
        row = np.zeros((k, m))
        row[i, :] = 1.0
        rows.append(row.ravel())
    for j in range(m):
        col = np.zeros((k, m))
        col[:, j] = 1.0
        rows.append(col.ravel())
    res = linprog(
        cost.ravel(),
        A_eq=np.array(rows),
        b_eq=np.concatenate([mu, nu]),
        bounds=(0, None),
        method="highs",
    )
    assert res.status == 0, res.message
    return float(res.fun)


def northwest_corner(mu, nu) -> np.ndarray:
    """Feasible (generally suboptimal) plan from the greedy corner rule."""
    supply = np.asarray(mu, dtype=np.float64).copy()
    demand = np.asarray(nu, dtype=np.float64).copy()
    plan = np.zeros((supply.size, demand.size))
    i = j = 0
    while i < supply.size and j < demand.size:
        mass = min(supply[i], demand[j])
        plan[i, j] = mass
        supply[i] -= mass
        demand[j] -= mass
        if supply[i] <= 1e-15:
            i += 1
        if demand[j] <= 1e-15:
            j += 1
    return plan


def random_feasible_plan(rng, mu, nu) -> np.ndarray:
    """Northwest corner on shuffled support, then a marginal-preserving shift."""
    pi = rng.permutation(mu.size)
    pj = rng.permutation(nu.size)
    shuffled = northwest_corner(mu[pi], nu[pj])
    plan = np.zeros_like(shuffled)
    plan[np.ix_(pi, pj)] = shuffled
    # Move delta around a 2x2 rectangle of cells; row and column sums are
    # untouched.
    i1, i2 = rng.choice(mu.size, 2, replace=False)
    j1, j2 = rng.choice(nu.size, 2, replace=False)
    delta = min(plan[i1, j1], plan[i2, j2]) * rng.uniform(0.0, 1.0)
    plan[i1, j1] -= delta
    plan[i2, j2] -= delta
    plan[i1, j2] += delta
    plan[i2, j1] += delta
    return plan


def batch_loss(pairs, params, config) -> float:
    """Loss through the public forward path only; the FD baseline."""
    scores = training.batch_score_matrix(pairs, params, config)
    return training.triplet_loss_hardest(scores, params.margin)


def fd_gradients(pairs, params, config, step=1e-5):
    """Central finite differences over every projection parameter."""
    outputs = []
    for arr in (
        params.image_projection.weights,
        params.image_projection.bias,
        params.text_projection.weights,
        params.text_projection.bias,
    ):
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            plus = batch_loss(pairs, params, config)
            arr[idx] = orig - step
            minus = batch_loss(pairs, params, config)
            arr[idx] = orig
            grad[idx] = (plus - minus) / (2.0 * step)
        outputs.append(grad)
    return outputs


def gradient_rel_error(analytic, numeric) -> float:
    """Worst relative error across the four parameter arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


def _support_mask(cost, mu, nu):
    plan, _ = solve_exact(cost, mu, nu)
    return plan.entries > 1e-8


def plan_is_unique_vertex(sim, perturbation):
    """Nondegenerate optimal vertex that survives a +/-1e-6 cost perturbation
    with the same support pattern; a proxy for uniqueness of the optimum."""
    k, m = sim.shape
    cost = 1.0 - sim
    mu = uniform_histogram(k)
    nu = uniform_histogram(m)
    plan, _ = solve_exact(cost, mu, nu)
    if plan_support_size(plan) != k + m - 1:
        return False
    base = plan.entries > 1e-8
    for sign in (1.0, -1.0):
        if not np.array_equal(base, _support_mask(cost + sign * 1e-6 * perturbation, mu, nu)):
            return False
    return True


def batch_is_smooth(pairs, params, config, margin_floor=1e-3):
    """True when the loss is differentiable at `params` with margin to spare.

    Every hinge term must sit clear of its kink, hardest negatives must win
    by a margin, every column argmax of every pair's similarity must be
    isolated, and (when the OT term is on) every pair's exact plan must be a
    unique nondegenerate vertex.
    """
    scores = training.batch_score_matrix(pairs, params, config)
    diag = np.diag(scores)
    off = scores.copy()
    np.fill_diagonal(off, -np.inf)
    for j in range(scores.shape[0]):
        for violation in (
            off[j].max() - diag[j] + params.margin,
            off[:, j].max() - diag[j] + params.margin,
        ):
            if abs(violation) < margin_floor:
                return False
        # The hardest negative must also be isolated, or FD can switch it.
        for line in (off[j], off[:, j]):
            top2 = np.sort(line[np.isfinite(line)])[-2:]
            if top2.size == 2 and top2[1] - top2[0] < margin_floor:
                return False
    projected = [
        (training.project(f, params.image_projection), training.project(g, params.text_projection))
        for f, g in pairs
    ]
    rng = np.random.default_rng(0)
    for v, _ in projected:
        for _, e in projected:
            sim = cosine_similarity_matrix(v, e)
            top2 = np.sort(sim, axis=0)[-2:, :]
            if sim.shape[0] > 1 and np.any(top2[1] - top2[0] < margin_floor):
                return False
            if params.ot_weight != 0.0:
                perturbation = rng.uniform(-1.0, 1.0, sim.shape)
                if not plan_is_unique_vertex(sim, perturbation):
                    return False
    return True
