"""Entropic Wasserstein-2 between point clouds (log-domain Sinkhorn) and its gradient."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    debiased: bool = True
    # geometric annealing of epsilon from the cost diameter; None disables it
    eps_scaling: float | None = 0.5
    # finish with damped Newton steps on the semi-dual when Sinkhorn stalls
    newton: bool = True
    newton_max_n: int = 1000

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.eps_scaling is not None and not 0 < self.eps_scaling < 1:
            raise ValueError("eps_scaling must lie in (0, 1)")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    u: np.ndarray
    v: np.ndarray
    cost: float  # <C, coupling>
    dual: float  # regularized objective <a, u> + <b, v>
    converged: bool
    n_iters: int
    violation: float
    self_plans: dict = field(default_factory=dict)  # debiasing terms: "x", "y"


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    C = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(C, 0.0)


def _softmin_rows(M: np.ndarray, eps: float) -> np.ndarray:
    """-eps * log sum_j exp(-M_ij / eps), stabilized."""
    S = -M / eps
    mx = S.max(axis=1)
    return -eps * (mx + np.log(np.exp(S - mx[:, None]).sum(axis=1)))


def _eps_schedule(C: np.ndarray, cfg: SinkhornConfig) -> list[float]:
    if cfg.eps_scaling is None:
        return []
    eps = max(float(C.max()), cfg.epsilon)
    out = []
    while eps > cfg.epsilon:
        out.append(eps)
        eps *= cfg.eps_scaling
    return out


def _row_violation(u: np.ndarray, new: np.ndarray, eps: float) -> float:
    # row sums of the current plan are a_i exp((u_i - new_i) / eps)
    return float(np.max(np.abs(np.expm1((u - new) / eps)))) / u.size


def _c_transform(C: np.ndarray, u: np.ndarray, eps: float) -> np.ndarray:
    return _softmin_rows(C.T - u[None, :] + eps * np.log(C.shape[0]), eps)


def _newton_semidual(C: np.ndarray, u: np.ndarray, eps: float, tol: float, max_steps: int):
    """Maximize the semi-dual F(u) = <a, u> + <b, v(u)> by damped Newton.

    v(u) is the soft c-transform, so column marginals are exact and the
    gradient a - P 1 is the row-marginal violation.
    """
    n, m = C.shape
    a = np.full(n, 1.0 / n)
    inv_b = float(m)

    def objective(u_):
        v_ = _c_transform(C, u_, eps)
        return u_.mean() + v_.mean(), v_

    F, v = objective(u)
    steps, viol, prev = 0, np.inf, np.inf
    target = tol * 1e-4  # quadratic convergence makes the extra digits nearly free
    ones = np.full((n, n), 1.0 / n)
    while steps < max_steps:
        P = np.exp((u[:, None] + v[None, :] - C) / eps) / (n * m)
        r = P.sum(axis=1)
        grad = a - r
        viol = float(np.max(np.abs(grad)))
        if viol < target or (viol < tol and viol > 0.25 * prev):
            break
        prev = viol
        steps += 1
        H = (np.diag(r) - inv_b * (P @ P.T)) / eps + ones
        try:
            delta = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-6:
            F_new, v_new = objective(u + t * delta)
            if F_new >= F - 1e-15 * abs(F):
                break
            t *= 0.5
        else:
            break
        u, v, F = u + t * delta, v_new, F_new
    return u, v, steps, viol


def sinkhorn_plan(C: np.ndarray, cfg: SinkhornConfig, symmetric: bool = False) -> TransportPlan:
    """Entropic OT between uniform measures for cost matrix ``C``.

    Potentials ``u, v`` parametrize the plan as a_i b_j exp((u_i + v_j - C_ij) / eps).
    ``symmetric`` uses the averaged fixed-point update valid when C = C.T and
    both marginals coincide. Iterations of every kind count toward ``max_iters``.
    """
    n, m = C.shape
    loga, logb = -np.log(n), -np.log(m)
    u, v = np.zeros(n), np.zeros(m)
    eps = cfg.epsilon
    for e in _eps_schedule(C, cfg):
        if symmetric:
            u = 0.5 * (u + _softmin_rows(C - u[None, :] - e * loga, e))
        else:
            u = _softmin_rows(C - v[None, :] - e * logb, e)
            v = _softmin_rows(C.T - u[None, :] - e * loga, e)

    use_newton = cfg.newton and max(n, m) <= cfg.newton_max_n
    it, converged, violation = 0, False, np.inf

    def sinkhorn_loop(u, v, handoff):
        # handoff: stop early once every row holds >= 90% of its mass
        nonlocal it, converged, violation
        while it < cfg.max_iters:
            it += 1
            if symmetric:
                new = _softmin_rows(C - u[None, :] - eps * loga, eps)
                violation = _row_violation(u, new, eps)
                u = 0.5 * (u + new)
            else:
                new = _softmin_rows(C - v[None, :] - eps * logb, eps)
                violation = _row_violation(u, new, eps)
                u = new
                v = _softmin_rows(C.T - u[None, :] - eps * loga, eps)
            if violation < cfg.tol:
                converged = True
                break
            if handoff and violation * n < 0.1:
                break
        return u, (u.copy() if symmetric else v)

    u, v = sinkhorn_loop(u, v, handoff=use_newton)
    if not converged and use_newton and it < cfg.max_iters:
        u_n, v_n, steps, viol = _newton_semidual(C, u, eps, cfg.tol, cfg.max_iters - it)
        it += steps
        if viol < cfg.tol:
            u, v, violation, converged = u_n, v_n, viol, True
        elif viol < violation:
            u, v, violation = u_n, v_n, viol
            symmetric = False  # u, v are no longer tied
        if not converged:
            u, v = sinkhorn_loop(u, v, handoff=False)
    P = np.exp((u[:, None] + v[None, :] - C) / eps + loga + logb)
    if not converged:
        log.debug("sinkhorn did not converge: violation %.3g after %d iterations", violation, it)
    return TransportPlan(P, u, v, float((P * C).sum()), float(u.mean() + v.mean()),
                         converged, it, violation)


def _check_clouds(X, Y) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] < 1 or Y.shape[0] < 1:
        raise ValueError("point clouds must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("point clouds must be finite")
    return X, Y


def sinkhorn_w2(X, Y, cfg: SinkhornConfig = SinkhornConfig()) -> tuple[float, TransportPlan]:
    """Entropic W2 between the empirical measures of ``X`` and ``Y``.

    Raw mode returns sqrt(<C, plan>). Debiased mode returns the square root of
    the Sinkhorn divergence OT(X,Y) - OT(X,X)/2 - OT(Y,Y)/2, where OT is the
    regularized objective value; that choice makes the envelope gradient exact.
    """
    X, Y = _check_clouds(X, Y)
    plan = sinkhorn_plan(sq_dists(X, Y), cfg)
    if not cfg.debiased:
        return float(np.sqrt(max(plan.cost, 0.0))), plan
    px = sinkhorn_plan(sq_dists(X, X), cfg, symmetric=True)
    py = sinkhorn_plan(sq_dists(Y, Y), cfg, symmetric=True)
    plan.self_plans = {"x": px, "y": py}
    plan.converged = plan.converged and px.converged and py.converged
    div = plan.dual - 0.5 * px.dual - 0.5 * py.dual
    return float(np.sqrt(max(div, 0.0))), plan


def _pull(P: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # d/dX of sum_xy |X_x - Y_y|^2 P_xy with P held fixed
    return 2.0 * (X * P.sum(axis=1)[:, None] - P @ Y)


def sinkhorn_grad(X, Y, cfg: SinkhornConfig, plan: TransportPlan) -> np.ndarray:
    """Gradient in ``X`` of the squared distance returned by :func:`sinkhorn_w2`."""
    X, Y = _check_clouds(X, Y)
    if plan.coupling.shape != (X.shape[0], Y.shape[0]):
        raise ValueError(f"stale plan: coupling {plan.coupling.shape} for clouds "
                         f"{X.shape[0]}x{Y.shape[0]}")
    grad = _pull(plan.coupling, X, Y)
    if cfg.debiased:
        px = plan.self_plans.get("x")
        if px is None or px.coupling.shape != (X.shape[0], X.shape[0]):
            raise ValueError("debiased gradient needs the self-transport plan of X")
        grad = grad - _pull(px.coupling, X, X)
    return grad


def exact_w2(X, Y) -> float:
    """Unregularized W2 between equal-size clouds via optimal assignment."""
    X, Y = _check_clouds(X, Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("exact W2 oracle needs equal sample counts")
    C = sq_dists(X, Y)
    rows, cols = linear_sum_assignment(C)
    return float(np.sqrt(C[rows, cols].mean()))
