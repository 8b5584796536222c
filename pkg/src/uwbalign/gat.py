"""Two-stage estimation of the similarity transform from odometry to world frame.

Stage one lifts the squared-range least-squares problem to an 18-dimensional
quadratically constrained quadratic program and solves it by multi-start
local search (on the feasible set, then an augmented Lagrangian).  Stage two refines ``(t, v, s)`` by damped
Gauss-Newton on the raw ranges and attaches Cramer-Rao standard errors that
decide whether the estimate is accepted.

Lifted state layout (0-based indices)::

    x[0:3]   t
    x[3]     |t|^2
    x[4]     s^2
    x[5:8]   s * R[0, :]
    x[8:11]  s * R[1, :]
    x[11:14] s * R[2, :]
    x[14:17] s * R^T t
    x[17]    1
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from uwbalign import fim as fimlib
from uwbalign.geometry import AffineTransform7, Pose, project_to_so3, random_rotation, rodrigues, skew
from uwbalign.measurement import Dataset, debias_squared_range

logger = logging.getLogger(__name__)

ACCEPT_SIGMA = 0.1
NLS_MAX_ITER = 200
SINGULAR_SIGMA = 1000.0
N_LIFTED = 18


class GatStatus(str, enum.Enum):
    INITIAL = "initial"
    REFINED = "refined"
    ACCEPTED = "accepted"
    SINGULAR = "singular"


class QcqpError(RuntimeError):
    """No feasible QCQP candidate was found from any start."""


@dataclass
class GatEstimate:
    A: AffineTransform7
    sigma: np.ndarray
    max_sigma: float
    status: GatStatus
    iterations: int = 0
    cost: float = float("nan")
    singular_class: fimlib.SingularClass = fimlib.SingularClass.OBSERVABLE
    unobservable_index: int | None = None
    method: str = ""
    cost_trace: list = field(default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return self.A.theta()


# --- lifting -------------------------------------------------------------------


def lift(A: AffineTransform7) -> np.ndarray:
    """Lifted state of a transform; satisfies every QCQP constraint."""
    sR = A.s * A.R
    return np.concatenate([A.t, [A.t @ A.t, A.s**2], sR.ravel(), A.s * A.R.T @ A.t, [1.0]])


def build_data_row(o, anchor, delta) -> np.ndarray:
    """Row ``D`` with ``D @ lift(A) = |t + s R o - a|^2 - delta``."""
    o = np.asarray(o, dtype=float)
    a = np.asarray(anchor, dtype=float)
    return np.concatenate([-2.0 * a, [1.0, o @ o], (-2.0 * np.outer(a, o)).ravel(), 2.0 * o, [a @ a - delta]])


def build_data_matrix(o, a, delta) -> np.ndarray:
    o = np.asarray(o, dtype=float).reshape(-1, 3)
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    M = len(o)
    outer = -2.0 * np.einsum("ij,ik->ijk", a, o).reshape(M, 9)
    return np.column_stack(
        [-2.0 * a, np.ones(M), np.einsum("ij,ij->i", o, o), outer, 2.0 * o, np.einsum("ij,ij->i", a, a) - delta]
    )


def _sparse(rows, cols, vals) -> np.ndarray:
    """18x18 matrix from 1-based triplets, symmetrized as (P + P^T) / 2."""
    P = np.zeros((N_LIFTED, N_LIFTED))
    for r, c, v in zip(rows, cols, vals):
        P[r - 1, c - 1] += v
    return 0.5 * (P + P.T)


def constraint_matrices(d0: float) -> list[tuple[np.ndarray, float]]:
    """The 13 equality constraints ``x^T P_i x = p_i`` of the lifted problem."""
    return [
        (_sparse([1, 2, 3, 4], [1, 2, 3, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([15, 16, 17, 4], [15, 16, 17, 5], [1, 1, 1, -1]), 0.0),
        (_sparse([1, 2, 3, 15], [6, 9, 12, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([1, 2, 3, 16], [7, 10, 13, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([1, 2, 3, 17], [8, 11, 14, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([4], [18], [1]), float(d0) ** 2),
        (_sparse([18], [18], [1]), 1.0),
        (_sparse([6, 9, 12, 5], [6, 9, 12, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([7, 10, 13, 5], [7, 10, 13, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([8, 11, 14, 5], [8, 11, 14, 18], [1, 1, 1, -1]), 0.0),
        (_sparse([6, 9, 12], [7, 10, 13], [1, 1, 1]), 0.0),
        (_sparse([6, 9, 12], [8, 11, 14], [1, 1, 1]), 0.0),
        (_sparse([7, 10, 13], [8, 11, 14], [1, 1, 1]), 0.0),
    ]


@dataclass
class QcqpProblem:
    P0: np.ndarray
    constraints: list[tuple[np.ndarray, float]]
    d0: float
    D: np.ndarray
    weights: np.ndarray

    def cost(self, x) -> float:
        return float(x @ self.P0 @ x)

    def residuals(self, x) -> np.ndarray:
        return np.array([x @ P @ x - p for P, p in self.constraints])


def squared_range_weights(d, sigma_r: float) -> np.ndarray:
    """Inverse variances of ``d~^2``: ``1 / (4 d^2 sigma^2 + 2 sigma^4)``.

    For ``sigma_r = 0`` the limiting relative weights ``1 / d^2`` are used.
    """
    d = np.asarray(d, dtype=float)
    if sigma_r > 0:
        return 1.0 / (4.0 * d**2 * sigma_r**2 + 2.0 * sigma_r**4)
    return 1.0 / np.maximum(d**2, 1e-12)


def build_qcqp(dataset: Dataset, d0: float, sigma_r: float | None = None) -> QcqpProblem:
    sigma_r = dataset.sigma_r if sigma_r is None else sigma_r
    if d0 is None or d0 < 0:
        raise ValueError("d0 (distance from world origin to start) must be known and >= 0")
    o, a, d = dataset.measurements()
    if len(d) < 7:
        raise ValueError(f"need at least 7 range samples, got {len(d)}")
    D = build_data_matrix(o, a, debias_squared_range(d, sigma_r))
    w = squared_range_weights(d, sigma_r)
    P0 = D.T @ (w[:, None] * D)
    P0 = 0.5 * (P0 + P0.T)
    return QcqpProblem(P0, constraint_matrices(d0), float(d0), D, w)


# --- solving ---------------------------------------------------------------------


@dataclass
class QcqpResult:
    x: np.ndarray
    cost: float
    violation: float
    n_starts: int
    candidates: list = field(default_factory=list)


def _spectral_start(problem: QcqpProblem) -> np.ndarray:
    """Minimizer of ``x^T P0 x`` over ``x[17] = 1`` (min-norm if not unique)."""
    P = problem.P0
    y, *_ = np.linalg.lstsq(P[:17, :17], -P[:17, 17], rcond=None)
    return np.concatenate([y, [1.0]])


def _manifold_point(x, d0: float, R=None) -> np.ndarray:
    """Feasible lifted state closest in spirit to an arbitrary vector ``x``."""
    t = np.asarray(x[:3], dtype=float)
    nt = np.linalg.norm(t)
    t = t * (d0 / nt) if nt > 1e-12 else np.array([d0, 0.0, 0.0])
    M = np.asarray(x[5:14], dtype=float).reshape(3, 3)
    s = np.linalg.norm(M) / np.sqrt(3.0)
    if not np.isfinite(s) or s < 1e-6:
        s = np.sqrt(x[4]) if x[4] > 1e-12 else 1.0
    if R is None:
        R = project_to_so3(M) if np.linalg.norm(M) > 1e-12 else np.eye(3)
    return lift(AffineTransform7(s, R, t))


def _lift_jacobian(A: AffineTransform7, d0: float) -> np.ndarray:
    """18x7 derivative of ``lift`` under ``t = d0 n``, ``R <- R exp([dv])``, ``s <- s e^dl``.

    The first three columns perturb the unit direction ``n``; the radial
    one is projected out so the norm constraint on ``t`` is preserved.
    """
    s, R, t = A.s, A.R, A.t
    n = t / d0
    Pt = d0 * (np.eye(3) - np.outer(n, n))
    y = s * R.T @ t
    L = np.zeros((N_LIFTED, 7))
    L[0:3, 0:3] = Pt
    L[14:17, 0:3] = s * R.T @ Pt
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        L[5:14, 3 + i] = (s * R @ skew(e)).ravel()
        L[14:17, 3 + i] = np.cross(y, e)
    L[4, 6] = 2.0 * s * s
    L[5:14, 6] = (s * R).ravel()
    L[14:17, 6] = y
    return L


def _retract(A: AffineTransform7, step, d0: float) -> AffineTransform7:
    t = A.t + step[0:3]
    nt = np.linalg.norm(t)
    if nt > 0:
        t = t * (d0 / nt)
    return AffineTransform7(A.s * np.exp(step[6]), A.R @ rodrigues(step[3:6]), t)


def _newton(fun, grad_hess, x, max_iter: int = 50, rtol: float = 1e-12):
    """Eigen-shifted Newton with backtracking for small dense problems."""
    f = fun(x)
    for _ in range(max_iter):
        g, H = grad_hess(x)
        w, V = np.linalg.eigh(H)
        wmax = max(abs(w[-1]), abs(w[0]), 1.0)
        if np.linalg.norm(g) <= rtol * wmax * (1.0 + np.linalg.norm(x)):
            break
        # flip negative curvature, floor tiny curvature
        w = np.maximum(np.abs(w), 1e-12 * wmax)
        step = -V @ ((V.T @ g) / w)
        slope = g @ step
        alpha = 1.0
        while True:
            x_new = x + alpha * step
            f_new = fun(x_new)
            if f_new <= f + 1e-4 * alpha * slope or alpha < 1e-10:
                break
            alpha *= 0.5
        if f_new > f:
            break
        small = np.linalg.norm(x_new - x) <= 1e-14 * (1.0 + np.linalg.norm(x))
        x, f = x_new, f_new
        if small:
            break
    return x


def _al_solve(problem: QcqpProblem, x0, tol: float = 1e-10, mu0: float = 1e4, max_outer: int = 30):
    """Augmented Lagrangian over all of R^18, starting from ``x0``.

    Cost and constraints are normalized first (cost by ``trace(P0)``, each
    constraint by ``max(1, |p_i|)``); the penalty weight grows tenfold
    whenever the violation fails to shrink fourfold.
    """
    scale = np.trace(problem.P0) or 1.0
    P0 = problem.P0 / scale
    ps = np.array([p for _, p in problem.constraints])
    cscale = np.maximum(1.0, np.abs(ps))
    Pstack = np.stack([P / c for (P, _), c in zip(problem.constraints, cscale)])
    Pflat = Pstack.reshape(len(ps), -1)
    ps = ps / cscale

    def cons(x):
        return Pflat @ np.outer(x, x).ravel() - ps

    lam = np.zeros(len(ps))
    mu = mu0
    x = np.array(x0, dtype=float)
    viol_prev = np.inf
    for _ in range(max_outer):
        lam_k, mu_k = lam.copy(), mu

        def fun(x):
            c = cons(x)
            return x @ P0 @ x + lam_k @ c + 0.5 * mu_k * c @ c

        def grad_hess(x):
            c = cons(x)
            Px = Pstack @ x
            m = lam_k + mu_k * c
            g = 2.0 * P0 @ x + 2.0 * m @ Px
            H = 2.0 * P0 + 2.0 * (m @ Pflat).reshape(N_LIFTED, N_LIFTED) + 4.0 * mu_k * Px.T @ Px
            return g, H

        x = _newton(fun, grad_hess, x)
        c = cons(x)
        viol = float(np.max(np.abs(c)))
        lam = lam + mu * c
        if viol < tol:
            break
        if viol > 0.25 * viol_prev:
            mu = min(mu * 10.0, 1e12)
        viol_prev = viol
    return x


def _manifold_solve(problem: QcqpProblem, A: AffineTransform7, max_iter: int = 100, tol: float = 1e-14):
    """Levenberg-Marquardt on ``x^T P0 x`` restricted to lifted transforms.

    Every iterate is ``lift(A)`` for a proper transform with ``|t| = d0``,
    so the 13 equalities hold to rounding error throughout.
    """
    sw = np.sqrt(problem.weights)
    WD = sw[:, None] * problem.D
    d0 = problem.d0
    r = WD @ lift(A)
    cost = r @ r
    lam = 1e-3
    for _ in range(max_iter):
        J = WD @ _lift_jacobian(A, d0)
        g = J.T @ r
        H = J.T @ J
        if np.linalg.norm(g) <= tol * max(cost, 1e-300) ** 0.5 * max(np.linalg.norm(J), 1.0):
            break
        improved = False
        while lam < 1e16:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            if abs(step[6]) > 5.0 or not np.all(np.isfinite(step)):
                lam *= 10.0
                continue
            A_new = _retract(A, step, d0)
            r_new = WD @ lift(A_new)
            cost_new = r_new @ r_new
            if cost_new <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        done = cost - cost_new <= tol * cost
        A, r, cost = A_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if done:
            break
    return A


def solve_qcqp(
    problem: QcqpProblem,
    n_starts: int = 8,
    seed: int = 0,
    max_violation: float = 1e-6,
    external: Callable[[QcqpProblem], np.ndarray] | None = None,
) -> QcqpResult:
    """Approximately minimize ``x^T P0 x`` subject to the 13 equalities.

    The feasible set (with a proper rotation) is the image of ``lift`` over
    transforms with ``|t| = d0``, so each start is first polished by
    Levenberg-Marquardt directly on that set, then handed to an augmented
    Lagrangian over all of R^18; both results are candidates.  Starts are the spectral
    point projected onto the set plus ``n_starts - 1`` copies with seeded
    random rotations; the lowest-cost candidate whose normalized violation
    is below ``max_violation`` wins.  ``external`` may supply a lifted
    candidate from another solver (e.g. a semidefinite relaxation) that
    joins the same selection.
    """
    rng = np.random.default_rng(seed)
    spec = _spectral_start(problem)
    base = _manifold_point(spec, problem.d0)
    s0 = float(np.sqrt(base[4]))
    starts = [recover_parameters(base)]
    for _ in range(max(n_starts - 1, 0)):
        starts.append(AffineTransform7(s0, random_rotation(rng), base[:3]))
    if external is not None:
        starts.append(recover_parameters(np.asarray(external(problem), dtype=float)))

    cscale = np.maximum(1.0, [abs(p) for _, p in problem.constraints])
    candidates = []
    for A0 in starts:
        x_feas = lift(_manifold_solve(problem, A0))
        for x in (x_feas, _al_solve(problem, x_feas)):
            if x[17] < 0:
                x = -x
            viol = float(np.max(np.abs(problem.residuals(x)) / cscale))
            candidates.append((problem.cost(x), viol, x))
    feasible = [c for c in candidates if c[1] <= max_violation and c[2][4] > 1e-12]
    if not feasible:
        raise QcqpError("no QCQP start reached a feasible point")
    cost, viol, x = min(feasible, key=lambda c: c[0])
    return QcqpResult(x, cost, viol, len(starts), candidates)


def distinct_initializers(result: QcqpResult, k: int = 3, max_violation: float = 1e-6, tol: float = 1e-3):
    """Up to ``k`` feasible candidates with distinct transforms, best QCQP cost first."""
    out = []
    for cost, viol, x in sorted(result.candidates, key=lambda c: c[0]):
        if viol > max_violation or not x[4] > 1e-12:
            continue
        A = recover_parameters(x)
        if all(np.linalg.norm(A.matrix() - B.matrix()) > tol * (1.0 + np.linalg.norm(B.matrix())) for B in out):
            out.append(A)
        if len(out) == k:
            break
    return out


def recover_parameters(x) -> AffineTransform7:
    """Read ``(s, R, t)`` back from a lifted state, projecting ``R`` onto SO(3)."""
    x = np.asarray(x, dtype=float)
    if x[17] < 0:
        x = -x
    if not x[4] > 1e-12:
        raise QcqpError(f"degenerate scale in lifted state (x5 = {x[4]:.3g})")
    s = float(np.sqrt(x[4]))
    R = project_to_so3(x[5:14].reshape(3, 3) / s)
    return AffineTransform7(s, R, x[:3])


# --- refinement ---------------------------------------------------------------


def _effective_sigma(dataset: Dataset) -> float:
    # noiseless data: a tiny floor keeps the CRLB finite
    return dataset.sigma_r if dataset.sigma_r > 0 else 1e-9


def uncertainty_gate(
    sigma,
    report: fimlib.FimReport | None = None,
    current: GatStatus = GatStatus.REFINED,
    accept: float = ACCEPT_SIGMA,
    singular: float = SINGULAR_SIGMA,
):
    """Decide the status of an estimate from its standard errors.

    Returns ``(status, unobservable_index)``.  A missing CRLB (singular
    Fisher information) is singular.
    """
    if sigma is None or (report is not None and report.crlb is None):
        return GatStatus.SINGULAR, None
    sigma = np.asarray(sigma, dtype=float)
    worst = int(np.argmax(sigma))
    if not np.isfinite(sigma[worst]) or sigma[worst] > singular:
        return GatStatus.SINGULAR, worst
    if sigma[worst] < accept:
        return GatStatus.ACCEPTED, None
    return current, None


def assess(
    dataset: Dataset,
    A: AffineTransform7,
    current: GatStatus,
    accept: float = ACCEPT_SIGMA,
    singular: float = SINGULAR_SIGMA,
    previous_v=None,
):
    theta = A.theta(previous_v)
    report = fimlib.fim(dataset, theta, _effective_sigma(dataset))
    sigma = report.sigma if report.sigma is not None else np.full(7, np.inf)
    status, idx = uncertainty_gate(report.sigma, report, current, accept, singular)
    return sigma, status, idx, report


def _residuals(theta, o, a, d):
    t, v, s = theta[:3], theta[3:6], theta[6]
    return d - np.linalg.norm(t + s * o @ rodrigues(v).T - a, axis=1)


def levenberg_marquardt(theta0, o, a, d, max_iter=NLS_MAX_ITER, gtol=1e-10, xtol=1e-12):
    """Damped Gauss-Newton on ``sum (d_i - f_i(theta))^2``.

    Returns ``(theta, iterations, cost_trace)``; ``cost_trace`` holds the
    cost after every accepted step and never increases.
    """
    theta = np.array(theta0, dtype=float)
    r = _residuals(theta, o, a, d)
    cost = float(r @ r)
    trace = [cost]
    mu, nu = None, 2.0
    it = 0
    for it in range(1, max_iter + 1):
        J = fimlib.jacobian(theta, o, a, safe=True)
        A = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) < gtol:
            break
        if mu is None:
            mu = 1e-3 * float(np.max(np.diag(A)))
        accepted = False
        while not accepted:
            step = np.linalg.solve(A + mu * np.eye(7), g)
            if np.linalg.norm(step) < xtol:
                return _canonical(theta), it, trace
            cand = theta + step
            if cand[6] <= 0:
                gain = -1.0
            else:
                r_new = _residuals(cand, o, a, d)
                cost_new = float(r_new @ r_new)
                predicted = step @ (mu * step + g)
                gain = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if gain > 0:
                theta, r, cost = _canonical(cand), r_new, cost_new
                trace.append(cost)
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                accepted = True
            else:
                mu *= nu
                nu *= 2.0
                if mu > 1e30:
                    return theta, it, trace
    return theta, it, trace


def _canonical(theta):
    """Keep the rotation vector on the branch ``|v| <= pi``."""
    v = theta[3:6]
    n = np.linalg.norm(v)
    if n > np.pi:
        theta = theta.copy()
        theta[3:6] = v * (1.0 - 2.0 * np.pi / n)
    return theta


def default_guess(dataset: Dataset) -> AffineTransform7:
    """Uninformed starting point: unit scale, no rotation, start at the anchor centroid."""
    return AffineTransform7(1.0, np.eye(3), dataset.anchors.positions.mean(axis=0))


def refine_nls(
    dataset: Dataset,
    guess: AffineTransform7,
    max_iter: int = NLS_MAX_ITER,
    accept: float = ACCEPT_SIGMA,
    singular: float = SINGULAR_SIGMA,
    previous_v=None,
) -> GatEstimate:
    """Refine ``guess`` by nonlinear least squares on the raw ranges."""
    o, a, d = dataset.measurements()
    if len(d) == 0:
        raise ValueError("dataset has no valid ranges")
    theta0 = guess.theta(previous_v)
    theta, iters, trace = levenberg_marquardt(theta0, o, a, d, max_iter=max_iter)
    A = AffineTransform7.from_theta(theta)
    sigma, status, idx, report = assess(dataset, A, GatStatus.REFINED, accept, singular, theta[3:6])
    return GatEstimate(
        A, sigma, float(np.max(sigma)), status, iters, trace[-1], report.singular_class, idx, "nls", trace
    )


def refine_candidates(
    dataset: Dataset,
    result: QcqpResult,
    k: int = 3,
    accept: float = ACCEPT_SIGMA,
    singular: float = SINGULAR_SIGMA,
) -> GatEstimate:
    """NLS from each of the ``k`` best distinct QCQP candidates; lowest range cost wins.

    The lifted cost weighs squared ranges, so its best candidate is not
    always in the basin of the best raw-range fit.
    """
    inits = distinct_initializers(result, k)
    if not inits:
        raise QcqpError("no feasible QCQP candidate")
    ests = [refine_nls(dataset, A, accept=accept, singular=singular) for A in inits]
    best = min(ests, key=lambda e: e.cost)
    best.method = "qcqp+nls"
    return best


def estimate_gat(
    dataset: Dataset,
    method: str = "qcqp+nls",
    d0: float | None = None,
    guess: AffineTransform7 | None = None,
    seed: int = 0,
    n_starts: int = 8,
    accept: float = ACCEPT_SIGMA,
    singular: float = SINGULAR_SIGMA,
) -> GatEstimate:
    """Run one of ``qcqp``, ``nls`` or ``qcqp+nls`` on ``dataset``.

    ``nls`` starts from ``guess`` (:func:`default_guess` when omitted).  ``qcqp+nls``
    falls back to plain NLS if the QCQP finds no feasible point.
    """
    if method not in ("qcqp", "nls", "qcqp+nls"):
        raise ValueError(f"unknown method {method!r}")
    if method == "nls":
        return refine_nls(dataset, guess or default_guess(dataset), accept=accept, singular=singular)
    d0 = dataset.d0 if d0 is None else d0
    if d0 is None:
        raise ValueError("the QCQP needs d0, the distance from the world origin to the start")
    try:
        res = solve_qcqp(build_qcqp(dataset, d0), n_starts=n_starts, seed=seed)
        A0 = recover_parameters(res.x)
    except QcqpError:
        if method == "qcqp":
            raise
        logger.warning("QCQP failed; falling back to NLS from the default guess")
        est = refine_nls(dataset, guess or default_guess(dataset), accept=accept, singular=singular)
        est.method = "nls-fallback"
        return est
    if method == "qcqp":
        sigma, status, idx, report = assess(dataset, A0, GatStatus.INITIAL, accept, singular)
        return GatEstimate(A0, sigma, float(np.max(sigma)), status, 0, res.cost, report.singular_class, idx, "qcqp")
    return refine_candidates(dataset, res, accept=accept, singular=singular)


def transform_world(A: AffineTransform7, keyframes, points=None):
    """Map odometry-frame keyframe poses and map points into the world frame."""
    kfs = [Pose(A.R @ kf.R, A.apply(kf.p)) for kf in keyframes]
    if points is None:
        return kfs
    return kfs, A.apply(np.asarray(points, dtype=float).reshape(-1, 3))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, 1000.0 * (time.perf_counter() - t0)
