"""Fisher information, Cramer-Rao bound and observability of the 7-DoF alignment.

The parameter vector is ``theta = [tx, ty, tz, vx, vy, vz, s]`` where ``v``
is the rotation vector of ``R``.  Each range ``d = |t + s R o - a|``
contributes one Jacobian row ``[u^T, Phi^T, mu]`` with

* ``u   = rho / |rho|``                    (d d / d t)
* ``Phi = Gamma^T u``, ``Gamma = d(s R o)/d v``
* ``mu  = u^T R o``                        (d d / d s)
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from uwbalign.geometry import rodrigues, skew

# singular-value ratio of J below which a direction counts as lost; matches
# the CRLB condition cutoff since cond(F) = cond(J)^2
RANK_RTOL = 1e-6
CRLB_MAX_COND = 1e12
# looser ratio for naming a deficiency once rank loss is established:
# estimates on degenerate data sit O(sqrt(cost tolerance)) off the
# degenerate set, so their span tests are noisier than the rank test
SPAN_RTOL = 1e-4
CAUCHY_BINET_MAX_ROWS = 12


class SingularClass(str, enum.Enum):
    OBSERVABLE = "observable"
    TRANSLATION_DEFICIENT = "translation_deficient"
    ROTATION_DEFICIENT = "rotation_deficient"
    SCALE_DEFICIENT = "scale_deficient"
    INSUFFICIENT_DATA = "insufficient_data"
    GENERAL_DEFICIENT = "general_deficient"


@dataclass(frozen=True)
class JacobianRow:
    u: np.ndarray
    Phi: np.ndarray
    mu: float

    @property
    def gamma(self) -> np.ndarray:
        return np.concatenate([self.u, self.Phi, [self.mu]])


@dataclass
class FimReport:
    J: np.ndarray
    F: np.ndarray
    detF: float
    crlb: np.ndarray | None
    sigma: np.ndarray | None
    rank: int
    singular_class: SingularClass
    sigma_r: float
    normalized_det: float = 0.0
    certificate: np.ndarray | None = None
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_json_dict(self) -> dict:
        doc = {
            "detF": float(self.detF),
            "normalized_det": float(self.normalized_det),
            "rank": int(self.rank),
            "sigma": None if self.sigma is None else [float(x) for x in self.sigma],
            "class": self.singular_class.value,
        }
        if self.certificate is not None:
            doc["certificate"] = [float(x) for x in self.certificate]
        return doc


def split_theta(theta):
    theta = np.asarray(theta, dtype=float)
    return theta[:3], theta[3:6], float(theta[6])


def rotation_jacobian(v) -> np.ndarray:
    """``B(v)`` with ``d(R a)/d v = -R [a]x B(v)``.

    ``B = (v v^T + (R^T - I)[v]x) / |v|^2``; below ``|v| = 1e-5`` its
    second-order series ``I - [v]x / 2 + [v]x^2 / 6`` is used, whose value
    at ``v = 0`` is the identity.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    V = skew(v)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * V + V @ V / 6.0
    R = rodrigues(v)
    return (np.outer(v, v) + (R.T - np.eye(3)) @ V) / theta**2


def gamma_matrix(theta, o) -> np.ndarray:
    """``Gamma = d(s R o)/d v = -s R [o]x B(v)``."""
    _, v, s = split_theta(theta)
    return -s * rodrigues(v) @ skew(o) @ rotation_jacobian(v)


def jacobian_row(theta, o, anchor) -> JacobianRow:
    t, v, s = split_theta(theta)
    R = rodrigues(v)
    o = np.asarray(o, dtype=float)
    rho = t + s * R @ o - np.asarray(anchor, dtype=float)
    d = np.linalg.norm(rho)
    if d == 0.0:
        raise ValueError("robot coincides with the anchor (zero predicted range)")
    u = rho / d
    Phi = gamma_matrix(theta, o).T @ u
    return JacobianRow(u, Phi, float(u @ R @ o))


def jacobian(theta, o, a, safe: bool = False) -> np.ndarray:
    """Stacked Jacobian rows, shape ``(M, 7)``, for ``M`` measurements.

    A zero predicted range raises unless ``safe``, which gives that row a
    zero direction instead (useful inside iterative solvers).
    """
    t, v, s = split_theta(theta)
    o = np.asarray(o, dtype=float).reshape(-1, 3)
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    R = rodrigues(v)
    B = rotation_jacobian(v)
    Ro = o @ R.T
    rho = t + s * Ro - a
    d = np.linalg.norm(rho, axis=1)
    if np.any(d == 0.0):
        if not safe:
            raise ValueError("robot coincides with an anchor (zero predicted range)")
        d = np.where(d == 0.0, np.inf, d)
    u = rho / d[:, None]
    # Phi^T = -s u^T R [o]x B = s (o x R^T u)^T B
    Phi = s * np.cross(o, u @ R) @ B
    mu = np.einsum("ij,ij->i", u, Ro)
    return np.column_stack([u, Phi, mu])


def numeric_rank(M, rtol: float = RANK_RTOL) -> int:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def normalized_det(F) -> float:
    """``det(F) / lambda_max(F)^7``: the product of eigenvalue ratios, in [0, 1]."""
    F = np.asarray(F, dtype=float)
    ev = np.linalg.eigvalsh(0.5 * (F + F.T))
    if ev[-1] <= 0.0:
        return 0.0
    return float(np.prod(np.clip(ev / ev[-1], 0.0, None)))


def crlb(F, max_cond: float = CRLB_MAX_COND):
    """Inverse of ``F`` and per-parameter standard errors.

    Returns ``(None, None)`` when the condition number of ``F`` exceeds
    ``max_cond`` (treated as singular).
    """
    F = 0.5 * (np.asarray(F, dtype=float) + np.asarray(F, dtype=float).T)
    ev = np.linalg.eigvalsh(F)
    if ev[-1] <= 0.0 or ev[0] <= ev[-1] / max_cond:
        return None, None
    C = np.linalg.inv(F)
    C = 0.5 * (C + C.T)
    return C, np.sqrt(np.diag(C))


def det_fim_direct(F) -> float:
    return float(np.linalg.det(np.asarray(F, dtype=float)))


def det_fim_cauchy_binet(J, sigma_r: float, subdet=None) -> float:
    """``det((1/sigma_r^2) J^T J)`` as a sum of squared 7x7 minors of ``J``.

    Each minor is scaled by ``1/sigma_r^7`` so that the sum equals the
    direct determinant exactly.  ``subdet`` computes the minor determinant
    (default ``np.linalg.det``; :func:`det_lambda_laplace` is the
    block-structured alternative).
    """
    J = np.asarray(J, dtype=float)
    k, n = J.shape
    if n != 7:
        raise ValueError("J must have 7 columns")
    if k < 7:
        return 0.0
    if k > CAUCHY_BINET_MAX_ROWS:
        raise ValueError(f"Cauchy-Binet route limited to {CAUCHY_BINET_MAX_ROWS} rows, got {k}")
    subdet = subdet or np.linalg.det
    total = 0.0
    for rows in itertools.combinations(range(k), 7):
        total += subdet(J[list(rows)]) ** 2
    return total / sigma_r**14


def _perm_sign(perm) -> int:
    perm = list(perm)
    sign = 1
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


@dataclass(frozen=True)
class LaplaceTerm:
    """One term ``sign * mu * alpha * beta`` of the last-column expansion."""

    row: int
    sign: int
    mu: float
    alpha: float
    beta: float

    @property
    def value(self) -> float:
        return self.sign * self.mu * self.alpha * self.beta


_TRIPLES = np.array(list(itertools.combinations(range(6), 3)))


def laplace_terms(Lambda, pivot: bool = True, tol: float = 1e-12) -> list[LaplaceTerm]:
    """Expand ``det(Lambda)`` along its last (scale) column.

    The minor of row ``i`` is split into 3x3 blocks
    ``[[A1, A2], [A3, A4]]`` (u-part / Phi-part of six rows) and evaluated as
    ``alpha * beta`` with ``alpha = det(A1) = (u1 x u2) . u3`` and
    ``beta = det(A4 - A3 A1^-1 A2)``, where
    ``A1^-1 = [u2 x u3, u3 x u1, u1 x u2] / alpha``.

    With ``pivot`` the three rows forming ``A1`` are the triple with the
    largest ``|alpha|`` (the row permutation enters ``sign``); otherwise the
    first three remaining rows are used.  A term whose ``alpha`` vanishes
    is reported with ``beta = 0``.  With pivoting that only happens when
    the u-block of the minor has rank < 3, so the minor really is zero.
    """
    L = np.asarray(Lambda, dtype=float)
    if L.shape != (7, 7):
        raise ValueError("Lambda must be 7x7")
    triples = _TRIPLES if pivot else _TRIPLES[:1]
    terms = []
    for i in range(7):
        rest = [r for r in range(7) if r != i]
        U = L[rest, :3][triples]
        alphas = np.einsum("ij,ij->i", np.cross(U[:, 0], U[:, 1]), U[:, 2])
        scales = np.prod(np.linalg.norm(U, axis=2), axis=1)
        rels = np.abs(alphas) / np.where(scales > 0, scales, 1.0)
        best = int(np.argmax(rels))
        rel, tri, alpha = float(rels[best]), tuple(triples[best]), float(alphas[best])
        others = [j for j in range(6) if j not in tri]
        order = list(tri) + others
        rows = [rest[j] for j in order]
        # cofactor sign (-1)^(i+7) in 1-based indexing, times the row reordering
        sign = (-1) ** i * _perm_sign(order)
        mu = float(L[i, 6])
        if rel <= tol:
            terms.append(LaplaceTerm(i, sign, mu, alpha, 0.0))
            continue
        u1, u2, u3 = L[rows[:3], :3]
        A1_inv = np.column_stack([np.cross(u2, u3), np.cross(u3, u1), np.cross(u1, u2)]) / alpha
        A2 = L[rows[:3], 3:6]
        A3 = L[rows[3:], :3]
        A4 = L[rows[3:], 3:6]
        beta = float(np.linalg.det(A4 - A3 @ A1_inv @ A2))
        terms.append(LaplaceTerm(i, sign, mu, alpha, beta))
    return terms


def det_lambda_laplace(Lambda, pivot: bool = True) -> float:
    return float(sum(term.value for term in laplace_terms(Lambda, pivot=pivot)))


# --- observability ----------------------------------------------------------


def _span_check(vectors, rtol: float = SPAN_RTOL):
    """Whether the rows of ``vectors`` span R^3, and a null direction if not."""
    V = np.asarray(vectors, dtype=float).reshape(-1, 3)
    if len(V) < 3 or not np.any(V):
        if not np.any(V):
            return False, np.array([0.0, 0.0, 1.0])
        _, _, Vt = np.linalg.svd(np.vstack([V, np.zeros((3 - len(V), 3))]))
        return False, Vt[-1]
    _, sv, Vt = np.linalg.svd(V, full_matrices=False)
    if sv[-1] > rtol * sv[0]:
        return True, None
    cert = Vt[-1]
    # canonical sign: largest component positive
    if cert[np.argmax(np.abs(cert))] < 0:
        cert = -cert
    return False, cert


def _lever_arms(theta, dataset):
    """``b_i = s R o_i`` for every valid measurement, in measurement order."""
    _, v, s = split_theta(theta)
    o, a, _ = dataset.measurements()
    return s * o @ rodrigues(v).T, o, a


def check_translation_observable(J):
    """True iff the unit directions ``u_i`` (first three columns) span R^3."""
    J = np.asarray(J, dtype=float).reshape(-1, 7)
    return _span_check(J[:, :3])


def check_rotation_observable(J, theta, dataset):
    """True iff the vectors ``u_i x b_i`` span R^3, with ``b_i = s R o_i``."""
    J = np.asarray(J, dtype=float).reshape(-1, 7)
    b, _, _ = _lever_arms(theta, dataset)
    return _span_check(np.cross(J[:, :3], b))


def check_scale_observable(dataset, theta, rtol: float = SPAN_RTOL) -> bool:
    """False iff ``rho_i . b_i = 0`` for every measurement.

    Equivalently every sensing position lies on the sphere having the
    start point and the ranged anchor as a diameter.
    """
    t, v, s = split_theta(theta)
    b, _, a = _lever_arms(theta, dataset)
    if len(b) == 0:
        return False
    rho = t + b - a
    bn = np.linalg.norm(b, axis=1)
    if bn.max() == 0.0:
        return False
    cos = np.einsum("ij,ij->i", rho, b) / np.maximum(np.linalg.norm(rho, axis=1), 1e-300)
    return bool(np.max(np.abs(cos)) > rtol * bn.max())


def classify_singularity(J, theta, dataset):
    """Label the observability of a configuration.

    Returns ``(SingularClass, certificate)``.  Full column rank means
    observable.  Otherwise the isolated translation, rotation and scale
    tests are tried in that order and the first failing one names the
    deficiency; a rank loss none of them explains is ``general_deficient``
    (certificate: a null vector of ``J``).
    """
    J = np.asarray(J, dtype=float).reshape(-1, 7)
    if len(J) < 7:
        return SingularClass.INSUFFICIENT_DATA, None
    if numeric_rank(J) == 7:
        return SingularClass.OBSERVABLE, None
    ok, cert = check_translation_observable(J)
    if not ok:
        return SingularClass.TRANSLATION_DEFICIENT, cert
    ok, cert = check_rotation_observable(J, theta, dataset)
    if not ok:
        return SingularClass.ROTATION_DEFICIENT, cert
    if not check_scale_observable(dataset, theta):
        return SingularClass.SCALE_DEFICIENT, None
    _, _, Vt = np.linalg.svd(J)
    return SingularClass.GENERAL_DEFICIENT, Vt[-1]


def fim(dataset, theta, sigma_r: float | None = None) -> FimReport:
    """Fisher information of the valid ranges of ``dataset`` at ``theta``."""
    sigma_r = dataset.sigma_r if sigma_r is None else sigma_r
    if not sigma_r > 0:
        raise ValueError("sigma_r must be positive to form the Fisher information")
    theta = np.asarray(theta, dtype=float)
    o, a, _ = dataset.measurements()
    J = jacobian(theta, o, a) if len(o) else np.zeros((0, 7))
    F = J.T @ J / sigma_r**2
    sv = np.linalg.svd(J, compute_uv=False) if len(J) else np.zeros(0)
    rank = numeric_rank(J)
    cls, cert = classify_singularity(J, theta, dataset)
    C, sig = crlb(F) if cls == SingularClass.OBSERVABLE else (None, None)
    return FimReport(
        J=J,
        F=F,
        detF=det_fim_direct(F),
        crlb=C,
        sigma=sig,
        rank=rank,
        singular_class=cls,
        sigma_r=sigma_r,
        normalized_det=normalized_det(F),
        certificate=cert,
        singular_values=sv,
    )
