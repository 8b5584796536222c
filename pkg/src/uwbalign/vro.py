"""Visual-range back end on synthetic observations.

Keyframe poses ``(R, p)`` map camera to world; a world point ``X`` is seen
at ``R^T (X - p)`` in a z-forward pinhole camera.  Poses are perturbed on
the right, ``R <- R exp([dtheta]x)``, ``p <- p + dp``, with the pose block
ordered ``[dp, dtheta]``.

Everything here runs on one small sparse Levenberg-Marquardt engine
(:func:`_optimize`) driven by vectorized factor groups:

* reprojection (bundle adjustment, Huber on pixels),
* range to an anchor (Huber on meters, weighted by ``1/sigma_r``),
* relative-pose odometry with an Euler-angle rotation error,
* position priors from range-only fixes (Huber on meters).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares
from scipy.sparse.linalg import spsolve
from scipy.stats import chi2

from uwbalign.gat import GatEstimate, GatStatus, estimate_gat, refine_nls
from uwbalign.geometry import (
    AffineTransform7,
    Pose,
    euler_xyz,
    euler_xyz_rate_matrix,
    rodrigues,
    skew,
)
from uwbalign.measurement import AnchorMap, Dataset

logger = logging.getLogger(__name__)

HUBER_RANGE = 1.0  # meters
HUBER_POSITION = 1.0  # meters
HUBER_PIXEL = math.sqrt(5.991)  # 95% chi-square gate for 2 dof, unit pixel noise
DRIFT_THRESHOLD = 1.0  # meters
WINDOW = 10
REINIT_ATTEMPTS = 5


class GaugeError(ValueError):
    """The optimization has no range factor and no fixed vertex."""


class TrilaterationError(ValueError):
    pass


class NoFixError(TrilaterationError):
    """Fewer than three ranges at the epoch."""


class AmbiguityError(TrilaterationError):
    """Anchors are collinear, so the position is a circle of solutions."""


class ReinitError(ValueError):
    pass


# --- types ----------------------------------------------------------------------


@dataclass
class CameraModel:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, Xc) -> np.ndarray:
        Xc = np.asarray(Xc, dtype=float)
        return np.stack(
            [self.fx * Xc[..., 0] / Xc[..., 2] + self.cx, self.fy * Xc[..., 1] / Xc[..., 2] + self.cy], axis=-1
        )

    def in_image(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (z[..., 0] >= 0) & (z[..., 0] < self.width) & (z[..., 1] >= 0) & (z[..., 1] < self.height)


@dataclass
class Keyframe:
    index: int
    pose: Pose
    ranges: dict[int, float] = field(default_factory=dict)  # anchor index -> meters
    fixed: bool = False


@dataclass
class Landmark:
    id: int
    position: np.ndarray

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(3)


@dataclass(frozen=True)
class Observation:
    keyframe: int
    landmark: int
    z: tuple[float, float]


@dataclass(frozen=True)
class RangeFactor:
    keyframe: int
    anchor: int
    d: float


@dataclass(frozen=True)
class OdometryFactor:
    """Measured motion from keyframe ``i`` to keyframe ``j`` in the frame of ``i``."""

    i: int
    j: int
    R: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class PositionFactor:
    keyframe: int
    p: np.ndarray


@dataclass
class FactorGraph:
    keyframes: list[Keyframe]
    anchors: AnchorMap
    camera: CameraModel = field(default_factory=CameraModel)
    landmarks: list[Landmark] = field(default_factory=list)
    observations: list[Observation] = field(default_factory=list)
    odometry: list[OdometryFactor] = field(default_factory=list)
    positions: list[PositionFactor] = field(default_factory=list)
    sigma_r: float = 0.1
    visual_weight: float = 1.0
    huber_range: float = HUBER_RANGE
    huber_position: float = HUBER_POSITION
    huber_pixel: float = HUBER_PIXEL

    def __post_init__(self):
        self.validate()

    def validate(self):
        idx = [kf.index for kf in self.keyframes]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("keyframe indices must be strictly increasing")
        kfs, lms = set(idx), {lm.id for lm in self.landmarks}
        if len(lms) != len(self.landmarks):
            raise ValueError("duplicate landmark id")
        for f in self.factors():
            if isinstance(f, Observation):
                ok = f.keyframe in kfs and f.landmark in lms
            elif isinstance(f, RangeFactor):
                ok = f.keyframe in kfs and 0 <= f.anchor < len(self.anchors)
            elif isinstance(f, OdometryFactor):
                ok = f.i in kfs and f.j in kfs
            else:
                ok = f.keyframe in kfs
            if not ok:
                raise ValueError(f"factor references a missing vertex: {f}")

    def factors(self) -> Iterable:
        """All factors: reprojection, range, odometry and position."""
        yield from self.observations
        for kf in self.keyframes:
            for n, d in sorted(kf.ranges.items()):
                yield RangeFactor(kf.index, n, d)
        yield from self.odometry
        yield from self.positions

    def kf_position(self, index: int) -> int:
        return self._kf_lookup()[index]

    def _kf_lookup(self) -> dict[int, int]:
        return {kf.index: k for k, kf in enumerate(self.keyframes)}

    def _lm_lookup(self) -> dict[int, int]:
        return {lm.id: k for k, lm in enumerate(self.landmarks)}

    def positions_array(self) -> np.ndarray:
        return np.array([kf.pose.p for kf in self.keyframes]).reshape(-1, 3)

    def copy(self) -> FactorGraph:
        return replace(
            self,
            keyframes=[replace(kf, ranges=dict(kf.ranges)) for kf in self.keyframes],
            landmarks=[Landmark(lm.id, lm.position.copy()) for lm in self.landmarks],
            observations=list(self.observations),
            odometry=list(self.odometry),
            positions=list(self.positions),
        )


def ate(estimated, truth) -> float:
    """Root-mean-square position error between matched trajectories."""
    e = np.asarray(estimated, dtype=float).reshape(-1, 3) - np.asarray(truth, dtype=float).reshape(-1, 3)
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1)))) if len(e) else 0.0


# --- losses and single residuals --------------------------------------------------


def huber_loss(r, delta: float):
    """``r^2 / 2`` inside ``delta``, ``delta (|r| - delta / 2)`` outside."""
    a = np.abs(np.asarray(r, dtype=float))
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_gradient(r, delta: float):
    """Derivative of :func:`huber_loss`; bounded by ``delta`` in magnitude."""
    r = np.asarray(r, dtype=float)
    return np.clip(r, -delta, delta)


def huber_weight(norm, delta: float):
    """IRLS weight ``rho'(n) / n``."""
    norm = np.asarray(norm, dtype=float)
    return np.where(norm <= delta, 1.0, delta / np.maximum(norm, 1e-300))


def reprojection_residual(kf: Keyframe, lm: Landmark, obs: Observation, cam: CameraModel):
    """Observed pixel minus the projection of ``R^T (X - p)``; ``None`` at non-positive depth."""
    Xc = kf.pose.R.T @ (lm.position - kf.pose.p)
    if Xc[2] <= 0:
        return None
    return np.asarray(obs.z, dtype=float) - cam.project(Xc)


def range_residual(kf: Keyframe, anchor, d: float | None = None, anchor_index: int | None = None) -> float:
    """``d - |p - a|``; zero when there is no measurement.

    ``d`` defaults to ``kf.ranges[anchor_index]``.
    """
    if d is None:
        d = kf.ranges.get(anchor_index) if anchor_index is not None else None
        if d is None:
            return 0.0
    return float(d - np.linalg.norm(kf.pose.p - np.asarray(anchor, dtype=float)))


def odometry_residual(Ti: Pose, Tj: Pose, meas: OdometryFactor | Pose) -> np.ndarray:
    """Six-vector: translation error of ``Ti^-1 Tj`` then Euler angles of the rotation error."""
    Rm, pm = (meas.R, meas.p)
    dp = Ti.R.T @ (Tj.p - Ti.p) - pm
    E = Rm.T @ Ti.R.T @ Tj.R
    return np.concatenate([dp, euler_xyz(E)])


# --- factor groups ------------------------------------------------------------------


@dataclass
class _Group:
    r: np.ndarray  # (M, m)
    blocks: list  # [(vertex ids (M,), J (M, m, d))]
    scale: float = 1.0
    delta: float | None = None
    active: np.ndarray | None = None

    def norms(self):
        return np.linalg.norm(self.r, axis=1)

    def cost(self) -> float:
        n = self.norms()
        rho = huber_loss(n, self.delta) if self.delta is not None else 0.5 * n * n
        if self.active is not None:
            rho = rho * self.active
        return float(self.scale**2 * np.sum(rho))


@dataclass
class _State:
    R: np.ndarray  # (K, 3, 3)
    p: np.ndarray  # (K, 3)
    X: np.ndarray  # (L, 3)

    def retract(self, dx, pose_cols, lm_cols) -> _State:
        R, p, X = self.R.copy(), self.p.copy(), self.X.copy()
        for k in np.flatnonzero(pose_cols >= 0):
            c = pose_cols[k]
            p[k] += dx[c : c + 3]
            R[k] = R[k] @ rodrigues(dx[c + 3 : c + 6])
        for l in np.flatnonzero(lm_cols >= 0):
            c = lm_cols[l]
            X[l] += dx[c : c + 3]
        return _State(R, p, X)


def _reprojection_group(state: _State, kf, lm, z, cam: CameraModel, weight: float, delta) -> _Group:
    R, p, X = state.R[kf], state.p[kf], state.X[lm]
    Xc = np.einsum("mji,mj->mi", R, X - p)
    depth = Xc[:, 2]
    active = depth > 1e-9
    zsafe = np.where(active, depth, 1.0)
    x, y = Xc[:, 0] / zsafe, Xc[:, 1] / zsafe
    r = z - np.column_stack([cam.fx * x + cam.cx, cam.fy * y + cam.cy])
    Jpi = np.zeros((len(kf), 2, 3))
    Jpi[:, 0, 0] = cam.fx / zsafe
    Jpi[:, 0, 2] = -cam.fx * x / zsafe
    Jpi[:, 1, 1] = cam.fy / zsafe
    Jpi[:, 1, 2] = -cam.fy * y / zsafe
    Rt = np.transpose(R, (0, 2, 1))
    JpiRt = Jpi @ Rt
    Jpose = np.concatenate([JpiRt, -Jpi @ np.array([skew(v) for v in Xc])], axis=2)
    JX = -JpiRt
    r[~active] = 0.0
    Jpose[~active] = 0.0
    JX[~active] = 0.0
    return _Group(r, [(kf, Jpose), (lm, JX)], weight, delta, active)


def _range_group(state: _State, kf, a, d, scale: float, delta) -> _Group:
    diff = state.p[kf] - a
    n = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
    r = (d - n)[:, None]
    J = np.zeros((len(kf), 1, 6))
    J[:, 0, :3] = -diff / n[:, None]
    return _Group(r, [(kf, J)], scale, delta)


def _odometry_group(state: _State, i, j, Rm, pm) -> _Group:
    M = len(i)
    r = np.zeros((M, 6))
    Ji = np.zeros((M, 6, 6))
    Jj = np.zeros((M, 6, 6))
    for f in range(M):
        Ri, Rj, pi, pj = state.R[i[f]], state.R[j[f]], state.p[i[f]], state.p[j[f]]
        rel = Ri.T @ (pj - pi)
        Mij = Ri.T @ Rj
        ang = euler_xyz(Rm[f].T @ Mij)
        r[f, :3] = rel - pm[f]
        r[f, 3:] = ang
        Einv = np.linalg.inv(euler_xyz_rate_matrix(ang))
        Ji[f, :3, :3] = -Ri.T
        Ji[f, :3, 3:] = skew(rel)
        Ji[f, 3:, 3:] = -Einv @ Mij.T
        Jj[f, :3, :3] = Ri.T
        Jj[f, 3:, 3:] = Einv
    return _Group(r, [(i, Ji), (j, Jj)])


def _position_group(state: _State, kf, target, delta) -> _Group:
    r = state.p[kf] - target
    J = np.zeros((len(kf), 3, 6))
    J[:, :, :3] = np.eye(3)
    return _Group(r, [(kf, J)], 1.0, delta)


# --- engine ---------------------------------------------------------------------------


@dataclass
class OptResult:
    cost_trace: list[float]
    iterations: int
    converged: bool
    cancelled: bool = False


def _assemble(groups: list[_Group], pose_cols, lm_cols, n_free: int):
    """Robustly weighted sparse Jacobian and residual (IRLS at the current state)."""
    rows, cols, vals, res = [], [], [], []
    row0 = 0
    for g in groups:
        M, m = g.r.shape
        if M == 0:
            continue
        w = huber_weight(g.norms(), g.delta) if g.delta is not None else np.ones(M)
        sw = g.scale * np.sqrt(w)
        res.append((sw[:, None] * g.r).ravel())
        for ids, J in g.blocks:
            d = J.shape[2]
            ids = np.asarray(ids)
            col0 = pose_cols[ids] if d == 6 else lm_cols[ids]
            free = col0 >= 0
            if not free.any():
                continue
            f = np.flatnonzero(free)
            rr = row0 + f[:, None, None] * m + np.arange(m)[None, :, None]
            cc = col0[f][:, None, None] + np.arange(d)[None, None, :]
            vv = sw[f][:, None, None] * J[f]
            rows.append(np.broadcast_to(rr, vv.shape).ravel())
            cols.append(np.broadcast_to(cc, vv.shape).ravel())
            vals.append(vv.ravel())
        row0 += M * m
    r = np.concatenate(res) if res else np.zeros(0)
    if rows:
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row0, n_free)
        )
    else:
        J = sp.csr_matrix((row0, n_free))
    return J, r


def _optimize(
    state: _State,
    free_kf,
    free_lm,
    build: Callable[[_State], list[_Group]],
    max_iter: int = 50,
    rtol: float = 1e-12,
    xtol: float = 1e-10,
    cancel=None,
):
    """Levenberg-Marquardt with IRLS weights; only strictly cost-decreasing steps are taken."""
    free_kf = np.asarray(free_kf, dtype=bool)
    free_lm = np.asarray(free_lm, dtype=bool)
    pose_cols = np.full(len(free_kf), -1)
    pose_cols[free_kf] = 6 * np.arange(free_kf.sum())
    lm_cols = np.full(len(free_lm), -1)
    lm_cols[free_lm] = 6 * free_kf.sum() + 3 * np.arange(free_lm.sum())
    n_free = 6 * int(free_kf.sum()) + 3 * int(free_lm.sum())

    groups = build(state)
    cost = sum(g.cost() for g in groups)
    trace = [cost]
    if n_free == 0:
        return state, OptResult(trace, 0, True)
    lam = 1e-4
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        if cancel is not None and cancel.is_set():
            return state, OptResult(trace, it - 1, False, cancelled=True)
        J, r = _assemble(groups, pose_cols, lm_cols, n_free)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < 1e-12 or cost == 0.0:
            converged = True
            break
        diag = H.diagonal() + 1e-9
        improved = False
        while lam < 1e16:
            dx = spsolve(H + sp.diags(lam * diag, format="csc"), -g)
            if not np.all(np.isfinite(dx)):
                lam *= 10.0
                continue
            new_state = state.retract(dx, pose_cols, lm_cols)
            new_groups = build(new_state)
            new_cost = sum(gr.cost() for gr in new_groups)
            if new_cost < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            converged = True
            break
        small = cost - new_cost <= rtol * max(cost, 1e-300) or np.max(np.abs(dx)) < xtol
        state, groups, cost = new_state, new_groups, new_cost
        trace.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if small:
            converged = True
            break
    return state, OptResult(trace, it, converged)


def _state_of(graph: FactorGraph) -> _State:
    R = np.array([kf.pose.R for kf in graph.keyframes]).reshape(-1, 3, 3)
    p = graph.positions_array()
    X = np.array([lm.position for lm in graph.landmarks]).reshape(-1, 3)
    return _State(R, p, X)


def _write_back(graph: FactorGraph, state: _State, free_kf, free_lm):
    for k in np.flatnonzero(free_kf):
        graph.keyframes[k].pose = Pose(state.R[k], state.p[k])
    for l in np.flatnonzero(free_lm):
        graph.landmarks[l].position = state.X[l].copy()


def _visual_arrays(graph: FactorGraph):
    kl, ll = graph._kf_lookup(), graph._lm_lookup()
    kf = np.array([kl[o.keyframe] for o in graph.observations], dtype=int)
    lm = np.array([ll[o.landmark] for o in graph.observations], dtype=int)
    z = np.array([o.z for o in graph.observations], dtype=float).reshape(-1, 2)
    return kf, lm, z


def _range_arrays(graph: FactorGraph, keyframes=None):
    kf, a, d = [], [], []
    for k, frame in enumerate(graph.keyframes):
        if keyframes is not None and not keyframes[k]:
            continue
        for n, dist in sorted(frame.ranges.items()):
            kf.append(k)
            a.append(graph.anchors.positions[n])
            d.append(dist)
    return np.array(kf, dtype=int), np.array(a, dtype=float).reshape(-1, 3), np.array(d, dtype=float)


def _landmark_support(graph: FactorGraph, kf_mask=None) -> np.ndarray:
    """Landmarks seen by at least two keyframes (and by a keyframe in ``kf_mask``)."""
    kf, lm, _ = _visual_arrays(graph)
    count = np.zeros(len(graph.landmarks), dtype=int)
    pairs = set(zip(kf.tolist(), lm.tolist()))
    for _, l in pairs:
        count[l] += 1
    ok = count >= 2
    if kf_mask is not None:
        seen = np.zeros(len(graph.landmarks), dtype=bool)
        seen[lm[np.asarray(kf_mask)[kf]]] = True
        ok &= seen
    return ok


# --- bundle adjustment with ranges ----------------------------------------------------


def uba_optimize(
    graph: FactorGraph,
    mode: str = "local",
    window: int = WINDOW,
    max_iter: int = 50,
    use_ranges: bool = True,
    cancel=None,
) -> OptResult:
    """Joint reprojection and range optimization of ``graph`` in place.

    ``tracking`` frees only the newest keyframe pose; ``local`` frees the
    last ``window`` keyframes and the landmarks they see; ``full`` frees
    every vertex not flagged fixed.  Raises :class:`GaugeError` if every
    keyframe is free and there is neither a range factor nor a fixed vertex.
    """
    K = len(graph.keyframes)
    if K == 0:
        raise ValueError("graph has no keyframes")
    flagged = np.array([kf.fixed for kf in graph.keyframes])
    if mode == "tracking":
        free_kf = np.zeros(K, dtype=bool)
        free_kf[-1] = True
        free_lm = np.zeros(len(graph.landmarks), dtype=bool)
    elif mode == "local":
        free_kf = np.zeros(K, dtype=bool)
        free_kf[max(0, K - window) :] = True
        free_lm = _landmark_support(graph, free_kf)
    elif mode == "full":
        free_kf = np.ones(K, dtype=bool)
        free_lm = _landmark_support(graph)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    free_kf &= ~flagged

    rkf, ra, rd = _range_arrays(graph) if use_ranges else (np.zeros(0, int), np.zeros((0, 3)), np.zeros(0))
    if free_kf.all() and len(rd) == 0:
        raise GaugeError("no range factor and no fixed vertex: the gauge is free")

    vkf, vlm, vz = _visual_arrays(graph)
    cam = graph.camera

    def build(state):
        groups = [_reprojection_group(state, vkf, vlm, vz, cam, graph.visual_weight, graph.huber_pixel)]
        if len(rd):
            groups.append(_range_group(state, rkf, ra, rd, 1.0 / graph.sigma_r, graph.huber_range))
        return groups

    state, res = _optimize(_state_of(graph), free_kf, free_lm, build, max_iter=max_iter, cancel=cancel)
    _write_back(graph, state, free_kf, free_lm)
    return res


# --- range-only fixes -----------------------------------------------------------------------


def _as_ranges(ranges, n_anchors: int):
    """Normalize a mapping or a NaN-padded sequence to (indices, distances)."""
    if isinstance(ranges, Mapping):
        items = sorted((int(k), float(v)) for k, v in ranges.items() if v is not None and np.isfinite(v))
    else:
        items = [(k, float(v)) for k, v in enumerate(ranges) if v is not None and np.isfinite(v)]
    idx = np.array([k for k, _ in items], dtype=int)
    if np.any((idx < 0) | (idx >= n_anchors)):
        raise ValueError("range refers to an unknown anchor")
    return idx, np.array([v for _, v in items], dtype=float)


def trilaterate(ranges, anchors, guess=None) -> np.ndarray:
    """Position minimizing ``sum (d_n - |p - a_n|)^2`` over the valid ranges.

    ``ranges`` is a mapping anchor index -> meters or a sequence with NaN
    for missing entries.  When the ranged anchors are coplanar the cost is
    symmetric under reflection in their plane; the minimum nearest to
    ``guess`` is returned if one is given, otherwise the one with positive
    height (the lower one if both are above ground).
    """
    A = anchors.positions if isinstance(anchors, AnchorMap) else np.asarray(anchors, dtype=float).reshape(-1, 3)
    idx, d = _as_ranges(ranges, len(A))
    if len(d) < 3:
        raise NoFixError(f"need at least 3 ranges, got {len(d)}")
    a = A[idx]
    c = a.mean(axis=0)
    _, sv, Vt = np.linalg.svd(a - c)
    scale = max(sv[0], 1e-12)
    if sv[1] <= 1e-9 * scale:
        raise AmbiguityError("ranged anchors are collinear")
    coplanar = len(d) == 3 or sv[2] <= 1e-9 * scale
    normal = Vt[2]

    def fun(p):
        return d - np.linalg.norm(p - a, axis=1)

    def jac(p):
        diff = p - a
        return -diff / np.maximum(np.linalg.norm(diff, axis=1), 1e-12)[:, None]

    starts = []
    if guess is not None:
        starts.append(np.asarray(guess, dtype=float))
    if not coplanar:
        # difference of squared ranges is linear in p
        M = 2.0 * (a[1:] - a[0])
        b = d[0] ** 2 - d[1:] ** 2 + np.sum(a[1:] ** 2, axis=1) - a[0] @ a[0]
        starts.append(np.linalg.lstsq(M, b, rcond=None)[0])
    h = float(np.mean(d))
    starts += [c + h * normal, c - h * normal, c]
    best = None
    for p0 in starts:
        sol = least_squares(fun, p0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or sol.cost < best.cost - 1e-15:
            best = sol
    p = best.x
    if not coplanar:
        return p
    mirror = p - 2.0 * ((p - c) @ normal) * normal
    cands = [p, mirror]
    if guess is not None:
        g = np.asarray(guess, dtype=float)
        return min(cands, key=lambda q: float(np.linalg.norm(q - g)))
    above = [q for q in cands if q[2] > 0]
    if len(above) == 1:
        return above[0]
    return min(cands, key=lambda q: q[2])


# --- drift and pose graph ---------------------------------------------------------------


@dataclass
class DriftReport:
    detected: bool
    mean_offset: float
    n_fixes: int
    offsets: list[float]
    fixes: dict[int, np.ndarray]
    message: str = ""


def range_fixes(graph: FactorGraph, keyframes: Iterable[int]) -> dict[int, np.ndarray]:
    """Range-only fixes for the given keyframe positions (list indices), guessed from the pose."""
    fixes = {}
    for k in keyframes:
        kf = graph.keyframes[k]
        if len(kf.ranges) < 3:
            continue
        try:
            fixes[k] = trilaterate(kf.ranges, graph.anchors, guess=kf.pose.p)
        except TrilaterationError:
            continue
    return fixes


def drift_detect(graph: FactorGraph, P: int = WINDOW, threshold: float = DRIFT_THRESHOLD) -> DriftReport:
    """Compare the last ``P`` keyframe positions with their range-only fixes.

    Fires when the mean offset exceeds ``threshold``.  Needs a fix for each
    of the ``P`` keyframes; otherwise reports no drift with a diagnostic.
    """
    if P < 1:
        raise ValueError("window must be at least 1")
    K = len(graph.keyframes)
    recent = list(range(max(0, K - P), K))
    fixes = range_fixes(graph, recent)
    offsets = [float(np.linalg.norm(graph.keyframes[k].pose.p - fixes[k])) for k in recent if k in fixes]
    if len(recent) < P or len(fixes) < P:
        msg = f"only {len(fixes)} range fixes in the last {P} keyframes"
        mean = float(np.mean(offsets)) if offsets else float("nan")
        return DriftReport(False, mean, len(fixes), offsets, fixes, msg)
    mean = float(np.mean(offsets))
    return DriftReport(mean > threshold, mean, len(fixes), offsets, fixes)


@dataclass
class UpgoResult:
    pose_trace: OptResult
    map_trace: OptResult | None
    fixed_first: bool
    n_position_factors: int
    cancelled: bool = False


def upgo_optimize(
    graph: FactorGraph,
    P: int = WINDOW,
    max_iter: int = 100,
    cancel=None,
    update_map: bool = True,
) -> UpgoResult:
    """Pose-graph correction with range, odometry and position factors, in place.

    Position factors come from range-only fixes on the last ``P`` keyframes.
    Range residuals are scaled by ``1 / sigma_r``; odometry residuals are
    unweighted.  The first keyframe is held fixed when it has fewer than three ranges.
    Afterwards, unless cancelled, landmarks are re-optimized against the
    corrected poses with every keyframe held fixed.  ``cancel`` is any
    object with ``is_set()`` (e.g. :class:`threading.Event`), checked
    between iterations.
    """
    K = len(graph.keyframes)
    if K == 0:
        raise ValueError("graph has no keyframes")
    fixes = range_fixes(graph, range(max(0, K - P), K))
    graph.positions = [PositionFactor(graph.keyframes[k].index, p) for k, p in sorted(fixes.items())]
    free_kf = np.array([not kf.fixed for kf in graph.keyframes])
    fixed_first = len(graph.keyframes[0].ranges) < 3
    if fixed_first:
        free_kf[0] = False

    rkf, ra, rd = _range_arrays(graph)
    kl = graph._kf_lookup()
    oi = np.array([kl[f.i] for f in graph.odometry], dtype=int)
    oj = np.array([kl[f.j] for f in graph.odometry], dtype=int)
    oR = np.array([f.R for f in graph.odometry]).reshape(-1, 3, 3)
    op = np.array([f.p for f in graph.odometry]).reshape(-1, 3)
    pk = np.array([kl[f.keyframe] for f in graph.positions], dtype=int)
    pp = np.array([f.p for f in graph.positions]).reshape(-1, 3)

    def build(state):
        groups = []
        if len(rd):
            groups.append(_range_group(state, rkf, ra, rd, 1.0 / graph.sigma_r, None))
        if len(oi):
            groups.append(_odometry_group(state, oi, oj, oR, op))
        if len(pk):
            groups.append(_position_group(state, pk, pp, graph.huber_position))
        return groups

    free_lm = np.zeros(len(graph.landmarks), dtype=bool)
    state, res = _optimize(_state_of(graph), free_kf, free_lm, build, max_iter=max_iter, cancel=cancel)
    _write_back(graph, state, free_kf, free_lm)
    map_res = None
    if update_map and not res.cancelled and graph.landmarks:
        map_res = landmark_only_ba(graph, cancel=cancel)
    cancelled = res.cancelled or (map_res is not None and map_res.cancelled)
    return UpgoResult(res, map_res, fixed_first, len(pk), cancelled)


def landmark_only_ba(graph: FactorGraph, max_iter: int = 50, cancel=None) -> OptResult:
    """Optimize landmark positions only; keyframe poses are untouched."""
    vkf, vlm, vz = _visual_arrays(graph)
    free_kf = np.zeros(len(graph.keyframes), dtype=bool)
    free_lm = _landmark_support(graph)
    cam = graph.camera

    def build(state):
        return [_reprojection_group(state, vkf, vlm, vz, cam, graph.visual_weight, graph.huber_pixel)]

    state, res = _optimize(_state_of(graph), free_kf, free_lm, build, max_iter=max_iter, cancel=cancel)
    _write_back(graph, state, free_kf, free_lm)
    return res


# --- relocalization -----------------------------------------------------------------------


@dataclass
class LoopCheck:
    accepted: bool
    max_discrepancy: float
    n_ranges: int
    warning: str = ""


def verify_loop_closure(candidate, ranges, anchors, epsilon_r: float = 0.5) -> LoopCheck:
    """Accept a loop-closure candidate iff every predicted range is within ``epsilon_r``.

    ``candidate`` is a :class:`Pose` or a position.  Without any valid range
    the check cannot disagree, so the candidate is accepted with a warning.
    """
    p = candidate.p if isinstance(candidate, Pose) else np.asarray(candidate, dtype=float)
    A = anchors.positions if isinstance(anchors, AnchorMap) else np.asarray(anchors, dtype=float).reshape(-1, 3)
    idx, d = _as_ranges(ranges, len(A))
    if len(d) == 0:
        logger.warning("loop closure check has no ranges; accepting unverified")
        return LoopCheck(True, 0.0, 0, "no valid ranges: candidate accepted unverified")
    err = np.abs(np.linalg.norm(p - A[idx], axis=1) - d)
    worst = float(np.max(err))
    return LoopCheck(bool(worst <= epsilon_r), worst, len(d))


def _restart_d0(dataset: Dataset, last_pose: Pose) -> float:
    k0 = dataset.valid[0]
    if k0.sum() >= 3:
        try:
            rng = {int(n): float(dataset.ranges[0, n]) for n in np.flatnonzero(k0)}
            return float(np.linalg.norm(trilaterate(rng, dataset.anchors, guess=last_pose.p)))
        except TrilaterationError:
            pass
    return float(np.linalg.norm(last_pose.p))


def fits_ranges(dataset: Dataset, A: AffineTransform7, level: float = 0.999) -> bool:
    """Chi-square goodness of fit of the range residuals under ``A``."""
    o, a, d = dataset.measurements()
    r = d - np.linalg.norm(A.apply(o) - a, axis=1)
    sigma = max(dataset.sigma_r, 1e-9)
    dof = max(len(d) - 7, 1)
    return float(r @ r) / sigma**2 <= chi2.ppf(level, dof)


def reinitialize_in_world(
    last_pose: Pose,
    dataset: Dataset,
    last_s: float,
    attempts: int = REINIT_ATTEMPTS,
    seed: int = 0,
    fit_level: float = 0.999,
) -> GatEstimate:
    """Re-anchor a restarted odometry frame in the world after tracking loss.

    The new odometry frame starts at the camera pose where tracking resumed,
    so ``(last_s, last_pose.R, last_pose.p)`` seeds the refinement.  NLS is
    tried on ``attempts`` growing prefixes of ``dataset``; a result counts
    only if the gate accepts it and its range residuals pass a chi-square
    test at ``fit_level`` (a confident but wrong local minimum fails this).
    Otherwise the QCQP initializer is run on all the data.  The returned method is ``reinit-nls`` or ``reinit-qcqp``;
    a ``singular`` status means the caller should fall back to a fresh
    alignment phase.
    """
    if dataset is None or not dataset.valid.any():
        raise ReinitError("no post-loss data: insufficient data to re-initialize")
    guess = AffineTransform7(last_s, last_pose.R, last_pose.p)
    K = len(dataset.odom)
    est = None
    for i in range(1, attempts + 1):
        n = max(1, int(math.ceil(K * i / attempts)))
        part = dataset.subset(np.arange(n))
        if part.valid.sum() < 7:
            continue
        est = refine_nls(part, guess)
        est.method = "reinit-nls"
        if est.status == GatStatus.ACCEPTED and fits_ranges(part, est.A, fit_level):
            return est
    if dataset.valid.sum() < 7:
        if est is None:
            raise ReinitError("fewer than 7 post-loss ranges: insufficient data")
        return est
    logger.info("re-initialization: NLS from the saved pose failed; solving the QCQP")
    est = estimate_gat(dataset, "qcqp+nls", d0=_restart_d0(dataset, last_pose), seed=seed)
    est.method = "reinit-qcqp"
    return est
