"""Range observation model, dataset container and synthetic data.

All randomness goes through ``numpy.random.default_rng(seed)`` (PCG64), so a
seed fully determines every generated array.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from uwbalign.geometry import AffineTransform7, Pose

STANDARD_ANCHORS = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 1.0], [0.0, 5.0, 2.0], [5.0, 5.0, 3.0]])


@dataclass(frozen=True)
class Anchor:
    id: int
    position: np.ndarray


class AnchorMap:
    """Ordered set of anchors with unique integer ids."""

    def __init__(self, positions, ids: Sequence[int] | None = None):
        positions = np.array(positions, dtype=float).reshape(-1, 3)
        if len(positions) < 1:
            raise ValueError("an anchor map needs at least one anchor")
        ids = tuple(int(i) for i in (range(len(positions)) if ids is None else ids))
        if len(ids) != len(positions):
            raise ValueError("ids and positions differ in length")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate anchor ids: {ids}")
        self.positions = positions
        self.positions.flags.writeable = False
        self.ids = ids

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for i, p in zip(self.ids, self.positions):
            yield Anchor(i, p)

    def __eq__(self, other):
        return (
            isinstance(other, AnchorMap)
            and self.ids == other.ids
            and np.array_equal(self.positions, other.positions)
        )

    def index(self, anchor_id: int) -> int:
        return self.ids.index(int(anchor_id))

    def is_nonsingular(self, tol: float = 1e-9) -> bool:
        """True for at least three anchors that are not on one straight line."""
        if len(self) < 3:
            return False
        centered = self.positions - self.positions.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        return sv[1] > tol * max(sv[0], 1.0)

    @classmethod
    def standard_layout(cls) -> AnchorMap:
        """Four anchors over a 5 m x 5 m area at heights 0..3 m."""
        return cls(STANDARD_ANCHORS)


@dataclass(frozen=True)
class RangeSample:
    k: int
    n: int
    d: float
    valid: bool


@dataclass(frozen=True)
class OdomSample:
    k: int
    o: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class NoiseSpec:
    sigma_r: float = 0.1
    sigma_o: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.sigma_r < 0 or self.sigma_o < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass
class Dataset:
    """Up-to-scale odometry with per-anchor range samples.

    ``ranges[k, j]`` is the distance from sample ``k`` to the anchor at
    position ``j`` of ``anchors``; ``valid[k, j]`` is False where there was
    no line of sight, and the stored distance is then 0.
    """

    odom: np.ndarray
    ranges: np.ndarray
    valid: np.ndarray
    anchors: AnchorMap
    sigma_r: float = 0.0
    sigma_o: float = 0.0
    times: np.ndarray | None = None
    rotations: np.ndarray | None = None
    d0: float | None = None
    truth: AffineTransform7 | None = None

    def __post_init__(self):
        self.odom = np.array(self.odom, dtype=float).reshape(-1, 3)
        K, N = len(self.odom), len(self.anchors)
        self.ranges = np.array(self.ranges, dtype=float).reshape(K, N)
        self.valid = np.array(self.valid, dtype=bool).reshape(K, N)
        self.ranges[~self.valid] = 0.0
        self.times = np.arange(K) if self.times is None else np.array(self.times, dtype=int)
        if len(self.times) != K:
            raise ValueError("times and odometry differ in length")
        if self.rotations is not None:
            self.rotations = np.array(self.rotations, dtype=float).reshape(K, 3, 3)
        if np.any(self.ranges < 0):
            raise ValueError("negative range")

    def __len__(self):
        return len(self.odom)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def measurements(self):
        """Valid measurements flattened in (k, anchor) order.

        Returns ``(o, a, d)`` with shapes ``(M, 3)``, ``(M, 3)``, ``(M,)``.
        """
        kk, jj = np.nonzero(self.valid)
        return self.odom[kk], self.anchors.positions[jj], self.ranges[kk, jj]

    @property
    def odometry(self) -> list[OdomSample]:
        rots = self.rotations if self.rotations is not None else np.broadcast_to(np.eye(3), (len(self), 3, 3))
        return [OdomSample(int(k), o, R) for k, o, R in zip(self.times, self.odom, rots)]

    @property
    def range_samples(self) -> list[RangeSample]:
        out = []
        for row, k in enumerate(self.times):
            for j, n in enumerate(self.anchors.ids):
                out.append(RangeSample(int(k), n, float(self.ranges[row, j]), bool(self.valid[row, j])))
        return out

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows)
        return Dataset(
            self.odom[rows],
            self.ranges[rows],
            self.valid[rows],
            self.anchors,
            self.sigma_r,
            self.sigma_o,
            times=self.times[rows],
            rotations=None if self.rotations is None else self.rotations[rows],
            d0=self.d0,
            truth=self.truth,
        )

    # --- serialization -------------------------------------------------

    def to_json_dict(self) -> dict:
        doc = {
            "format": 1,
            "sigma_r": self.sigma_r,
            "sigma_o": self.sigma_o,
            "anchors": [{"id": i, "pos": p.tolist()} for i, p in zip(self.anchors.ids, self.anchors.positions)],
            "samples": [],
        }
        if self.d0 is not None:
            doc["d0"] = self.d0
        if self.truth is not None:
            doc["truth"] = transform_to_json(self.truth)
        for row, k in enumerate(self.times):
            sample = {
                "k": int(k),
                "o": self.odom[row].tolist(),
                "ranges": [
                    {"n": n, "d": float(self.ranges[row, j])}
                    for j, n in enumerate(self.anchors.ids)
                    if self.valid[row, j]
                ],
            }
            if self.rotations is not None:
                sample["R"] = self.rotations[row].ravel().tolist()
            doc["samples"].append(sample)
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> Dataset:
        try:
            anchors = AnchorMap([a["pos"] for a in doc["anchors"]], [a["id"] for a in doc["anchors"]])
            samples = doc["samples"]
            K, N = len(samples), len(anchors)
            odom = np.array([s["o"] for s in samples], dtype=float).reshape(K, 3)
            ranges = np.zeros((K, N))
            valid = np.zeros((K, N), dtype=bool)
            for row, s in enumerate(samples):
                for r in s.get("ranges", []):
                    j = anchors.index(r["n"])
                    ranges[row, j] = float(r["d"])
                    valid[row, j] = True
            rotations = None
            if samples and all("R" in s for s in samples):
                rotations = np.array([s["R"] for s in samples], dtype=float).reshape(K, 3, 3)
            truth = transform_from_json(doc["truth"]) if "truth" in doc else None
            return cls(
                odom,
                ranges,
                valid,
                anchors,
                float(doc.get("sigma_r", 0.0)),
                float(doc.get("sigma_o", 0.0)),
                times=np.array([int(s["k"]) for s in samples], dtype=int),
                rotations=rotations,
                d0=float(doc["d0"]) if doc.get("d0") is not None else None,
                truth=truth,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed dataset document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> Dataset:
        return cls.from_json_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "ox", "oy", "oz", "n", "d"])
        for row, k in enumerate(self.times):
            for j, n in enumerate(self.anchors.ids):
                if self.valid[row, j]:
                    w.writerow([int(k), *map(repr, self.odom[row].tolist()), n, repr(float(self.ranges[row, j]))])
        return buf.getvalue()


def dumps(doc, indent: int | None = None) -> str:
    # json emits the shortest repr that round-trips each float exactly
    return json.dumps(doc, indent=indent, sort_keys=False, allow_nan=False)


def transform_to_json(A: AffineTransform7) -> dict:
    return {"s": A.s, "R": A.R.ravel().tolist(), "t": A.t.tolist()}


def transform_from_json(doc: dict) -> AffineTransform7:
    return AffineTransform7(float(doc["s"]), np.array(doc["R"], dtype=float).reshape(3, 3), doc["t"])


# --- observation model ----------------------------------------------------


def predict_range(A: AffineTransform7, o, anchor) -> float | np.ndarray:
    """Noiseless distance ``|t + s R o - a|``; vectorizes over rows of ``o``/``anchor``."""
    rho = A.apply(o) - np.asarray(anchor, dtype=float)
    return np.linalg.norm(rho, axis=-1)


def debias_squared_range(d, sigma_r: float):
    """Squared range with the mean of the squared-noise term removed.

    ``d~^2 = d^2 + 2 d eta + eta^2`` has expectation ``d^2 + sigma_r^2``.
    """
    return np.asarray(d, dtype=float) ** 2 - sigma_r**2


# --- trajectories -----------------------------------------------------------


def random_walk(
    R_m: float, n: int = 200, seed: int = 0, start=(0.0, 0.0, 0.0), step: float | None = None, bounds=None
) -> np.ndarray:
    """Random walk of ``n`` positions that stays within ``R_m`` of ``start``.

    Steps have length ``R_m / 20`` in a uniformly random direction; a step
    leaving the ball is reflected radially back inside it.  ``bounds`` is an
    optional box ``(lo, hi)``: steps that would leave it are redrawn.
    """
    if not R_m > 0:
        raise ValueError("R_m must be positive")
    rng = np.random.default_rng(seed)
    start = np.asarray(start, dtype=float)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(start < lo) or np.any(start > hi):
            raise ValueError("start lies outside bounds")
    step = R_m / 20.0 if step is None else step
    out = np.empty((n, 3))
    p = start.copy()
    for i in range(n):
        out[i] = p
        for _ in range(100):
            d = rng.normal(size=3)
            q = p + step * d / np.linalg.norm(d)
            r = np.linalg.norm(q - start)
            if r > R_m:
                q = start + (q - start) * (2.0 * R_m - r) / r
            if bounds is None or (np.all(q >= lo) and np.all(q <= hi)):
                p = q
                break
    return out


def circle(center, radius: float, n: int = 100, plane: str = "xy") -> np.ndarray:
    axes = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}[plane]
    ang = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    out = np.tile(np.asarray(center, dtype=float), (n, 1))
    out[:, axes[0]] += radius * np.cos(ang)
    out[:, axes[1]] += radius * np.sin(ang)
    return out


def sphere_surface(center, radius: float, n: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center, dtype=float) + radius * d


def poses_from_positions(positions) -> list[Pose]:
    """Poses looking along the direction of travel (z-forward camera)."""
    positions = np.asarray(positions, dtype=float)
    poses = []
    for i, p in enumerate(positions):
        j = min(i + 1, len(positions) - 1)
        fwd = positions[j] - positions[j - 1] if len(positions) > 1 else np.array([1.0, 0.0, 0.0])
        poses.append(Pose(look_rotation(fwd), p))
    return poses


def look_rotation(forward) -> np.ndarray:
    """Camera-to-world rotation whose z axis points along ``forward``."""
    z = np.asarray(forward, dtype=float)
    nz = np.linalg.norm(z)
    z = np.array([1.0, 0.0, 0.0]) if nz < 1e-12 else z / nz
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.95 else np.array([1.0, 0.0, 0.0])
    x = np.cross(-up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _positions_and_rotations(trajectory):
    if isinstance(trajectory, np.ndarray) or (trajectory and not isinstance(trajectory[0], Pose)):
        P = np.asarray(trajectory, dtype=float).reshape(-1, 3)
        return P, None
    P = np.array([pose.p for pose in trajectory])
    Rs = np.array([pose.R for pose in trajectory])
    return P, Rs


def synthesize_dataset(
    trajectory,
    anchors: AnchorMap,
    A_true: AffineTransform7,
    noise: NoiseSpec = NoiseSpec(),
    los_mask: np.ndarray | None = None,
) -> Dataset:
    """Simulate odometry and ranges along a world-frame trajectory.

    The odometry frame is the first pose of the trajectory mapped back
    through ``A_true``, i.e. ``o_k = R^T (p_k - t) / s`` plus i.i.d. noise
    of std ``sigma_o`` on every sample except ``o_0`` (which is exactly 0
    when ``t`` equals the starting position).  Ranges get i.i.d. Gaussian
    noise of std ``sigma_r`` and are clipped at 0.
    """
    P, Rw = _positions_and_rotations(trajectory)
    if len(P) == 0:
        raise ValueError("empty trajectory")
    if not A_true.is_valid():
        raise ValueError("A_true is not a valid similarity transform")
    rng = np.random.default_rng(noise.seed)
    K, N = len(P), len(anchors)
    odom_true = (P - A_true.t) @ A_true.R / A_true.s
    odom = odom_true + noise.sigma_o * rng.normal(size=(K, 3))
    start_at_origin = np.allclose(odom_true[0], 0.0, atol=1e-12)
    if start_at_origin:
        odom[0] = 0.0
    d_true = np.linalg.norm(P[:, None, :] - anchors.positions[None, :, :], axis=2)
    ranges = np.maximum(d_true + noise.sigma_r * rng.normal(size=(K, N)), 0.0)
    valid = np.ones((K, N), dtype=bool) if los_mask is None else np.array(los_mask, dtype=bool).reshape(K, N)
    rotations = None
    if Rw is not None:
        rotations = np.einsum("ji,kjl->kil", A_true.R, Rw)
    # distance from the world origin to the start, "measured" with range noise
    d0 = abs(float(np.linalg.norm(A_true.t)) + noise.sigma_r * rng.normal())
    return Dataset(odom, ranges, valid, anchors, noise.sigma_r, noise.sigma_o, rotations=rotations, d0=d0, truth=A_true)

