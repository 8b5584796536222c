"""Monte-Carlo benchmark of the alignment estimators, plus scenario builders.

``run_montecarlo`` draws, per trial, a start position in the area, a
random-walk trajectory bounded by ``R_m`` and by the flight volume, and a random similarity
transform, then scores each estimator by translation, rotation (geodesic)
and scale error.  ``scenario_singular`` builds the degenerate geometries
used to exercise observability analysis; ``scenario_drift`` and
``run_vro`` build and replay a range-blackout drift scene.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from uwbalign.gat import (
    GatStatus,
    QcqpError,
    assess,
    build_qcqp,
    default_guess,
    recover_parameters,
    refine_candidates,
    refine_nls,
    solve_qcqp,
)
from uwbalign.geometry import AffineTransform7, Pose, log_rotation, random_rotation, rodrigues, rotation_geodesic_error
from uwbalign.measurement import AnchorMap, Dataset, NoiseSpec, look_rotation, random_walk, synthesize_dataset
from uwbalign.vro import (
    DRIFT_THRESHOLD,
    WINDOW,
    CameraModel,
    FactorGraph,
    Keyframe,
    Landmark,
    Observation,
    OdometryFactor,
    ate,
    drift_detect,
    upgo_optimize,
    verify_loop_closure,
)

METHODS = ("nls", "qcqp", "qcqp+nls")


@dataclass
class McConfig:
    R_m: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    trials: int = 100
    sigma_r: float = 0.1
    sigma_o: float = 0.001
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    area: tuple[float, float] = (5.0, 5.0)
    z_range: tuple[float, float] = (0.5, 2.5)
    ceiling: float = 3.0
    anchors: AnchorMap = field(default_factory=AnchorMap.standard_layout)
    n_samples: int = 200
    n_starts: int = 8
    workers: int = 1

    def __post_init__(self):
        self.R_m = tuple(float(r) for r in self.R_m)
        self.methods = tuple(self.methods)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.R_m or any(r <= 0 for r in self.R_m):
            raise ValueError("R_m values must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")


@dataclass
class TrialResult:
    method: str
    R_m: float
    trial: int
    e_t: float
    e_R: float
    e_s: float
    status: str
    runtime_ms: float


def errors(A_hat: AffineTransform7, A_true: AffineTransform7) -> tuple[float, float, float]:
    """Translation distance, rotation geodesic angle, absolute scale difference."""
    return (
        float(np.linalg.norm(A_hat.t - A_true.t)),
        rotation_geodesic_error(A_true.R, A_hat.R),
        abs(A_hat.s - A_true.s),
    )


def draw_trial(cfg: McConfig, r_idx: int, trial: int) -> Dataset:
    """The synthetic dataset of one trial; depends only on (seed, R_m index, trial)."""
    rng = np.random.default_rng([cfg.seed, r_idx, trial])
    R_m = cfg.R_m[r_idx]
    start = np.array(
        [rng.uniform(0.0, cfg.area[0]), rng.uniform(0.0, cfg.area[1]), rng.uniform(*cfg.z_range)]
    )
    s = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    A = AffineTransform7(s, random_rotation(rng), start)
    walk_seed, noise_seed = (int(x) for x in rng.integers(0, 2**32, size=2))
    # the vehicle stays inside the flight volume as well as within R_m of its start
    box = ([0.0, 0.0, 0.0], [cfg.area[0], cfg.area[1], cfg.ceiling])
    P = random_walk(R_m, cfg.n_samples, seed=walk_seed, start=start, bounds=box)
    return synthesize_dataset(P, cfg.anchors, A, NoiseSpec(cfg.sigma_r, cfg.sigma_o, noise_seed))


def _result(method, R_m, trial, est, A_true, ms) -> TrialResult:
    return TrialResult(method, R_m, trial, *errors(est.A, A_true), est.status.value, ms)


def run_trial(cfg: McConfig, r_idx: int, trial: int) -> list[TrialResult]:
    ds = draw_trial(cfg, r_idx, trial)
    A_true, R_m = ds.truth, cfg.R_m[r_idx]
    out = []
    if "nls" in cfg.methods:
        t0 = time.perf_counter()
        est = refine_nls(ds, default_guess(ds))
        out.append(_result("nls", R_m, trial, est, A_true, 1000.0 * (time.perf_counter() - t0)))
    if "qcqp" in cfg.methods or "qcqp+nls" in cfg.methods:
        t0 = time.perf_counter()
        try:
            res = solve_qcqp(build_qcqp(ds, ds.d0), n_starts=cfg.n_starts, seed=trial)
            A0 = recover_parameters(res.x)
        except QcqpError:
            res = A0 = None
        t_q = 1000.0 * (time.perf_counter() - t0)
        if "qcqp" in cfg.methods:
            if A0 is None:
                nan = float("nan")
                out.append(TrialResult("qcqp", R_m, trial, nan, nan, nan, "failed", t_q))
            else:
                sigma, status, _, _ = assess(ds, A0, GatStatus.INITIAL)
                out.append(TrialResult("qcqp", R_m, trial, *errors(A0, A_true), status.value, t_q))
        if "qcqp+nls" in cfg.methods:
            t1 = time.perf_counter()
            if res is None:
                est = refine_nls(ds, default_guess(ds))
            else:
                est = refine_candidates(ds, res)
            out.append(_result("qcqp+nls", R_m, trial, est, A_true, t_q + 1000.0 * (time.perf_counter() - t1)))
    return out


def _run_task(cfg: McConfig, task) -> list[TrialResult]:
    return run_trial(cfg, *task)


def run_montecarlo(cfg: McConfig) -> list[TrialResult]:
    """All trials of ``cfg``, sorted by (method, R_m, trial); seed-deterministic."""
    tasks = [(r, k) for r in range(len(cfg.R_m)) for k in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(partial(_run_task, cfg), tasks, chunksize=max(1, len(tasks) // (4 * cfg.workers))))
    else:
        chunks = [_run_task(cfg, t) for t in tasks]
    results = [r for chunk in chunks for r in chunk]
    return sorted(results, key=lambda r: (r.method, r.R_m, r.trial))


# --- summaries ------------------------------------------------------------------------


def summarize(results: list[TrialResult]) -> dict:
    """Quartiles of each error per (method, R_m); failed trials are counted, not ranked."""
    groups: dict[tuple[str, float], list[TrialResult]] = {}
    for r in results:
        groups.setdefault((r.method, r.R_m), []).append(r)
    rows = []
    for (method, R_m), rs in sorted(groups.items()):
        row = {"method": method, "R_m": R_m, "n": len(rs), "failed": sum(r.status == "failed" for r in rs)}
        for key in ("e_t", "e_R", "e_s"):
            v = np.array([getattr(r, key) for r in rs], dtype=float)
            v = v[np.isfinite(v)]
            if len(v):
                q25, q50, q75 = np.percentile(v, [25, 50, 75])
                row[key] = {"q25": float(q25), "median": float(q50), "q75": float(q75)}
            else:
                row[key] = None
        row["accepted"] = sum(r.status == GatStatus.ACCEPTED.value for r in rs)
        rows.append(row)
    return {"groups": rows}


def median_of(summary: dict, method: str, R_m: float, key: str) -> float:
    for row in summary["groups"]:
        if row["method"] == method and row["R_m"] == R_m:
            return row[key]["median"]
    raise KeyError((method, R_m))


def results_csv(results: list[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "R_m", "trial", "e_t", "e_R", "e_s", "status", "runtime_ms"])
    for r in results:
        w.writerow([r.method, repr(r.R_m), r.trial, repr(r.e_t), repr(r.e_R), repr(r.e_s), r.status, f"{r.runtime_ms:.3f}"])
    return buf.getvalue()


def plot_data_tsv(summary: dict) -> str:
    """One line per (method, R_m, metric) with q25, median, q75."""
    lines = ["method\tR_m\tmetric\tq25\tmedian\tq75"]
    for row in summary["groups"]:
        for key in ("e_t", "e_R", "e_s"):
            q = row[key]
            vals = ("nan", "nan", "nan") if q is None else (repr(q["q25"]), repr(q["median"]), repr(q["q75"]))
            lines.append("\t".join([row["method"], repr(row["R_m"]), key, *vals]))
    return "\n".join(lines) + "\n"


# --- degenerate and generic geometries ---------------------------------------------------

SINGULAR_KINDS = ("planar", "sphere", "static", "line", "generic")


def scenario_singular(kind: str, seed: int = 0, n: int = 40, sigma_r: float = 0.1, noisy: bool = False) -> Dataset:
    """Dataset with a known (possibly degenerate) observability structure.

    * ``planar``: anchors and trajectory share the plane z = 0.
    * ``sphere``: each sample ranges to one anchor only and lies on the sphere
      whose diameter joins that anchor and the start.
    * ``static``: the robot never moves.
    * ``line``: the robot moves along one straight line.
    * ``generic``: a 2 m random walk among the four standard anchors.

    Measurements are exact unless ``noisy``, so the degeneracy survives
    estimation; ``sigma_r`` is recorded as the nominal range noise either
    way.  Odometry is always exact.
    """
    rng = np.random.default_rng([seed, SINGULAR_KINDS.index(kind) if kind in SINGULAR_KINDS else 99])
    if kind not in SINGULAR_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; choose from {SINGULAR_KINDS}")
    anchors = AnchorMap.standard_layout()
    start = np.array([rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0), rng.uniform(0.5, 2.5)])
    mask = None
    if kind == "planar":
        anchors = AnchorMap(np.array([[0.0, 0, 0], [5.0, 0, 0], [0.0, 5, 0], [5.0, 5, 0]]))
        start[2] = 0.0
        P = random_walk(1.5, n, seed=int(rng.integers(2**32)), start=start)
        P[:, 2] = 0.0
    elif kind == "sphere":
        P = np.empty((n, 3))
        mask = np.zeros((n, len(anchors)), dtype=bool)
        P[0] = start
        mask[0, 0] = True
        for k in range(1, n):
            j = k % len(anchors)
            a = anchors.positions[j]
            c, r = 0.5 * (a + start), 0.5 * np.linalg.norm(a - start)
            u = rng.normal(size=3)
            P[k] = c + r * u / np.linalg.norm(u)
            mask[k, j] = True
    elif kind == "static":
        P = np.tile(start, (n, 1))
    elif kind == "line":
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        P = start + np.linspace(0.0, 2.0, n)[:, None] * u
    else:
        P = random_walk(2.0, n, seed=int(rng.integers(2**32)), start=start)
    A = AffineTransform7(float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))), random_rotation(rng), start)
    noise = NoiseSpec(sigma_r if noisy else 0.0, 0.0, int(rng.integers(2**32)))
    ds = synthesize_dataset(P, anchors, A, noise, los_mask=mask)
    ds.sigma_r = sigma_r
    return ds


# --- range-blackout drift scene --------------------------------------------------------------

SCENARIO_FORMAT = 1


def scenario_drift(
    n_keyframes: int = 60,
    blackout: tuple[int, int] | None = (20, 45),
    bias: tuple[float, float, float] = (0.1, 0.0, 0.0),
    seed: int = 0,
    n_landmarks: int = 200,
    sigma_r: float = 0.1,
    sigma_px: float = 1.0,
    sigma_odom: tuple[float, float] = (0.002, 0.0005),
) -> dict:
    """Scenario document for ``run_vro``: one lap around the anchor area.

    Keyframes in ``[blackout[0], blackout[1])`` have no ranges, and their
    odometry increments carry an extra world-frame translation ``bias``
    (meters per keyframe), so the dead-reckoned estimate drifts by
    ``|bias| * gap`` during the blackout.  Measurements are synthesized
    later from the run seed, so the document holds only ground truth and
    the noise and LoS schedules.
    """
    rng = np.random.default_rng(seed)
    center = np.array([2.5, 2.5, 1.5])
    ang = np.linspace(0.0, 2.0 * np.pi, n_keyframes, endpoint=False)
    P = center + np.column_stack([2.0 * np.cos(ang), 2.0 * np.sin(ang), 0.3 * np.sin(2.0 * ang)])
    tangent = np.column_stack([-np.sin(ang), np.cos(ang), 0.6 * np.cos(2.0 * ang) / 2.0])
    Rs = [look_rotation(f) for f in tangent]
    phi = rng.uniform(0.0, 2.0 * np.pi, n_landmarks)
    L = np.column_stack(
        [center[0] + 6.0 * np.cos(phi), center[1] + 6.0 * np.sin(phi), rng.uniform(0.0, 3.0, n_landmarks)]
    )
    anchors = AnchorMap.standard_layout()
    gap = (0, 0) if blackout is None else (int(blackout[0]), int(blackout[1]))
    los = [[] if gap[0] <= k < gap[1] else list(range(len(anchors))) for k in range(n_keyframes)]
    last = n_keyframes - 1
    true_loop = P[last]
    alias = true_loop + 5.0 * np.array([np.cos(ang[last] + 1.0), np.sin(ang[last] + 1.0), 0.0])
    return {
        "format": SCENARIO_FORMAT,
        "kind": "vro-drift",
        "anchors": [{"id": int(i), "pos": p.tolist()} for i, p in zip(anchors.ids, anchors.positions)],
        "camera": asdict(CameraModel()),
        "trajectory": [{"i": k, "p": P[k].tolist(), "R": Rs[k].ravel().tolist()} for k in range(n_keyframes)],
        "landmarks": [{"id": l, "pos": L[l].tolist()} for l in range(n_landmarks)],
        "los": los,
        "noise": {"sigma_r": sigma_r, "sigma_px": sigma_px, "sigma_odom_t": sigma_odom[0], "sigma_odom_R": sigma_odom[1]},
        "drift": {"start": gap[0], "end": gap[1], "bias": list(map(float, bias))},
        "loop_candidates": [
            {"keyframe": last, "kind": "true", "p": true_loop.tolist()},
            {"keyframe": last, "kind": "alias", "p": alias.tolist()},
        ],
    }


def _scenario_parts(doc: dict):
    try:
        anchors = AnchorMap(
            np.array([a["pos"] for a in doc["anchors"]], dtype=float), [int(a["id"]) for a in doc["anchors"]]
        )
        traj = [Pose(np.array(t["R"], dtype=float).reshape(3, 3), t["p"]) for t in doc["trajectory"]]
        idx = [int(t["i"]) for t in doc["trajectory"]]
        lms = [(int(l["id"]), np.array(l["pos"], dtype=float)) for l in doc.get("landmarks", [])]
        los = [list(map(int, x)) for x in doc["los"]]
        noise = doc["noise"]
        drift = doc.get("drift", {"start": 0, "end": 0, "bias": [0.0, 0.0, 0.0]})
        cam = CameraModel(**doc.get("camera", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed scenario: {exc}") from exc
    if len(los) != len(traj):
        raise ValueError("malformed scenario: LoS schedule length differs from trajectory")
    return anchors, traj, idx, lms, los, noise, drift, cam


def build_vro_graph(doc: dict, seed: int = 0):
    """Synthesize measurements for a scenario and return ``(graph, truth_positions)``.

    Keyframe poses in the graph are the dead-reckoned odometry estimate
    starting from the true first pose.
    """
    anchors, traj, idx, lms, los, noise, drift, cam = _scenario_parts(doc)
    rng = np.random.default_rng(seed)
    K = len(traj)
    bias = np.asarray(drift["bias"], dtype=float)
    sig_t, sig_R = float(noise.get("sigma_odom_t", 0.0)), float(noise.get("sigma_odom_R", 0.0))
    odometry = []
    est = [traj[0]]
    for k in range(1, K):
        Ti, Tj = traj[k - 1], traj[k]
        dp = Tj.p - Ti.p
        if drift["start"] <= k < drift["end"]:
            dp = dp + bias
        Rm = Ti.R.T @ Tj.R
        if sig_R > 0:
            Rm = Rm @ rodrigues(sig_R * rng.normal(size=3))
        pm = Ti.R.T @ dp + sig_t * rng.normal(size=3)
        odometry.append(OdometryFactor(idx[k - 1], idx[k], Rm, pm))
        prev = est[-1]
        est.append(Pose(prev.R @ Rm, prev.p + prev.R @ pm))
    sr = float(noise["sigma_r"])
    keyframes = []
    for k in range(K):
        rng_k = {}
        for n in los[k]:
            d = np.linalg.norm(traj[k].p - anchors.positions[n]) + sr * rng.normal()
            rng_k[n] = float(max(d, 0.0))
        keyframes.append(Keyframe(idx[k], est[k], rng_k))
    sig_px = float(noise.get("sigma_px", 0.0))
    landmarks, observations = [], []
    for lid, X in lms:
        seen = []
        for k in range(K):
            Xc = traj[k].R.T @ (X - traj[k].p)
            if Xc[2] <= 0.1:
                continue
            z = cam.project(Xc)
            if cam.in_image(z):
                seen.append((k, z))
        if len(seen) < 2:
            continue
        landmarks.append(Landmark(lid, X + 0.05 * rng.normal(size=3)))
        for k, z in seen:
            zn = z + sig_px * rng.normal(size=2)
            observations.append(Observation(idx[k], lid, (float(zn[0]), float(zn[1]))))
    graph = FactorGraph(
        keyframes, anchors, cam, landmarks, observations, odometry, sigma_r=sr if sr > 0 else 1e-3
    )
    truth = np.array([T.p for T in traj])
    return graph, truth


def run_vro(
    doc: dict,
    seed: int = 0,
    drift_threshold: float = DRIFT_THRESHOLD,
    window: int = WINDOW,
    epsilon_r: float = 0.5,
):
    """Drift check, pose-graph correction and loop-closure gating on a scenario.

    Returns ``(graph, summary)``; ``summary`` is JSON-ready.
    """
    graph, truth = build_vro_graph(doc, seed)
    pre = ate(graph.positions_array(), truth)
    report = drift_detect(graph, window, drift_threshold)
    summary = {
        "keyframes": len(graph.keyframes),
        "landmarks": len(graph.landmarks),
        "ate_pre": pre,
        "drift": {
            "detected": report.detected,
            "mean_offset": report.mean_offset if math.isfinite(report.mean_offset) else None,
            "n_fixes": report.n_fixes,
            "message": report.message,
        },
    }
    if report.detected:
        res = upgo_optimize(graph, window)
        summary["upgo"] = {
            "iterations": res.pose_trace.iterations,
            "initial_cost": res.pose_trace.cost_trace[0],
            "final_cost": res.pose_trace.cost_trace[-1],
            "fixed_first": res.fixed_first,
            "position_factors": res.n_position_factors,
        }
    summary["ate_post"] = ate(graph.positions_array(), truth)
    checks = []
    lookup = graph._kf_lookup()
    for cand in doc.get("loop_candidates", []):
        kf = graph.keyframes[lookup[int(cand["keyframe"])]]
        chk = verify_loop_closure(np.asarray(cand["p"], dtype=float), kf.ranges, graph.anchors, epsilon_r)
        checks.append(
            {
                "keyframe": int(cand["keyframe"]),
                "kind": cand.get("kind", ""),
                "accepted": chk.accepted,
                "max_discrepancy": chk.max_discrepancy,
                "warning": chk.warning,
            }
        )
    summary["loop_closures"] = checks
    return graph, summary


def pose_rows(graph: FactorGraph) -> list[list]:
    """``[i, px, py, pz, vx, vy, vz]`` per keyframe (rotation vector of camera-to-world)."""
    return [[kf.index, *kf.pose.p.tolist(), *log_rotation(kf.pose.R).tolist()] for kf in graph.keyframes]
