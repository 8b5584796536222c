import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbalign import gat
from uwbalign.fim import SingularClass
from uwbalign.gat import (
    GatStatus,
    QcqpError,
    build_data_matrix,
    build_data_row,
    build_qcqp,
    constraint_matrices,
    estimate_gat,
    lift,
    recover_parameters,
    refine_nls,
    solve_qcqp,
    squared_range_weights,
    transform_world,
    uncertainty_gate,
)
from uwbalign.geometry import AffineTransform7, Pose, random_rotation, rodrigues, rotation_geodesic_error
from uwbalign.measurement import AnchorMap, NoiseSpec, random_walk, synthesize_dataset
from uwbalign.sim import errors, scenario_singular


def noisy_dataset(seed, R_m=1.0, n=200, sigma_r=0.1, sigma_o=0.001):
    rng = np.random.default_rng(seed)
    start = np.array([rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0.5, 2.5)])
    A = AffineTransform7(float(np.exp(rng.uniform(np.log(0.5), np.log(2)))), random_rotation(rng), start)
    P = random_walk(R_m, n, seed=seed, start=start)
    return synthesize_dataset(P, AnchorMap.standard_layout(), A, NoiseSpec(sigma_r, sigma_o, seed))


transforms = st.builds(
    lambda s, seed, t: AffineTransform7(s, random_rotation(np.random.default_rng(seed)), t),
    st.floats(0.1, 10.0),
    st.integers(0, 2**31),
    st.lists(st.floats(-10, 10), min_size=3, max_size=3),
)


@settings(max_examples=50)
@given(transforms)
def test_lift_satisfies_every_constraint(A):
    x = lift(A)
    d0 = np.linalg.norm(A.t)
    for P, p in constraint_matrices(d0):
        assert np.allclose(P, P.T)
        assert x @ P @ x == pytest.approx(p, abs=1e-9 * max(1.0, d0**2, A.s**2))
    assert len(constraint_matrices(d0)) == 13


@settings(max_examples=50)
@given(transforms, st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_data_row_gives_squared_range(A, o, a):
    o, a = np.array(o), np.array(a)
    d2 = np.sum((A.apply(o) - a) ** 2)
    row = build_data_row(o, a, 0.7)
    assert row @ lift(A) == pytest.approx(d2 - 0.7, rel=1e-9, abs=1e-8)
    np.testing.assert_allclose(build_data_matrix(o, a, 0.7)[0], row)


def test_squared_range_weights():
    np.testing.assert_allclose(squared_range_weights([2.0], 0.1), [1 / (4 * 4 * 0.01 + 2 * 1e-4)])
    np.testing.assert_allclose(squared_range_weights([2.0, 4.0], 0.0), [0.25, 1 / 16])


def test_noiseless_qcqp_cost_zero_at_truth_and_recovered():
    for seed in range(5):
        ds = noisy_dataset(seed, R_m=2.0, sigma_r=0.0, sigma_o=0.0)
        prob = build_qcqp(ds, ds.d0)
        x_true = lift(ds.truth)
        assert prob.cost(x_true) < 1e-12 * max(1.0, np.abs(prob.P0).max())
        res = solve_qcqp(prob, seed=seed)
        assert res.violation <= 1e-6
        et, eR, es = errors(recover_parameters(res.x), ds.truth)
        assert max(et, eR, es) < 1e-5


def test_recover_parameters_sign_and_degenerate():
    A = AffineTransform7(1.7, rodrigues([0.3, -0.2, 1.0]), [1, 2, 3])
    B = recover_parameters(-lift(A))
    np.testing.assert_allclose(B.matrix(), A.matrix(), atol=1e-12)
    with pytest.raises(QcqpError):
        recover_parameters(np.zeros(18))


def test_build_qcqp_requires_data():
    ds = noisy_dataset(0, n=1)
    with pytest.raises(ValueError):
        build_qcqp(ds, 1.0)
    with pytest.raises(ValueError):
        build_qcqp(noisy_dataset(0, n=20), None)


def test_uncertainty_gate_examples():
    assert uncertainty_gate(np.full(7, 0.05)) == (GatStatus.ACCEPTED, None)
    assert uncertainty_gate(np.full(7, 0.5)) == (GatStatus.REFINED, None)
    sig = np.full(7, 0.01)
    sig[4] = 2000.0
    assert uncertainty_gate(sig) == (GatStatus.SINGULAR, 4)
    assert uncertainty_gate(None)[0] == GatStatus.SINGULAR
    # custom thresholds
    assert uncertainty_gate(np.full(7, 0.5), accept=1.0)[0] == GatStatus.ACCEPTED


def test_nls_converges_from_nearby_guess():
    ds = noisy_dataset(3, R_m=2.0, sigma_r=0.0, sigma_o=0.0)
    A = ds.truth
    guess = AffineTransform7(A.s * 1.1, A.R @ rodrigues([0.1, -0.1, 0.05]), A.t + 0.2)
    est = refine_nls(ds, guess)
    assert est.iterations <= gat.NLS_MAX_ITER
    assert max(errors(est.A, A)) < 1e-8
    assert est.status == GatStatus.ACCEPTED
    assert all(b <= a + 1e-15 for a, b in zip(est.cost_trace, est.cost_trace[1:]))


def test_nls_rotation_vector_stays_on_principal_branch():
    ds = noisy_dataset(4, R_m=2.0, sigma_r=0.0, sigma_o=0.0)
    A = ds.truth
    near_pi = AffineTransform7(A.s, A.R @ rodrigues([0, 0, 3.1]), A.t)
    est = refine_nls(ds, near_pi)
    assert np.linalg.norm(est.theta[3:6]) <= np.pi + 1e-12


@pytest.mark.parametrize("seed", range(4))
def test_qcqp_nls_at_least_as_good_as_qcqp(seed):
    ds = noisy_dataset(seed)
    q = estimate_gat(ds, "qcqp", seed=seed)
    qn = estimate_gat(ds, "qcqp+nls", seed=seed)
    assert q.status in (GatStatus.INITIAL, GatStatus.ACCEPTED, GatStatus.SINGULAR)
    assert qn.method == "qcqp+nls"
    o, a, d = ds.measurements()
    cost = lambda A: np.sum((d - np.linalg.norm(A.apply(o) - a, axis=1)) ** 2)
    assert cost(qn.A) <= cost(q.A) + 1e-12
    et, eR, es = errors(qn.A, ds.truth)
    assert et < 0.3 and eR < 0.3 and es < 0.2


def test_estimate_gat_arguments():
    ds = noisy_dataset(0, n=30)
    with pytest.raises(ValueError):
        estimate_gat(ds, "magic")
    ds.d0 = None
    with pytest.raises(ValueError):
        estimate_gat(ds, "qcqp")
    assert estimate_gat(ds, "nls").method == "nls"


def test_qcqp_failure_falls_back_to_nls(monkeypatch):
    ds = noisy_dataset(1, n=50)

    def fail(*args, **kwargs):
        raise QcqpError("no feasible point")

    monkeypatch.setattr(gat, "solve_qcqp", fail)
    est = estimate_gat(ds, "qcqp+nls")
    assert est.method == "nls-fallback"
    with pytest.raises(QcqpError):
        estimate_gat(ds, "qcqp")


def test_singular_dataset_reported():
    ds = scenario_singular("planar", seed=0)
    est = estimate_gat(ds, "qcqp+nls")
    assert est.status == GatStatus.SINGULAR
    assert est.singular_class == SingularClass.TRANSLATION_DEFICIENT


def test_transform_world_applies_similarity():
    A = AffineTransform7(2.0, rodrigues([0, 0, np.pi / 2]), [1, 0, 0])
    kfs, pts = transform_world(A, [Pose(np.eye(3), [1, 0, 0])], [[0, 1, 0]])
    np.testing.assert_allclose(kfs[0].p, [1, 2, 0], atol=1e-12)
    np.testing.assert_allclose(kfs[0].R, A.R)
    np.testing.assert_allclose(pts[0], [-1, 0, 0], atol=1e-12)
    assert rotation_geodesic_error(kfs[0].R, A.R) == 0.0
