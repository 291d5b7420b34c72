import numpy as np
import pytest

from conftest import make_linreg, make_replicated, make_shared_quadratic, make_signed_linreg, make_two_layer
from diffmetric.diffusion import EpsilonPolicy, diffusion_variance_form, max_eigenvalue
from diffmetric.dynamics import (
    DynamicsConfig,
    Trajectory,
    equivalence_tolerance,
    initial_velocity,
    minibatches,
    record,
    run,
    run_gd,
    run_gd_flow,
    run_geodesic,
    run_rgd_flow,
    run_sgd,
    step_gd,
    trajectory_scale,
)
from diffmetric.errors import NumericalError
from diffmetric.models import CallableModel, QuadraticModel


def shifted_bowls():
    """f_1 = (x-1)^2/2, f_2 = (x+1)^2/2: f = x^2 + 1 and D = [[1]] everywhere."""
    return QuadraticModel([[1.0], [-1.0]], curvature=0.5)


def flat(d=2, n=2, value=3.0):
    return CallableModel([lambda x: value] * n, d, grads=[lambda x: np.zeros(d)] * n,
                         hessians=[lambda x: np.zeros((d, d))] * n)


def bitwise_equal(a: Trajectory, b: Trajectory) -> bool:
    return a.xs.tobytes() == b.xs.tobytes() and a.t.tobytes() == b.t.tobytes()


# -- discrete updates -----------------------------------------------------------

def test_step_gd_examples():
    sq = QuadraticModel([[0.0]], curvature=1.0)
    assert step_gd(sq, [1.0], 0.1)[0] == pytest.approx(0.8, abs=1e-15)
    np.testing.assert_array_equal(step_gd(sq, [0.0], 0.1), [0.0])
    lin = CallableModel([lambda x: 3 * x[0] - x[1]], 2, grads=[lambda x: [3.0, -1.0]])
    np.testing.assert_allclose(step_gd(lin, [1.0, 1.0], 0.5), [-0.5, 1.5], rtol=1e-15)


def test_step_gd_rejects_nonfinite():
    bad = CallableModel([lambda x: 0.0], 1, grads=[lambda x: [np.inf]])
    with pytest.raises(NumericalError):
        step_gd(bad, [0.0], 0.1)


# -- recording -------------------------------------------------------------

def test_record_cadence():
    tr = Trajectory("gd", cadence=1, total_steps=3)
    for s in range(4):
        record(tr, s, s * 0.1, [0.0], None, 0.0, 0.0)
    assert len(tr.records) == 4
    tr = Trajectory("gd", cadence=10, total_steps=25)
    for s in range(26):
        record(tr, s, s * 0.1, [0.0], None, 0.0, 0.0)
    assert [r.step for r in tr.records] == [0, 10, 20, 25]


def test_record_rejects_non_increasing_time():
    tr = Trajectory("gd", cadence=1, total_steps=3)
    record(tr, 0, 0.0, [0.0], None, 0.0, 0.0)
    with pytest.raises(ValueError):
        record(tr, 1, 0.0, [0.0], None, 0.0, 0.0)


def test_runner_records_cadence_and_diagnostics(linreg):
    model, x = linreg
    tr = run_gd(model, x, DynamicsConfig("gd", eta=0.01, steps=25, cadence=10))
    assert [r.step for r in tr.records] == [0, 10, 20, 25]
    np.testing.assert_allclose(tr.t, [0.0, 0.1, 0.2, 0.25])
    assert set(tr.records[0].diag) == {"lambda_max", "epsilon", "rank", "j_residual"}
    assert tr.records[0].x.tobytes() == np.asarray(x).tobytes()
    geo = run_geodesic(model, x, DynamicsConfig("geodesic", steps=3))
    assert "discarded_term" in geo.final.diag and geo.final.v is not None


def test_jsonl_lines(linreg):
    import json

    model, x = linreg
    tr = run_gd(model, x, DynamicsConfig("gd", steps=3))
    lines = tr.to_jsonl().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[-1])
    assert set(rec) == {"step", "t", "x", "v", "loss", "grad_norm", "diag"} and rec["v"] is None


def test_config_validation():
    for bad in ({"eta": 0.0}, {"steps": 0}, {"cadence": 0}, {"convention": "avg"},
                {"velocity": "custom"}, {"inverse": "lu"}, {"christoffel": "none"}):
        with pytest.raises(ValueError):
            DynamicsConfig("rgd", **bad)
    with pytest.raises(ValueError):
        DynamicsConfig("adam")
    assert DynamicsConfig("geodesic").inverse == "exact"
    assert DynamicsConfig("rgd").inverse == "weak-field"


# -- SGD -------------------------------------------------------------------

def test_sgd_full_batch_is_gd(linreg):
    model, x = linreg
    gd = run_gd(model, x, DynamicsConfig("gd", steps=50))
    for seed in (0, 1, 2):
        for sampling in ("independent", "epoch"):
            sgd = run_sgd(model, x, DynamicsConfig("sgd", steps=50, batch_size=model.n_samples,
                                                   seed=seed, sampling=sampling))
            assert bitwise_equal(sgd, gd)


@pytest.mark.parametrize("batch", [1, 2, 3, 4])
def test_sgd_identical_samples_is_gd(batch):
    model, x = make_replicated()
    gd = run_gd(model, x, DynamicsConfig("gd", steps=40))
    for seed in range(5):
        sgd = run_sgd(model, x, DynamicsConfig("sgd", steps=40, batch_size=batch, seed=seed))
        assert bitwise_equal(sgd, gd)


def test_sgd_seed_reproducibility(two_layer):
    model, x = two_layer
    cfg = DynamicsConfig("sgd", steps=30, batch_size=2, seed=11)
    a, b = run_sgd(model, x, cfg), run_sgd(model, x, cfg)
    assert bitwise_equal(a, b)
    c = run_sgd(model, x, DynamicsConfig("sgd", steps=30, batch_size=2, seed=12))
    assert not np.array_equal(a.records[1].x, c.records[1].x)
    assert a.label == "sgd-seed11"


def test_sgd_batch_too_large(linreg):
    model, x = linreg
    with pytest.raises(ValueError):
        run_sgd(model, x, DynamicsConfig("sgd", batch_size=model.n_samples + 1))


def test_minibatch_streams():
    rng = np.random.default_rng(0)
    stream = minibatches(5, 3, rng)
    for _ in range(20):
        b = next(stream)
        assert len(set(b.tolist())) == 3
    epoch = minibatches(6, 2, np.random.default_rng(0), "epoch")
    first_pass = np.concatenate([next(epoch) for _ in range(3)])
    assert sorted(first_pass.tolist()) == list(range(6))
    with pytest.raises(ValueError):
        next(minibatches(3, 4, rng))


# -- flows -----------------------------------------------------------------

def test_rgd_zero_d_is_bitwise_gd_flow():
    model, x = make_replicated()
    for inverse in ("weak-field", "exact"):
        rgd = run_rgd_flow(model, x, DynamicsConfig("rgd", steps=100, inverse=inverse))
        flow = run_gd_flow(model, x, DynamicsConfig("gd-flow", steps=100))
        assert bitwise_equal(rgd, flow)


def rgd_error_at_one(eta):
    model = shifted_bowls()
    steps = int(round(1.0 / eta))
    tr = run_rgd_flow(model, [1.0], DynamicsConfig("rgd", eta=eta, steps=steps))
    assert tr.final.diag["epsilon"] == pytest.approx(0.1, rel=1e-12)
    return abs(tr.final.x[0] - np.exp(-(1 - 0.1) * 2 * 1.0))


def test_rgd_closed_form_and_rk4_order():
    e1, e2 = rgd_error_at_one(0.01), rgd_error_at_one(0.005)
    assert e1 <= 1e-8
    assert 12 <= e1 / e2 <= 20


@pytest.mark.parametrize("factory", [make_linreg, make_signed_linreg, make_shared_quadratic])
def test_rgd_descent_on_convex_problems(factory):
    model, x = factory()
    rng = np.random.default_rng(0)
    # direction check at random points: <grad_D f, grad f> > 0
    from diffmetric.diffusion import metric_at, select_epsilon
    from diffmetric.geometry import metric_gradient

    for _ in range(30):
        z = rng.standard_normal(model.dim)
        D = diffusion_variance_form(model, z).D
        g = model.gradient(z)
        assert metric_gradient(metric_at(D, select_epsilon(D, 0.1)), g) @ g > 0
    losses = run_rgd_flow(model, x, DynamicsConfig("rgd", eta=0.01, steps=100)).losses
    assert np.all(np.diff(losses) <= 1e-12 * losses[0])


def test_frozen_epsilon_violation_raises():
    # f = x^2 - 1.5 x^2 = -x^2/2 pushes x outward while D = 6.25 x^2 grows
    model = QuadraticModel([[0.0], [0.0]], curvature=[[1.0], [-1.5]])
    frozen = DynamicsConfig("rgd", eta=0.01, steps=200, inverse="exact",
                            epsilon=EpsilonPolicy(c=0.5, frozen=True))
    with pytest.raises(NumericalError, match="frozen"):
        run_rgd_flow(model, [1.0], frozen)
    per_point = DynamicsConfig("rgd", eta=0.01, steps=200, inverse="exact", epsilon=EpsilonPolicy(c=0.5))
    assert np.isfinite(run_rgd_flow(model, [1.0], per_point).final.x).all()


# -- geodesic ----------------------------------------------------------------

def test_straight_line_without_force():
    model = flat(2, 2)
    v0 = [0.5, -1.25]
    tr = run_geodesic(model, [1.0, 2.0], DynamicsConfig("geodesic", steps=100, velocity="custom", v0=v0))
    expected = np.array([1.0, 2.0]) + np.outer(tr.t, v0)
    assert np.max(np.abs(tr.xs - expected)) <= 1e-12


def test_zero_velocity_constant_loss_is_stationary():
    model = flat(3, 2)
    tr = run_geodesic(model, [0.1, 0.2, 0.3], DynamicsConfig("geodesic", steps=20, velocity="zero"))
    assert np.all(tr.xs == tr.xs[0])
    assert np.all(np.stack([r.v for r in tr.records]) == 0.0)


def test_default_initial_velocity_is_metric_gradient(signed_linreg):
    model, x = signed_linreg
    cfg = DynamicsConfig("geodesic")
    rgd_cfg = DynamicsConfig("rgd", inverse="exact")
    v0 = initial_velocity(model, x, cfg)
    tr = run_rgd_flow(model, x, DynamicsConfig("rgd", inverse="exact", steps=1))
    from diffmetric.dynamics import rgd_velocity

    np.testing.assert_array_equal(v0, rgd_velocity(model, x, rgd_cfg, rgd_cfg.epsilon))
    assert tr.records[0].x.tobytes() == np.asarray(x).tobytes()


def test_geodesic_gd_limit_on_zero_d():
    # D = 0: geodesic with v0 = -grad f is differentiated GD, i.e. the GD flow
    model, x = make_replicated()
    geo = run_geodesic(model, x, DynamicsConfig("geodesic", steps=100))
    flow = run_gd_flow(model, x, DynamicsConfig("gd-flow", steps=100))
    assert np.max(np.abs(geo.xs - flow.xs)) <= 1e-9 * (1 + np.max(np.abs(flow.xs)))


def geodesic_rgd_gap(model, x, c):
    pol = EpsilonPolicy(c=c)
    geo = run_geodesic(model, x, DynamicsConfig("geodesic", steps=100, epsilon=pol))
    rgd = run_rgd_flow(model, x, DynamicsConfig("rgd", steps=100, epsilon=pol))
    gap = float(np.max(np.linalg.norm(geo.xs - rgd.xs, axis=1)))
    lam = max_eigenvalue(diffusion_variance_form(model, x).D)
    tol = equivalence_tolerance(c / lam, lam, model.n_samples, trajectory_scale(rgd))
    return gap, tol


@pytest.mark.parametrize("factory", [make_signed_linreg, make_shared_quadratic])
def test_geodesic_matches_rgd_in_constant_d_regime(factory):
    model, x = factory()
    g1, tol1 = geodesic_rgd_gap(model, x, 0.1)
    g2, tol2 = geodesic_rgd_gap(model, x, 0.05)
    assert g1 <= tol1 and g2 <= tol2
    assert g1 / g2 >= 3


def test_geodesic_exact_inverse_integrates_to_metric_flow(shared_quadratic):
    # with the exact inverse in both, the two systems coincide up to RK4 error
    model, x = shared_quadratic
    geo = run_geodesic(model, x, DynamicsConfig("geodesic", steps=100))
    rgd = run_rgd_flow(model, x, DynamicsConfig("rgd", steps=100, inverse="exact"))
    assert np.max(np.abs(geo.xs - rgd.xs)) <= 1e-8


def test_general_linear_regression_gap_is_reported_at_first_order(linreg):
    # D varies along general linear regression, so only an O(eps) gap is expected
    model, x = linreg
    g1, _ = geodesic_rgd_gap(model, x, 0.1)
    g2, _ = geodesic_rgd_gap(model, x, 0.05)
    assert 0 < g2 < g1
    assert 1.5 <= g1 / g2 <= 2.5


def test_deterministic_methods_are_reproducible(two_layer):
    model, x = two_layer
    for method in ("gd", "gd-flow", "rgd", "geodesic"):
        cfg = DynamicsConfig(method, steps=10)
        assert bitwise_equal(run(model, x, cfg), run(model, x, cfg))


def test_x0_shape_checked(linreg):
    model, _ = linreg
    with pytest.raises(ValueError):
        run_gd(model, np.zeros(model.dim + 1), DynamicsConfig("gd"))
