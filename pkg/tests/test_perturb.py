import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalab.lyapunov import jacobian_integral_quadrature
from dalab.perturb import (BumpProfile, ConstraintViolation, FactorChain, OutOfNeighborhood, ShearMap,
                           TwistMap, adapted_c1_distance, check_return_times, compose_da,
                           make_center_booster, make_franks_bump, nested_balls, rescale_bump,
                           target_differential)
from dalab.torus import AdaptedMetric


def fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture(scope="module")
def franks(frame100, boosted100):
    p = np.zeros(4)
    td = target_differential(boosted100.jacobian(p[None])[0], frame100)
    balls = nested_balls(p, 0.05, 100, 3)
    h = make_franks_bump(td.correction, 0.6, p, frame100.vectors, radius=balls.radii[0])
    return td, balls, h


def test_bump_profile_shape():
    for kind in ("standard", "log"):
        b = BumpProfile(1.0, 0.5 if kind == "standard" else 1e-3, kind)
        t = np.linspace(0, 2, 2001)
        rho = b(t)
        assert np.all(rho[t <= b.inner] == 1.0)
        assert np.all(rho[t >= b.radius] == 0.0)
        assert np.all(np.diff(rho) <= 1e-15)
        assert b.sup_t_drho() >= np.max(np.abs(t * b.evaluate(t)[1])) - 1e-9


def test_booster_zero_is_identity(frame100):
    H = make_center_booster(frame100, 0.0)
    x = np.random.default_rng(0).random((50, 4))
    assert np.array_equal(H.forward(x), x)


def test_booster_volume_and_size(frame100, rng):
    H = make_center_booster(frame100, 0.042)
    x = rng.random((10_000, 4)) * 3 - 1
    assert np.max(np.abs(np.linalg.det(H.jacobian(x)) - 1)) <= 1e-12
    assert H.c1_norm(AdaptedMetric(frame100.vectors)) == pytest.approx(0.042, rel=1e-9)
    assert np.allclose(H.inverse(H.forward(x)), x, atol=1e-12)


def test_booster_cap(frame100):
    with pytest.raises(ConstraintViolation):
        make_center_booster(frame100, 0.5, cap=0.1)


def test_booster_raises_center_integral(boosted100):
    q = jacobian_integral_quadrature(boosted100, "E", 6)
    assert q["gap"] > 0


def test_reversed_booster_lowers_center_integral(frame100):
    m = compose_da(frame100.matrix, [make_center_booster(frame100, -0.042)], frame100)
    assert jacobian_integral_quadrature(m, "E", 6)["gap"] < 0


def test_shear_jacobian_matches_fd(frame100, rng):
    H = make_center_booster(frame100, 0.042)
    for x in rng.random((5, 4)):
        assert np.allclose(H.jacobian(x[None])[0], fd_jacobian(lambda y: H.forward(y[None])[0], x), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.floats(-0.3, 0.3), st.lists(st.integers(-2, 2), min_size=4, max_size=4))
def test_twist_det_is_one(active, amp, cov):
    cov = np.array(cov, float)
    cov[active] = 0.0
    if not cov.any():
        cov[(active + 1) % 4] = 1.0
    T = TwistMap(active, cov, amp)
    x = np.random.default_rng(active).random((1000, 4)) * 4 - 2
    assert np.max(np.abs(np.linalg.det(T.jacobian(x)) - 1.0)) <= 1e-12
    assert np.allclose(T.inverse(T.forward(x)), x, atol=1e-12)


def test_franks_identity_target(frame100):
    h = make_franks_bump(np.eye(4), 0.5, np.zeros(4), frame100.vectors, radius=0.05)
    x = np.random.default_rng(0).random((100, 4))
    assert np.array_equal(h.forward(x), x)


def test_franks_out_of_neighborhood(frame100):
    T = np.diag([2.0, 0.5, 1.0, 1.0])
    with pytest.raises(OutOfNeighborhood):
        make_franks_bump(T, 0.1, np.zeros(4), frame100.vectors)


def test_target_differential_items(frame100, linear100):
    td = target_differential(linear100.jacobian(np.zeros((1, 4)))[0], frame100)
    a, b1 = frame100.alpha, frame100.beta_c1
    corr = np.sort(np.diag(td.correction))
    assert np.allclose(np.diag(td.correction), np.diag(np.diag(td.correction)).diagonal())
    assert np.allclose(np.sort(corr), np.sort([1, 1, (1 - a) / b1, b1 / (1 - a)]), atol=1e-10)
    A = linear100.Af
    assert np.linalg.det(td.matrix) == pytest.approx(np.linalg.det(A), abs=1e-9)
    # weak-centre norm is 1 - alpha and the stable index changes
    ev = np.sort(np.abs(np.linalg.eigvals(td.matrix)))
    assert ev[1] == pytest.approx(1 - a, rel=1e-9)
    assert np.sum(ev < 1) == 2 and np.sum(frame100.moduli < 1) == 1
    assert td.bound_ratio < 3.5
    # the correction is within 4 alpha of the identity
    assert np.linalg.norm(td.correction - np.eye(4), 2) < 4 * a


def test_target_differential_precondition(frame100):
    bad = np.diag([0.1, 1.5, 3.0, 1 / 0.45])
    with pytest.raises(ConstraintViolation):
        target_differential(bad, frame100)


def test_franks_bump_differential(franks, frame100, rng):
    td, balls, h = franks
    p = np.zeros(4)
    metric = AdaptedMetric(frame100.vectors)
    assert np.allclose(h.forward(p[None])[0], p, atol=1e-15)
    Dh = metric.conjugate(h.jacobian(p[None])[0])
    assert np.allclose(Dh, td.correction, atol=1e-8)
    x = rng.random((10_000, 4))
    assert np.max(np.abs(np.linalg.det(h.jacobian(x)) - 1)) <= 1e-12
    assert adapted_c1_distance(h, metric, rng) < 0.6
    # identity outside the support
    far = p + 0.3 + 0.4 * rng.random((200, 4))
    assert np.array_equal(h.forward(far), far)


def test_franks_flow_realization(franks, frame100, rng):
    td, balls, _ = franks
    p = np.zeros(4)
    h = make_franks_bump(td.correction, 0.6, p, frame100.vectors, radius=0.05, realization="flow")
    metric = AdaptedMetric(frame100.vectors)
    assert np.allclose(metric.conjugate(h.jacobian(p[None])[0]), td.correction, atol=1e-8)
    pts = h.probe_points(rng, 10_000)
    assert np.max(np.abs(np.linalg.det(h.jacobian(pts)) - 1)) <= h.det_defect


def test_rescale_bump(franks, frame100, rng):
    _, balls, h = franks
    assert rescale_bump(h, 1.0) is h
    p = np.zeros(4)
    hj = rescale_bump(h, 0.01)
    assert np.allclose(hj.jacobian(p[None])[0], h.jacobian(p[None])[0], atol=1e-10)
    pts = h.probe_points(rng, 4000)
    c0 = np.max(np.abs(h.forward(pts) - pts))
    c0j = np.max(np.abs(hj.forward(0.01 * pts) - 0.01 * pts))
    assert c0j == pytest.approx(0.01 * c0, rel=1e-6)
    metric = AdaptedMetric(frame100.vectors)
    assert adapted_c1_distance(hj, metric, np.random.default_rng(0)) == pytest.approx(
        adapted_c1_distance(h, metric, np.random.default_rng(0)), rel=1e-6)


def test_nested_balls():
    b = nested_balls(np.zeros(4), 0.1, 1, 2)
    assert b.radii[1] == pytest.approx(0.1 / 20)
    assert b.radii[2] == pytest.approx(b.radii[1] / 400)
    assert nested_balls(np.zeros(4), 0.1, 5, 0).radii == [0.1]
    b = nested_balls(np.zeros(4), 0.05, 100, 1)
    assert b.radii[1] / b.radii[0] == pytest.approx(1 / 2000)
    with pytest.raises(ValueError):
        nested_balls(np.zeros(4), 0.3, 1, 1)


def test_return_times(franks, frame100, boosted100):
    _, balls, h = franks
    hj = rescale_bump(h, balls.radii[3] / balls.radii[0])
    g = compose_da(frame100.matrix, [boosted100.factors[0], hj], frame100)
    assert check_return_times(g, balls, 0)["pass"]
    res = check_return_times(g, balls, 3, samples=1000)
    assert res["pass"] and res["lipschitz_pass"]
    assert max(res["lipschitz"], res["lipschitz_inverse"]) <= 20 * 100


def test_compose_da(franks, frame100, boosted100, rng):
    _, balls, h = franks
    hj = rescale_bump(h, balls.radii[1] / balls.radii[0])
    g = compose_da(frame100.matrix, [boosted100.factors[0], hj], frame100)
    assert g.certificates["homotopic_to_linear"]
    assert g.certificates["within_budget"]["E"] and g.certificates["within_budget"]["F"]
    x = rng.random((10_000, 4))
    assert np.max(np.abs(g.inverse(g.forward(x)) - x)) < 1e-9
    assert np.max(np.abs(np.linalg.det(g.jacobian(x)) - 1)) < 1e-9
    # chain rule at the fixed point gives D_n
    td = target_differential(boosted100.jacobian(np.zeros((1, 4)))[0], frame100)
    assert np.allclose(g.jacobian(np.zeros((1, 4)))[0], td.matrix, atol=1e-7)
    # grouping of factors does not matter
    grouped = compose_da(frame100.matrix, [FactorChain([boosted100.factors[0], hj])], frame100)
    assert np.allclose(grouped.forward(x[:100]), g.forward(x[:100]), atol=1e-10)
    # Jacobian bound |Jac| <= K
    assert np.max(np.linalg.norm(g.jacobian(x), 2, axis=(-2, -1))) <= g.certificates["lipschitz"] * (1 + 1e-9)


def test_compose_linear(frame100, linear100):
    assert linear100.is_linear
    x = np.random.default_rng(0).random((10, 4))
    assert np.allclose(linear100.forward(x), x @ frame100.matrix.array().T)
    assert linear100.certificates["c1_distance"] == 0.0


def test_jacobian_fd_composed(franks, frame100, boosted100, rng):
    _, balls, h = franks
    g = compose_da(frame100.matrix, [boosted100.factors[0], h], frame100)
    for x in [np.full(4, 0.01), rng.random(4)]:
        J = g.jacobian(x[None])[0]
        Jfd = fd_jacobian(lambda y: g.forward(y[None])[0], x, 1e-7)
        assert np.allclose(J, Jfd, rtol=1e-5, atol=1e-4)
