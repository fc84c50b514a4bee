import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalab.cones import (ConeSpec, NotPartiallyHyperbolic, choose_constants, cone_contains, continue_bundle,
                         center_bundle, epsilon_budget, epsilon_budget_terms, find_breaking_amplitude,
                         linear_worst_ratio, verify_invariance)
from dalab.linear import build_An, solve_spectrum
from dalab.perturb import compose_da, make_center_booster

SPLIT_E = {"s": (0,), "c": (1, 2), "u": (3,)}


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(1.05, 3.0), st.floats(1.05, 3.0), st.floats(1.05, 4.0))
def test_constants_invariants(ls, r1, r2, r3):
    # moduli increasing with all gaps > 1
    m = [ls, ls * r1, ls * r1 * r2, ls * r1 * r2 * r3]
    if m[3] <= 1.0 or m[0] >= 1.0:
        return
    try:
        cc = choose_constants((m, SPLIT_E))
    except NotPartiallyHyperbolic:
        return
    assert cc.invariants_ok()
    assert (1 + cc.beta) ** 4 == pytest.approx(cc.theta, rel=1e-12)
    eps = epsilon_budget(cc)
    assert 0 < eps < 1
    # the budget is a supremum: strictly inside it the rate chain holds
    assert cc.with_rates(0.999 * eps).chain_ok()
    assert not cc.with_rates(1.001 * eps).chain_ok() or min(
        epsilon_budget_terms(cc), key=epsilon_budget_terms(cc).get).startswith("cone")


def test_theta_not_above_one():
    with pytest.raises(NotPartiallyHyperbolic):
        choose_constants(([0.5, 1.0, 2.0, 2.0], SPLIT_E))


def test_cone_contains_examples():
    spec = ConeSpec(E=(3,), F=(0, 1, 2), beta=0.5)
    assert cone_contains(spec, [0, 0, 0, 1.0]) < 0
    assert cone_contains(spec, [1.0, 0, 0, 0]) > 0
    assert cone_contains(spec, [0.5, 0, 0, 1.0]) == pytest.approx(0.0)
    assert cone_contains(spec, [0.3, 0.4, 0, 1.0]) == pytest.approx(0.0)


def test_budget_cone_term_is_safe(frame100, rng):
    # perturbations of size eps map C(gamma beta) into C(beta); slightly more does not
    cc = choose_constants(frame100, "E")
    eps = epsilon_budget_terms(cc)["cone_forward"]
    b, g = cc.beta, cc.gamma
    E, F = cc.family("u")
    worst = 0.0
    for _ in range(2000):
        M = rng.normal(size=(4, 4))
        M *= eps / np.linalg.norm(M, 2)
        f = rng.normal(size=3)
        v = np.zeros(4)
        v[3] = 1.0
        v[list(F)] = g * b * f / np.linalg.norm(f)
        w = v + M @ v
        worst = max(worst, np.linalg.norm(w[list(F)]) / abs(w[3]))
    assert worst <= b * (1 + 1e-12)
    # exact distance from the boundary vector to the cone edge bounds the term from above
    v = np.array([g * b, 0, 0, 1.0])
    n = np.linalg.norm(v)
    sharp = b * (1 - g) / math.hypot(1, b) / n
    assert eps <= sharp
    d = np.array([1.0, 0, 0, -b]) / math.hypot(1, b)
    w = v + 1.01 * sharp * n * d
    assert w[0] / w[3] > b


def test_frozen_theoremC_budgets(frameC):
    assert epsilon_budget(choose_constants(frameC, "E")) == pytest.approx(0.021635411479543315, rel=1e-9)
    assert epsilon_budget(choose_constants(frameC, "F")) == pytest.approx(0.019242234131365422, rel=1e-9)
    ccE = choose_constants(frameC, "E")
    assert ccE.beta == pytest.approx(0.1758227212468635, rel=1e-9)
    assert ccE.theta == pytest.approx(1.911469587017526, rel=1e-9)


def test_budget_binding_term(frame100, frameC):
    for fr in (frame100, frameC):
        for s in ("E", "F"):
            t = epsilon_budget_terms(choose_constants(fr, s))
            assert min(t, key=t.get) == "cone_inverse"


@pytest.mark.parametrize("splitting", ["E", "F"])
def test_linear_model_passes(linear100, splitting):
    rep = verify_invariance(linear100, splitting=splitting, samples=2000)
    assert rep["pass"] and rep["checks_passed"] == 8
    cc = choose_constants(linear100.frame, splitting)
    for fam in ("u", "cu"):
        assert linear_worst_ratio(linear100.frame, cc, fam) < 1.0


def test_boosted_model_passes(boosted100):
    for s in ("E", "F"):
        assert verify_invariance(boosted100, splitting=s, samples=2000)["pass"]


def test_overstrong_fails_with_witness(frame100):
    bad = compose_da(frame100.matrix, [make_center_booster(frame100, 3.0)], frame100)
    rep = verify_invariance(bad, splitting="F", samples=2000)
    assert not rep["pass"]
    failing = [f for f in rep["families"].values() if not (f["inclusion_pass"] and f["rate_pass"])]
    assert failing
    assert any("inclusion_witness" in f or "rate_witness" in f for f in failing)


def test_breaking_amplitude_above_budget(frame100):
    def build(a):
        return compose_da(frame100.matrix, [make_center_booster(frame100, a)], frame100)
    amp = find_breaking_amplitude(build, "F", hi=2.0, samples=500, iters=12)
    assert amp > epsilon_budget(choose_constants(frame100, "F"))


def test_continue_bundle_linear(linear100, rng):
    x = rng.random((5, 4))
    for fam, idx in (("u", [3]), ("cu", [1, 2, 3]), ("s", [0]), ("cs", [0, 1, 2])):
        r = continue_bundle(linear100, fam, x, 10)
        Q = r["basis"]
        P = Q @ np.swapaxes(Q, 1, 2)
        target = np.zeros((4, 4))
        target[idx, idx] = 1.0
        assert np.allclose(P, target, atol=1e-12)
        assert r["nested"]
    Ec = center_bundle(linear100, x)
    P = Ec @ np.swapaxes(Ec, 1, 2)
    assert np.allclose(P, np.diag([0, 1, 1, 0.0]), atol=1e-10)


def test_continue_bundle_nested_boosted(boosted100, rng):
    r = continue_bundle(boosted100, "cu", rng.random((20, 4)), 8)
    assert r["nested"]
