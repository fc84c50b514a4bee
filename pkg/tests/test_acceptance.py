"""One test per acceptance criterion. Each prints a single PASS/FAIL line."""
import math
import os
import time

import numpy as np
import pytest

from dalab.config import ModelSpec
from dalab.cones import verify_invariance
from dalab.foliation import (angle_scan, fidelity_horizon, integrate_leaf_patch, projection_asymptotics,
                             quasi_isometry_scan, sample_leaf, shadowing_check, volume_growth_probe)
from dalab.linear import build_An, build_theoremC_matrix, char_poly, poly_eval, solve_spectrum
from dalab.lyapunov import OrbitPlan, center_sum, jacobian_integral_quadrature, quadrature_convergence, qr_spectrum
from dalab.pipeline import build_model, run_theoremB_pipeline, run_theoremC_pipeline
from dalab.semiconj import leaf_correspondence_check, solve_semiconjugacy
from small_configs import small_thmB, small_thmC

Z = np.array([0.3, 0.1, 0.7, 0.2])
THMC_ROOTS = [0.07977913033001129, 1.2489758560502071, 2.291366890235568, 4.379878123384214]


def report(num, title, ok, detail, elapsed):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {title} ({detail}; {elapsed:.1f}s)")
    assert ok, detail


def test_01_spectral_exactness():
    t0 = time.perf_counter()
    bad = []
    for n in (1, 5, 50, 500):
        p = char_poly(build_An(n))
        if p != [1, -(n + 4), 4 * n + 3, -(3 * n + 2), 1]:
            bad.append(f"poly n={n}")
        if (poly_eval(p, 1), poly_eval(p, 3), poly_eval(p, n)) != (-1, -5, 1 - 2 * n):
            bad.append(f"values n={n}")
    el = time.perf_counter() - t0
    report(1, "spectral exactness", not bad and el < 1.0, ", ".join(bad) or "closed form and p(1), p(3), p(n) exact",
           el)


def test_02_asymptotics():
    t0 = time.perf_counter()
    frames = [solve_spectrum(build_An(n)) for n in (100, 1000, 10_000)]
    ns = (100, 1000, 10_000)
    bracket = all(n < f.beta_u < n + 1 for n, f in zip(ns, frames))
    seqs = {
        "|bu/n-1|": [abs(f.beta_u / n - 1) for n, f in zip(ns, frames)],
        "bc1-1": [f.beta_c1 - 1 for f in frames],
        "3-bc2": [3 - f.beta_c2 for f in frames],
        "|3n bs-1|": [abs(3 * n * f.beta_s - 1) for n, f in zip(ns, frames)],
    }
    dec = {k: all(b < a for a, b in zip(v, v[1:])) for k, v in seqs.items()}
    prod = max(abs(np.prod(np.real(f.values)) - 1) for f in frames)
    el = time.perf_counter() - t0
    ok = bracket and all(dec.values()) and prod < 1e-10 and el < 1.0
    report(2, "eigenvalue asymptotics", ok, f"bracket={bracket} decreasing={dec} |prod-1|={prod:.1e}", el)


def test_03_theoremC_spectrum():
    t0 = time.perf_counter()
    m = solve_spectrum(build_theoremC_matrix()).moduli
    quoted = [0.08, 1.2, 2.3, 4.3]
    err = np.abs(m - quoted)
    frozen = bool(np.allclose(m, THMC_ROOTS, rtol=1e-12, atol=0))
    el = time.perf_counter() - t0
    ok = bool(np.all(err <= 0.05)) and frozen and el < 1.0
    report(3, "Theorem C spectrum", ok,
           f"moduli={np.round(m, 5).tolist()} max|m-quoted|={err.max():.4f} (tol 0.05) frozen={frozen}", el)


def test_04_volume_preservation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    x = rng.random((10_000, 4))
    twist = build_model(ModelSpec())
    dev_twist = float(np.max(np.abs(np.linalg.det(twist.jacobian(x)) - 1)))
    local_twist = float(np.max(np.abs(np.linalg.det(twist.jacobian(twist.chain.probe_points(rng, 10_000))) - 1)))
    flow = build_model(ModelSpec(realization="flow"))
    declared = flow.certificates["volume_defect_declared"]
    pts = np.concatenate([x, flow.chain.probe_points(rng, 10_000)])
    dev_flow = float(np.max(np.abs(np.linalg.det(flow.jacobian(pts)) - 1)))
    el = time.perf_counter() - t0
    ok = max(dev_twist, local_twist) <= 1e-12 and dev_flow <= declared and el < 10
    report(4, "volume preservation", ok, f"twist {max(dev_twist, local_twist):.1e}, flow {dev_flow:.1e} <= "
           f"{declared:.1e}", el)


def test_05_cone_certification():
    t0 = time.perf_counter()
    model = build_model(ModelSpec())
    res = {s: verify_invariance(model, splitting=s, samples=10_000) for s in ("E", "F")}
    good = all(r["pass"] and r["checks_passed"] == 8 and
               sum(f["violations"] for f in r["families"].values()) == 0 for r in res.values())
    bad_model = build_model(ModelSpec(strength=3.0, bump=False))
    bad = verify_invariance(bad_model, splitting="E", samples=10_000)
    witness = any("inclusion_witness" in f or "rate_witness" in f for f in bad["families"].values())
    el = time.perf_counter() - t0
    ok = good and not bad["pass"] and witness and el < 30
    report(5, "cone certification", ok, f"E {res['E']['checks_passed']}/8, F {res['F']['checks_passed']}/8, "
           f"over-strong pass={bad['pass']} witness={witness}", el)


def test_06_lyapunov_baseline():
    t0 = time.perf_counter()
    lin = build_model(ModelSpec(strength=0.0, bump=False))
    rep = qr_spectrum(lin, OrbitPlan(orbits=4, T=10_000, burn_in=100))
    exact = np.sort(np.log(lin.frame.moduli))[::-1]
    lin_err = float(np.max(np.abs(rep.mean - exact)))
    vp = build_model(ModelSpec())
    rep2 = qr_spectrum(vp, OrbitPlan(orbits=8, T=10_000, burn_in=100))
    s = rep2.exponent_sum
    mean, se = float(s.mean()), float(s.std(ddof=1) / math.sqrt(len(s)))
    el = time.perf_counter() - t0
    ok = lin_err <= 1e-8 and abs(mean) <= 3 * se and el < 30
    report(6, "Lyapunov baseline", ok, f"linear error {lin_err:.1e}, exponent sum {mean:.1e} +- {se:.1e}", el)


@pytest.mark.slow
def test_07_theoremB_gap():
    t0 = time.perf_counter()
    model = build_model(ModelSpec())
    rep = center_sum(model, OrbitPlan(orbits=32, T=100_000, burn_in=1000))
    cons = rep.orbit_consistency()
    q = quadrature_convergence(model, "E", 6)
    q_err = q["error"]
    comb = math.hypot(rep.center_stderr, q_err)
    agree = abs(rep.gap - q["gap"]) <= 3 * comb
    el = time.perf_counter() - t0
    ok = rep.gap > 3 * rep.center_stderr and cons["consistent"] and agree and el < 300
    report(7, "Theorem B centre gap", ok,
           f"gap {rep.gap:.3e} +- {rep.center_stderr:.1e}, orbits consistent={cons['consistent']} "
           f"(max z {cons['max_z']:.2f}), quadrature {q['gap']:.3e} +- {q_err:.1e}", el)


def test_08_volume_growth_mechanism():
    t0 = time.perf_counter()
    strong = build_model(ModelSpec(strength=1.0, bump=False))
    gap = jacobian_integral_quadrature(strong, "E", 6)["gap"]
    n_max = fidelity_horizon(strong)
    patch = integrate_leaf_patch(strong, Z, 10.0, 48)
    st = volume_growth_probe(strong, patch, n_max, gap=gap)
    lower_all = all(r.measured >= r.lower for r in st.reports)
    crossed = st.crossing is not None and st.crossing <= 30
    lin = build_model(ModelSpec(strength=0.0, bump=False))
    lpatch = integrate_leaf_patch(lin, Z, 10.0, 8)
    lst = volume_growth_probe(lin, lpatch, 30, gap=0.0)
    Sigma = lin.frame.center_log_sum("E")
    rel = max(abs(r.measured / (math.exp(r.n * Sigma) * 100.0) - 1) for r in lst.reports)
    el = time.perf_counter() - t0
    ok = lower_all and crossed and lst.crossing is None and rel < 0.01 and el < 300
    report(8, "volume growth mechanism", ok,
           f"gap {gap:.3e}, q={st.q}, lower bound held for n<= {n_max}: {lower_all}, crossing n*={st.crossing}; "
           f"linear crossing={lst.crossing}, volume error {rel:.1e}", el)


@pytest.mark.slow
def test_09_foliation_geometry():
    t0 = time.perf_counter()
    lin = build_model(ModelSpec(strength=0.0, bump=False))
    lp = sample_leaf(lin, Z, 50.0, 2000)
    lqi = quasi_isometry_scan(lp, pairs=8)
    lin_ok = (abs(lqi.Q - 1) <= 1e-9 and shadowing_check(lp)["R_c"] == 0.0
              and abs(angle_scan(lp)["alpha_min_deg"] - 90.0) < 1e-9)
    model = build_model(ModelSpec())
    big = sample_leaf(model, Z, 100.0, 40_000)
    box = np.max(np.abs(big.params), axis=1)
    off = np.linalg.norm(big.offsets, axis=1)
    Rc = {D: float(off[box <= D / 2].max()) for D in (25.0, 50.0, 100.0)}
    growth = Rc[100.0] / Rc[50.0] - 1
    p50 = sample_leaf(model, Z, 50.0, 10_000)
    p100 = sample_leaf(model, Z, 100.0, 10_000)
    Q50 = quasi_isometry_scan(p50, pairs=24).Q
    Q100 = quasi_isometry_scan(p100, pairs=24).Q
    drift = abs(Q100 / Q50 - 1)
    table = projection_asymptotics(p50, [1.0, 2.0, 5.0, 10.0, 20.0])
    ratios = [r["ratio"] for r in table]
    dec = all(b < a for a, b in zip(ratios, ratios[1:]))
    el = time.perf_counter() - t0
    ok = lin_ok and growth < 0.05 and drift < 0.10 and dec and el < 300
    report(9, "foliation geometry", ok,
           f"linear ok={lin_ok}; R_c {Rc[25.0]:.5f}/{Rc[50.0]:.5f}/{Rc[100.0]:.5f} growth {growth:.2%}; "
           f"Q {Q50:.4f}->{Q100:.4f}; projection decreasing={dec}", el)


@pytest.mark.slow
def test_10_semiconjugacy():
    t0 = time.perf_counter()
    model = build_model(ModelSpec(family="thmC", n=0, strength=0.015, mix_c1=0.5, bump=False))
    h = solve_semiconjugacy(model, grid=32, tol=1e-6)
    rate_ok = abs(h.observed_rate / h.predicted_rate - 1) <= 0.2
    patch = integrate_leaf_patch(model, Z, 2.0, 12)
    lc = leaf_correspondence_check(h, patch)
    el = time.perf_counter() - t0
    ok = (h.residual < 1e-6 and h.verify_grid == 64 and rate_ok and lc["deviation"] < 10 * h.residual
          and lc["control_deviation"] >= 10 * lc["deviation"] and el < 600)
    report(10, "semiconjugacy", ok,
           f"residual {h.residual:.2e} on {h.verify_grid}^4, rate {h.observed_rate:.4f} vs "
           f"{h.predicted_rate:.4f}, leaf deviation {lc['deviation']:.1e} vs control "
           f"{lc['control_deviation']:.1e}", el)


def _tree(path):
    out = {}
    for root, _, files in os.walk(path):
        for name in sorted(files):
            full = os.path.join(root, name)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = fh.read()
    return out


def test_11_determinism(tmp_path):
    t0 = time.perf_counter()
    same = {}
    for name, run, cfg in (("thmB", run_theoremB_pipeline, small_thmB),
                           ("thmC", run_theoremC_pipeline, small_thmC)):
        out = str(tmp_path / name)
        run(cfg(seed=7), out)
        first = _tree(out)
        run(cfg(seed=7), out)
        same[name] = bool(first) and _tree(out) == first
    el = time.perf_counter() - t0
    report(11, "determinism", all(same.values()), f"byte-identical reruns {same}", el)
