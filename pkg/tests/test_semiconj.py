import json

import numpy as np
import pytest

from dalab.foliation import integrate_leaf_patch
from dalab.semiconj import (coverage_check, leaf_correspondence_check, load_field, plaque_mass_probe,
                            predicted_contraction, read_field, solve_semiconjugacy, sup_displacement)
from dalab.torus import wrap


@pytest.fixture(scope="module")
def fieldC(modelC):
    return solve_semiconjugacy(modelC, grid=4, tol=1e-6)


def _conj_defect(model, field, x):
    """|h(g x) - A h(x)| modulo the integer lattice."""
    lhs = field.h(wrap(model.forward(x)))
    rhs = field.h(x) @ model.Af.T
    r = lhs - rhs
    return np.max(np.abs(r - np.round(r)))


def test_linear_field_is_zero(linear100):
    f = solve_semiconjugacy(linear100, grid=4)
    assert np.all(f.values == 0) and f.residual == 0.0
    x = np.random.default_rng(0).random((10, 4))
    assert np.array_equal(f.h(x), x)


def test_predicted_rate(frameC):
    m = frameC.moduli
    assert predicted_contraction(frameC) == pytest.approx(max(m[0], 1 / m[1]), rel=1e-12)


def test_solve_residual(fieldC):
    assert fieldC.residual < 1e-6
    assert fieldC.trace[-1] < 0.25e-6
    assert fieldC.observed_rate == pytest.approx(fieldC.predicted_rate, rel=0.02)


def test_conjugacy_equation_at_random_points(modelC, fieldC, rng):
    x = rng.random((500, 4))
    assert _conj_defect(modelC, fieldC, x) < 1e-6


def test_uniqueness_across_grids(modelC, fieldC):
    fine = solve_semiconjugacy(modelC, grid=8, tol=1e-6, verify=False)
    coarse = fieldC.values.reshape(4, 4, 4, 4, 4)
    sub = fine.values.reshape(8, 8, 8, 8, 4)[::2, ::2, ::2, ::2]
    assert np.max(np.abs(coarse - sub)) < 1e-6


def test_write_read_roundtrip(modelC, fieldC, tmp_path):
    p = str(tmp_path / "field.bin")
    paths = fieldC.write(p)
    header, arr = read_field(p)
    assert arr.shape == (4, 4, 4, 4, 4)
    assert np.array_equal(arr[2].ravel(), fieldC.values[:, 2])
    with open(paths[1]) as fh:
        assert json.load(fh)["grid"] == 4
    back = load_field(modelC, p)
    assert np.array_equal(back.values, fieldC.values)
    x = np.random.default_rng(1).random((5, 4))
    assert np.allclose(back.evaluate(x), fieldC.evaluate(x))


def test_interpolation_reproduces_nodes(fieldC):
    nodes = np.array([[0.25, 0.5, 0.0, 0.75]])
    idx = np.ravel_multi_index((1, 2, 0, 3), (4, 4, 4, 4))
    assert np.allclose(fieldC.interpolate(nodes)[0], fieldC.values[idx])
    assert fieldC.interpolation_residual(512) < 0.05


def test_series_matches_nodes(fieldC):
    grid = np.stack(np.unravel_index(np.arange(256), (4,) * 4), axis=-1) / 4.0
    # same batch, same rounding: exact
    assert np.array_equal(fieldC.evaluate(grid), fieldC.values)
    # a single point rounds differently and the orbit drifts; the weak
    # expansion of c1 keeps the effect small
    one = fieldC.evaluate(grid[7:8])[0]
    assert np.max(np.abs(one - fieldC.values[7])) < 1e-4


def test_coverage(fieldC, linear100):
    assert coverage_check(fieldC)["pass"]
    assert sup_displacement(fieldC) < 0.5


def test_leaf_correspondence(modelC, fieldC):
    patch = integrate_leaf_patch(modelC, np.array([0.3, 0.1, 0.7, 0.2]), 1.0, 4)
    out = leaf_correspondence_check(fieldC, patch)
    assert out["pass"]
    assert out["control_deviation"] > 100 * out["deviation"]


def test_plaque_probe_linear_is_uniform(linear100):
    f = solve_semiconjugacy(linear100, grid=2)
    res = plaque_mass_probe(f, [0.3, 0.1, 0.7, 0.2], 0.5, samples=40_000, bins=4, plaques=4)
    assert res["bins"] == 16 and res["uniform_mass"] == 1 / 16
    # plaques are sets of fixed transverse coordinates: centre coordinates stay uniform
    assert res["tv_mean"] < 0.1
    assert sum(r["n_samples"] for r in res["rows"]) <= 40_000
