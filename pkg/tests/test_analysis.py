import math

import numpy as np
import pytest

from flatmtl.analysis import (brier_score, calibration_report, delta_m, ece, entropy_histogram, loss_surface_grid,
                              param_blocks, predictive_entropy, rho_sharpness, robustness_probe,
                              surface_directions)
from flatmtl.errors import DataError
from flatmtl.models import AnalyticTwoValleyProblem, MlpProblem, QuadraticProblem
from flatmtl.params import ParamPartition
from flatmtl.registry import problem_registry


def test_sharpness_quadratic_closed_form():
    q = QuadraticProblem([np.diag([1.0, 4.0, 2.0])], ParamPartition.from_sizes(2, [1]))
    r = rho_sharpness(q, 0, np.zeros(3), 0.1, rng=np.random.default_rng(0))
    assert r.sharpness == pytest.approx(0.5 * 0.01 * 4.0, rel=0.05)
    assert r.worst_loss >= r.base_loss


def test_sharpness_zero_and_negative_rho():
    q = QuadraticProblem.isotropic(1, [1])
    assert rho_sharpness(q, 0, np.ones(2), 0.0).sharpness == 0.0
    with pytest.raises(ValueError):
        rho_sharpness(q, 0, np.ones(2), -1.0)


def test_sharpness_respects_support_and_shared_only():
    q = QuadraticProblem([np.diag([1.0, 9.0]), np.diag([1.0, 1.0])], ParamPartition.from_sizes(1, [1, 1]))
    theta = np.zeros(3)
    full = rho_sharpness(q, 0, theta, 0.1, rng=np.random.default_rng(0))
    shared = rho_sharpness(q, 0, theta, 0.1, rng=np.random.default_rng(0), shared_only=True)
    assert full.sharpness == pytest.approx(0.045, rel=0.05)
    assert shared.sharpness == pytest.approx(0.005, rel=0.05)


def test_two_valley_sharpness_matches_analytic():
    p = AnalyticTwoValleyProblem()
    expected = p.analytic_sharpness(0.1)
    got = {w: rho_sharpness(p, 0, p.valley_point(w, 0), 0.1, rng=np.random.default_rng(1)).sharpness
           for w in ("wide", "narrow")}
    assert got["narrow"] == pytest.approx(expected["narrow"], rel=0.05)
    # the wide bottom's steepest axis is the quartic double well; leading order overestimates it
    along_y = p.barrier * (0.1 * (0.1 - p.separation)) ** 2 / (0.5 * p.separation) ** 4
    assert along_y - 1e-9 <= got["wide"] <= expected["wide"]


def test_probe_zero_radius_is_base_evaluation():
    p = AnalyticTwoValleyProblem()
    theta = p.valley_point("narrow")
    t = robustness_probe(p, theta, [0.0, 0.5], 5, np.random.default_rng(0))
    assert t.mean[0] == p.evaluate(theta) and t.std[0] == [0.0, 0.0]
    assert all(m > b for m, b in zip(t.mean[1], t.mean[0]))
    assert [row[0] for row in t.rows()] == [0.0, 0.5]


def test_probe_is_seeded():
    p = AnalyticTwoValleyProblem()
    theta = p.valley_point("wide")
    a = robustness_probe(p, theta, [1.0], 4, np.random.default_rng(2))
    b = robustness_probe(p, theta, [1.0], 4, np.random.default_rng(2))
    assert a.mean == b.mean


def test_surface_directions_and_grid():
    q = QuadraticProblem.isotropic(2, [2])
    theta = np.zeros(4)
    d1, d2 = surface_directions(q, theta, np.random.default_rng(0), filter_norm=False)
    assert d1 @ d2 == pytest.approx(0, abs=1e-12)
    assert np.linalg.norm(d1) == pytest.approx(1) and np.linalg.norm(d2) == pytest.approx(1)
    g = loss_surface_grid(q, 0, theta, np.random.default_rng(0), extent=1.0, resolution=5, filter_norm=False)
    assert g.values.shape == (5, 5) and g.coords.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert g.values[2, 2] == 0.0
    # isotropic: loss = (a^2 + b^2) / 2 along orthonormal directions
    assert g.values[0, 4] == pytest.approx(1.0)


def test_filter_normalized_directions_match_block_norms():
    p = MlpProblem(3, [4], [2, 2])
    theta = p.init_params(np.random.default_rng(0))
    d1, _ = surface_directions(p, theta, np.random.default_rng(1))
    for sl in param_blocks(p):
        if np.linalg.norm(theta[sl]) > 0:
            assert np.linalg.norm(d1[sl]) == pytest.approx(np.linalg.norm(theta[sl]), rel=1e-9)


@pytest.mark.parametrize("M,S,low,expected", [
    ([1.0, 2.0], [1.0, 2.0], [False, True], 0.0),
    ([11.0], [10.0], [False], -10.0),
    ([0.09], [0.10], [True], -10.0),
    ([9.0], [10.0], [False], 10.0),
])
def test_delta_m_examples(M, S, low, expected):
    assert delta_m(M, S, low) == pytest.approx(expected, abs=1e-9)


def test_delta_m_errors():
    with pytest.raises(ValueError):
        delta_m([1.0], [1.0, 2.0], [True])
    with pytest.raises(ValueError):
        delta_m([], [], [])
    with pytest.raises(ValueError):
        delta_m([1.0], [0.0], [True])


def test_brier_examples():
    assert brier_score(np.eye(3), [0, 1, 2]) == 0.0
    assert brier_score(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(0.5, abs=1e-12)
    assert brier_score([[0.8, 0.2]], [0]) == pytest.approx(0.08, abs=1e-12)


def test_ece_examples():
    assert ece(np.eye(3), [0, 1, 2]) == 0.0
    assert ece([[0.9, 0.1], [0.9, 0.1]], [0, 1]) == pytest.approx(0.4, abs=1e-12)
    p = np.array([[0.7, 0.3], [0.4, 0.6], [0.55, 0.45]])
    y = [0, 0, 0]
    assert ece(p, y, bins=1) == pytest.approx(abs(2 / 3 - np.mean([0.7, 0.6, 0.55])), abs=1e-12)
    with pytest.raises(ValueError):
        ece(p, y, bins=0)


def test_entropy_examples():
    assert predictive_entropy([1.0, 0.0, 0.0]) == 0.0
    assert predictive_entropy(np.full(5, 0.2)) == pytest.approx(math.log(5) / 5)
    assert predictive_entropy([0.5, 0.5]) == pytest.approx(0.34657359, abs=1e-8)
    assert predictive_entropy([0.5, 0.5], normalize_by_classes=False) == pytest.approx(math.log(2))


def test_probability_validation():
    with pytest.raises(DataError):
        brier_score([[0.5, 0.6]], [0])
    with pytest.raises(DataError):
        brier_score([[0.5, 0.5]], [2])
    with pytest.raises(DataError):
        ece([0.5, 0.5], [0])


def test_calibration_report_and_histogram():
    p = np.array([[0.5, 0.5], [1.0, 0.0], [0.9, 0.1]])
    counts, edges = entropy_histogram(p, bins=4)
    assert counts.sum() == 3 and edges[-1] == pytest.approx(math.log(2) / 2)
    rep = calibration_report(p, [0, 0, 1])
    assert rep.bins == 10 and rep.brier == pytest.approx(brier_score(p, [0, 0, 1]))


def test_probe_on_classifier_reports_accuracy():
    reg = problem_registry("synth_classification", {"n_train": 32, "n_eval": 32, "hidden": [4]})
    theta = reg.problem.init_params(np.random.default_rng(0))
    t = robustness_probe(reg.problem, theta, [0.0], 1, np.random.default_rng(0), reg.data.eval)
    assert t.metric == "accuracy" and 0 <= t.mean[0][0] <= 1
