import numpy as np
import pytest
from hypothesis import given, strategies as st

from prunelab.analysis import (Curve, EvalReport, conflict_fraction, degradation_threshold, evaluate,
                               gradient_conflict, read_curves_csv, read_reports_csv, write_curves_csv,
                               write_reports_csv)
from prunelab.attack import AttackConfig
from prunelab.engine import Network
from prunelab.train import Natural, VerifiedRobust

from helpers import ADV_EVAL_ATTACK, DESK_CNN, INPUT, IBP_MIX, blobs, trained


def test_constant_curve_never_crosses():
    assert degradation_threshold(Curve("era", [(0.0, 0.5), (0.5, 0.5), (0.9, 0.5)]), 0.05) is None


def test_threshold_interpolates():
    assert degradation_threshold(Curve("acc", [(0.0, 1.0), (0.5, 0.9)]), 0.05) == pytest.approx(0.25, abs=1e-12)


def test_threshold_boundary_counts():
    assert degradation_threshold(Curve("acc", [(0.0, 0.8), (0.4, 0.76)]), 0.05) == 0.4


def test_threshold_errors():
    with pytest.raises(ValueError):
        degradation_threshold(Curve("acc", [(0.1, 1.0)]), 0.05)
    with pytest.raises(ValueError):
        degradation_threshold(Curve("acc", []), 0.05)
    with pytest.raises(ValueError):
        degradation_threshold(Curve("acc", [(0.0, 1.0)]), 1.0)
    with pytest.raises(ValueError):
        Curve("acc", [(0.5, 1.0), (0.5, 0.9)])


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_threshold_monotone_in_drop(values, d1, d2):
    ratios = np.linspace(0, 0.95, len(values))
    curve = Curve("m", list(zip(ratios.tolist(), values)))
    lo, hi = sorted((d1, d2))
    a, b = degradation_threshold(curve, lo), degradation_threshold(curve, hi)
    if a is None:
        assert b is None
    elif b is not None:
        assert b >= a - 1e-12


def test_toy_conflict_is_half():
    ga = {"0.weight": np.array([[1.0, -1.0]])}
    gb = {"0.weight": np.array([[1.0, 1.0]])}
    assert conflict_fraction(ga, gb, {"0.weight": np.ones((1, 2))}) == 0.5


def test_conflict_ignores_zeros_and_masked():
    ga = {"0.weight": np.array([[0.0, -1.0, 2.0]])}
    gb = {"0.weight": np.array([[-1.0, 1.0, -2.0]])}
    assert conflict_fraction(ga, gb, {"0.weight": np.array([[1.0, 1.0, 0.0]])}) == 0.5


@given(st.integers(0, 10_000))
def test_conflict_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    ga, gb = {"w": rng.normal(size=shape)}, {"w": rng.normal(size=shape) * (rng.random(shape) > 0.3)}
    masks = {"w": (rng.random(shape) > 0.2).astype(float)}
    f = conflict_fraction(ga, gb, masks)
    assert 0.0 <= f <= 1.0 and f == conflict_fraction(gb, ga, masks)


def test_identical_objectives_do_not_conflict():
    tr, _ = blobs()
    net = trained("verified")
    assert gradient_conflict(net, tr, Natural(), Natural()) == 0.0
    v = VerifiedRobust(IBP_MIX)
    assert gradient_conflict(net, tr, v, v) == 0.0


def test_conflict_symmetric_on_network():
    tr, _ = blobs()
    net = trained("verified")
    v = VerifiedRobust(IBP_MIX)
    assert gradient_conflict(net, tr, Natural(), v) == gradient_conflict(net, tr, v, Natural())


def test_untrained_net_is_at_chance():
    _, te = blobs()
    accs = [evaluate(Network.from_spec(DESK_CNN, INPUT, seed=s), te, ADV_EVAL_ATTACK, 0.1).benign_acc
            for s in range(10)]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_zero_epsilon_report():
    _, te = blobs()
    r = evaluate(trained("natural"), te, AttackConfig(0.0, 0.0, 10), 0.0)
    assert r.benign_acc == r.era and r.vra <= r.era


def test_evaluate_is_read_only_and_ordered():
    _, te = blobs()
    for kind in ("natural", "adversarial", "verified"):
        net = trained(kind)
        digest = net.digest()
        r = evaluate(net, te, AttackConfig(0.05, 0.0125, 10), 0.05)
        assert net.digest() == digest
        assert 0 <= r.vra <= r.era <= r.benign_acc <= 1
        assert r.total_params == net.total_params() and r.pruning_ratio == 0.0


def test_curve_csv_format(tmp_path):
    path = tmp_path / "curves.csv"
    write_curves_csv(path, [Curve("era", [(0.0, 0.5), (0.25, 1 / 3)])])
    assert path.read_text() == "pruning_ratio,metric,value\n0.000000,era,0.500000\n0.250000,era,0.333333\n"
    back = read_curves_csv(path)
    assert back[0].metric == "era" and back[0].points[1] == (0.25, 0.333333)


def test_reports_csv_round_trip(tmp_path):
    r = EvalReport(0.9, 0.5, 0.25, 0.5, 100, 200, step=3, objectives="adversarial", era_epsilon=0.1,
                   vra_epsilon=0.1)
    write_reports_csv(tmp_path / "r.csv", [r])
    assert read_reports_csv(tmp_path / "r.csv") == [r]
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header.split(",") == EvalReport.columns()
