import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_eer
from vfchain.errors import ConfigError, FormatError
from vfchain.evaluation import (
    EvalResult,
    eer,
    far_frr,
    labels_for,
    report,
    round_half_up,
    write_report_csv,
    write_roc_csv,
)
from vfchain.vectorstore import ScoreSet, TestPair


def _sl(genuine, impostor):
    return list(genuine) + list(impostor), [True] * len(genuine) + [False] * len(impostor)


def test_far_frr_examples():
    s, lab = _sl([0.1], [0.9])
    assert far_frr(s, lab, -1.0) == (0.0, 1.0)
    assert far_frr(s, lab, 5.0) == (1.0, 0.0)
    assert far_frr(s, lab, 0.5) == (0.0, 0.0)
    assert far_frr(s, lab, 0.9) == (1.0, 0.0)  # ties accept


@pytest.mark.parametrize(
    "genuine, impostor, expected",
    [([0.1, 0.2], [0.8, 0.9], 0.0), ([0.8, 0.9], [0.1, 0.2], 1.0), ([0.1, 0.2, 0.6], [0.4, 0.8, 0.9], 1 / 3)],
)
def test_eer_examples(genuine, impostor, expected):
    assert eer(*_sl(genuine, impostor)).eer == pytest.approx(expected, abs=1e-12)


def test_eer_errors():
    with pytest.raises(FormatError):
        eer([0.1, 0.2], [True, None])
    with pytest.raises(FormatError):
        eer([0.1, 0.2], [True, True])


def test_roc_points_are_monotone():
    rng = np.random.default_rng(0)
    s = rng.random(40)
    res = eer(s, list(rng.random(40) < 0.5))
    t, far, frr = map(np.array, zip(*res.roc_points))
    assert np.all(np.diff(t) > 0) and np.all(np.diff(far) >= 0) and np.all(np.diff(frr) <= 0)
    assert 0.0 <= res.eer <= 1.0


score_sets = st.integers(2, 30).flatmap(
    lambda n: st.tuples(
        # a 0.01 grid keeps the monotone maps below strictly increasing in floating point too
        st.lists(st.integers(0, 200).map(lambda k: k / 100), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda b: 0 < sum(b) < len(b)),
    )
)


@given(score_sets)
def test_eer_matches_brute_force(sl):
    s, lab = sl
    g = [x for x, b in zip(s, lab) if b]
    i = [x for x, b in zip(s, lab) if not b]
    assert eer(s, lab).eer == pytest.approx(brute_force_eer(g, i), abs=1e-9)


@given(score_sets, st.sampled_from(["exp", "cube", "affine"]))
def test_eer_invariant_under_increasing_maps(sl, kind):
    s, lab = sl
    f = {"exp": np.exp, "cube": lambda x: x**3 + x, "affine": lambda x: 3 * x + 7}[kind]
    assert eer(f(np.array(s)), lab).eer == pytest.approx(eer(s, lab).eer, abs=1e-9)


@given(score_sets)
def test_eer_role_swap_symmetry(sl):
    s, lab = sl
    assert eer(-np.array(s), [not b for b in lab]).eer == pytest.approx(eer(s, lab).eer, abs=1e-9)


def test_labels_for_checks_order():
    pairs = [TestPair("v1", "f1", True), TestPair("v2", "f2", False)]
    scores = ScoreSet((("v1", "f1", 0.1), ("v2", "f2", 0.2)))
    assert labels_for(scores, pairs) == [True, False]
    with pytest.raises(FormatError):
        labels_for(scores, pairs[::-1])


# --- report ------------------------------------------------------------------------------


def test_round_half_up():
    assert round_half_up(29.55) == 29.6
    assert round_half_up(20.5) == 20.5
    assert round_half_up(0.05) == 0.1
    assert round_half_up(1.04) == 1.0


def test_report_examples():
    assert report({"only": 0.25}).overall == 0.25
    v1 = report({"a": 0.171, "b": 0.282, "c": 0.183, "d": 0.184})
    assert v1.overall_display == 20.5
    ablation = report({"a": 0.326, "b": 0.343, "c": 0.252, "d": 0.261})
    assert ablation.overall == pytest.approx(0.2955, abs=1e-12)
    assert ablation.overall_display == 29.6
    assert ablation.display().splitlines()[-1] == "overall  EER  29.6%"
    with pytest.raises(ConfigError):
        report({})


def test_report_files(tmp_path):
    res = eer(*_sl([0.1, 0.2], [0.8, 0.9]))
    rep = report({"raw": res, "refined": 0.5})
    write_report_csv(tmp_path / "r.csv", rep)
    assert (tmp_path / "r.csv").read_text() == "config,eer\nraw,0.0\nrefined,0.5\noverall,0.25\n"
    write_roc_csv(tmp_path / "roc.csv", res)
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,far,frr" and len(lines) == len(res.roc_points) + 1
    assert isinstance(res, EvalResult) and res.eer_percent == 0.0
