"""FAR / FRR / EER for distance-like scores and the multi-config report.

A pair is accepted when ``score <= threshold``; ties count as accepts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .vectorstore import ScoreSet, TestPair, write_csv


@dataclass(frozen=True)
class EvalResult:
    eer: float
    threshold_at_eer: float
    roc_points: tuple  # (threshold, far, frr), thresholds ascending

    @property
    def eer_percent(self) -> float:
        return 100.0 * self.eer


def _split(scores, labels):
    s = np.asarray(scores.scores if isinstance(scores, ScoreSet) else scores, dtype=np.float64)
    if len(labels) != len(s):
        raise FormatError(f"{len(s)} scores but {len(labels)} labels")
    if any(lab is None for lab in labels):
        raise FormatError("every pair needs a ground-truth label for evaluation")
    lab = np.asarray([bool(x) for x in labels], dtype=bool)
    genuine, impostor = s[lab], s[~lab]
    if genuine.size == 0 or impostor.size == 0:
        raise FormatError("evaluation needs at least one genuine and one impostor pair")
    return genuine, impostor


def labels_for(scores: ScoreSet, pairs: Sequence[TestPair]) -> list:
    """Labels from the manifest, checked to be in the same order as the scores."""
    if len(pairs) != len(scores):
        raise FormatError(f"{len(scores)} scores but {len(pairs)} pairs in the manifest")
    for p, e in zip(pairs, scores):
        if (p.voice_id, p.face_id) != (e.voice_id, e.face_id):
            raise FormatError(f"score row ({e.voice_id}, {e.face_id}) does not match manifest row")
    return [p.label for p in pairs]


def far_frr(scores, labels, threshold: float) -> tuple[float, float]:
    genuine, impostor = _split(scores, labels)
    far = np.count_nonzero(impostor <= threshold) / impostor.size
    frr = np.count_nonzero(genuine > threshold) / genuine.size
    return float(far), float(frr)


def eer(scores, labels) -> EvalResult:
    """Equal error rate from a sweep over midpoints of adjacent distinct scores.

    FAR - FRR rises from -1 to 1 along the sweep.  The EER is read at the
    first threshold where it reaches 0, interpolating linearly between the
    two neighbouring sweep points when it jumps over 0.
    """
    genuine, impostor = _split(scores, labels)
    distinct = np.unique(np.concatenate([genuine, impostor]))
    span = max(1.0, float(distinct[-1] - distinct[0]))
    thresholds = np.concatenate(
        [[distinct[0] - span], (distinct[:-1] + distinct[1:]) / 2.0, [distinct[-1] + span]]
    )
    g_sorted, i_sorted = np.sort(genuine), np.sort(impostor)
    far = np.searchsorted(i_sorted, thresholds, side="right") / impostor.size
    frr = 1.0 - np.searchsorted(g_sorted, thresholds, side="right") / genuine.size
    gap = far - frr
    i = int(np.argmax(gap >= 0.0))  # last sweep point has gap == 1
    if gap[i] == 0.0 or i == 0:
        value, at = far[i], thresholds[i]
    else:
        w = -gap[i - 1] / (gap[i] - gap[i - 1])
        value = far[i - 1] + w * (far[i] - far[i - 1])
        at = thresholds[i - 1] + w * (thresholds[i] - thresholds[i - 1])
    roc = tuple((float(t), float(a), float(r)) for t, a, r in zip(thresholds, far, frr))
    return EvalResult(float(min(1.0, max(0.0, value))), float(at), roc)


def round_half_up(value: float, places: int = 1) -> float:
    """Decimal rounding as printed in result tables (29.55 -> 29.6).

    The value is first reduced to 12 significant digits so binary noise
    such as 29.549999999999997 rounds the way the decimal number would.
    """
    d = Decimal(f"{value:.12g}").quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)
    return float(d)


@dataclass(frozen=True)
class Report:
    rows: tuple  # (config, eer fraction)
    overall: float

    def display(self) -> str:
        width = max([len("overall")] + [len(name) for name, _ in self.rows])
        lines = [f"{name:<{width}}  EER {round_half_up(100.0 * v):5.1f}%" for name, v in self.rows]
        lines.append(f"{'overall':<{width}}  EER {round_half_up(100.0 * self.overall):5.1f}%")
        return "\n".join(lines)

    @property
    def overall_display(self) -> float:
        return round_half_up(100.0 * self.overall)


def report(results: Mapping[str, EvalResult | float]) -> Report:
    """Per-config EERs and their unweighted mean (the overall score).

    Values may be ``EvalResult`` objects or bare EER fractions.
    """
    if not results:
        raise ConfigError("report needs at least one configuration")
    rows = []
    for name, res in results.items():
        value = res.eer if isinstance(res, EvalResult) else float(res)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"EER for {name!r} must be a fraction in [0, 1]")
        rows.append((str(name), value))
    overall = math.fsum(v for _, v in rows) / len(rows)
    return Report(tuple(rows), overall)


def write_report_csv(path, rep: Report):
    write_csv(path, ["config", "eer"], list(rep.rows) + [("overall", rep.overall)])


def write_roc_csv(path, result: EvalResult):
    write_csv(path, ["threshold", "far", "frr"], result.roc_points)
