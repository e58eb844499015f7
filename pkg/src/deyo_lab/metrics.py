"""Group accuracies, risk-coverage curves, entropy quartiles and Area 1-4 analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalRecords:
    """Column-wise evaluation records (one entry per sample)."""

    entropy: np.ndarray
    plpd: np.ndarray
    correct: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.entropy = np.asarray(self.entropy, dtype=np.float64)
        self.plpd = np.asarray(self.plpd, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        self.group = np.asarray(self.group, dtype=np.int64)

    def __len__(self):
        return len(self.correct)

    def subset(self, mask):
        return EvalRecords(self.entropy[mask], self.plpd[mask], self.correct[mask], self.group[mask])

    def confidence(self, key):
        """Higher means more confident: -entropy for ``"entropy"``, PLPD as is."""
        if key == "entropy":
            return -self.entropy
        if key == "plpd":
            return self.plpd
        raise KeyError(f"unknown confidence key {key!r}")


@dataclass
class GroupAccuracy:
    per_group: dict
    counts: dict
    average: float
    worst: float
    worst_group: int


def group_accuracies(records: EvalRecords, groups=None) -> GroupAccuracy:
    """Accuracy per group, overall sample accuracy, and the worst nonempty group.

    ``groups`` lists the groups expected to appear; absent ones are skipped
    with a warning.
    """
    present = np.unique(records.group)
    if groups is None:
        groups = present.tolist()
    per_group, counts = {}, {}
    for g in groups:
        mask = records.group == g
        if not mask.any():
            warnings.warn(f"group {g} has no samples; excluded from worst-group accuracy")
            continue
        per_group[int(g)] = float(records.correct[mask].mean())
        counts[int(g)] = int(mask.sum())
    if not per_group:
        raise ValueError("no records")
    worst_group = min(per_group, key=lambda g: (per_group[g], g))
    return GroupAccuracy(
        per_group=per_group,
        counts=counts,
        average=float(records.correct.mean()),
        worst=per_group[worst_group],
        worst_group=worst_group,
    )


@dataclass
class RCCurve:
    coverage: np.ndarray
    risk: np.ndarray
    aurc: float


def rc_curve_arrays(confidence, correct) -> RCCurve:
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    n = len(correct)
    if n == 0:
        raise ValueError("rc_curve needs at least one record")
    order = np.argsort(-confidence, kind="stable")
    errors = np.cumsum(~correct[order])
    k = np.arange(1, n + 1)
    risk = errors / k
    return RCCurve(coverage=k / n, risk=risk, aurc=float(risk.mean()))


def rc_curve(records: EvalRecords, confidence_key: str = "plpd") -> RCCurve:
    """Risk-coverage curve; AURC is the plain mean of the N prefix risks."""
    return rc_curve_arrays(records.confidence(confidence_key), records.correct)


@dataclass
class QuartileAccuracy:
    bounds: tuple
    accuracy: list
    counts: list
    degenerate: bool


def entropy_quartile_accuracy(records: EvalRecords) -> QuartileAccuracy:
    """Accuracy in [0,Q1), [Q1,Q2), [Q2,Q3), [Q3,inf) of the entropy distribution."""
    if len(records) < 4:
        raise ValueError("need at least 4 records for quartiles")
    q1, q2, q3 = np.quantile(records.entropy, [0.25, 0.5, 0.75])
    edges = [-np.inf, q1, q2, q3, np.inf]
    accuracy, counts = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (records.entropy >= lo) & (records.entropy < hi)
        counts.append(int(mask.sum()))
        accuracy.append(float(records.correct[mask].mean()) if mask.any() else None)
    degenerate = sum(c > 0 for c in counts) < 4
    return QuartileAccuracy((float(q1), float(q2), float(q3)), accuracy, counts, degenerate)


def area_labels(entropy, plpd, tau_ent, tau_plpd) -> np.ndarray:
    """Area per sample: 1 high-Ent/low-PLPD, 2 high/high, 3 low/low, 4 low-Ent/high-PLPD.

    Samples without a PLPD value (NaN) get area 0.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    plpd = np.asarray(plpd, dtype=np.float64)
    low_ent = entropy < tau_ent
    with np.errstate(invalid="ignore"):
        high_plpd = plpd > tau_plpd
    area = 1 + high_plpd.astype(np.int64) + 2 * low_ent.astype(np.int64)
    return np.where(np.isnan(plpd), 0, area)


@dataclass
class AreaStats:
    share: dict
    accuracy: dict
    counts: dict


def area_partition(records: EvalRecords, tau_ent: float, tau_plpd: float) -> AreaStats:
    areas = area_labels(records.entropy, records.plpd, tau_ent, tau_plpd)
    known = areas > 0
    total = int(known.sum())
    share, accuracy, counts = {}, {}, {}
    for a in (1, 2, 3, 4):
        mask = areas == a
        counts[a] = int(mask.sum())
        share[a] = counts[a] / total if total else 0.0
        accuracy[a] = float(records.correct[mask].mean()) if counts[a] else None
    return AreaStats(share, accuracy, counts)
