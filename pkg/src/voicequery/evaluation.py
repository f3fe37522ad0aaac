"""False-alarm / query-error metrics, global-threshold rejection and ROC sweeps.

A *false alarm* is a wrong prediction naming a known query; a *query error*
is any wrong prediction. Both rates divide by the total number of examples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class EvalRecord:
    truth: int
    pred: int
    top_prob: float


@dataclass(frozen=True)
class RocPoint:
    alpha: float
    far: float
    qer: float


class TargetNotMetError(ValueError):
    """No threshold on the grid reaches the requested FAR; ``best`` holds the closest point."""

    def __init__(self, target: float, best: RocPoint):
        super().__init__(f"no alpha reaches FAR <= {target:g}; best is alpha={best.alpha:g} FAR={best.far:.4f}")
        self.target = target
        self.best = best


def records_from_probs(probs: np.ndarray, truths: Sequence[int]) -> list[EvalRecord]:
    """Unthresholded records (argmax prediction) from a ``(n, classes)`` probability matrix."""
    probs = np.asarray(probs)
    pred = probs.argmax(axis=1)
    top = probs[np.arange(len(pred)), pred]
    return [EvalRecord(int(t), int(p), float(q)) for t, p, q in zip(truths, pred, top)]


def apply_threshold(probs: np.ndarray, alpha: float, unknown: int) -> int:
    j = int(np.argmax(probs))
    return j if probs[j] >= alpha else unknown


def _arrays(records: Iterable[EvalRecord]):
    records = list(records)
    if not records:
        raise ValueError("cannot score an empty record list")
    truth = np.fromiter((r.truth for r in records), dtype=np.int64, count=len(records))
    pred = np.fromiter((r.pred for r in records), dtype=np.int64, count=len(records))
    top = np.fromiter((r.top_prob for r in records), dtype=np.float64, count=len(records))
    return truth, pred, top


def _rates(truth, pred, unknown) -> tuple[float, float]:
    wrong = pred != truth
    fa = wrong & (pred != unknown)
    return fa.sum() / len(truth), wrong.sum() / len(truth)


def far(records: Iterable[EvalRecord], unknown: int) -> float:
    truth, pred, _ = _arrays(records)
    return float(_rates(truth, pred, unknown)[0])


def qer(records: Iterable[EvalRecord], unknown: int) -> float:
    truth, pred, _ = _arrays(records)
    return float(_rates(truth, pred, unknown)[1])


def accuracy(records: Iterable[EvalRecord], unknown: int) -> float:
    return 1.0 - qer(records, unknown)


def threshold_records(records: Iterable[EvalRecord], alpha: float, unknown: int) -> list[EvalRecord]:
    return [
        EvalRecord(r.truth, r.pred if r.top_prob >= alpha else unknown, r.top_prob) for r in records
    ]


def default_alpha_grid(steps: int = 200) -> np.ndarray:
    """0, then thresholds whose distance from 1 shrinks geometrically down to 1e-4."""
    grid = 1.0 - np.geomspace(1.0, 1e-4, steps)
    grid[0], grid[-1] = 0.0, 0.9999
    return np.unique(grid)


def roc_sweep(records: Sequence[EvalRecord], alphas: Sequence[float], unknown: int) -> list[RocPoint]:
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(np.diff(alphas) < 0):
        raise ValueError("alpha grid must be sorted ascending")
    truth, pred, top = _arrays(records)
    points = []
    for a in alphas:
        p = np.where(top >= a, pred, unknown)
        f, q = _rates(truth, p, unknown)
        points.append(RocPoint(float(a), float(f), float(q)))
    return points


def pick_alpha(
    records: Sequence[EvalRecord],
    unknown: int,
    target_far: float = 0.01,
    alphas: Sequence[float] | None = None,
) -> RocPoint:
    """Smallest grid threshold whose FAR is at or below ``target_far``."""
    curve = roc_sweep(records, default_alpha_grid() if alphas is None else alphas, unknown)
    for point in curve:
        if point.far <= target_far:
            return point
    best = min(curve, key=lambda p: (p.far, p.qer))
    raise TargetNotMetError(target_far, best)


def format_roc(points: Iterable[RocPoint]) -> str:
    return "".join(f"{p.alpha:.6g}\t{p.far:.6f}\t{p.qer:.6f}\n" for p in points)


def parse_roc(text: str) -> list[RocPoint]:
    out = []
    for line in text.splitlines():
        if line.strip():
            a, f, q = line.split("\t")
            out.append(RocPoint(float(a), float(f), float(q)))
    return out


def summary_table(rows: dict[str, RocPoint]) -> str:
    """Split name -> operating point, rendered like a results table."""
    lines = [f"{'split':<12}{'alpha':>10}{'FAR':>9}{'QER':>9}"]
    for split, p in rows.items():
        lines.append(f"{split:<12}{p.alpha:>10.4f}{100 * p.far:>8.1f}%{100 * p.qer:>8.1f}%")
    return "\n".join(lines) + "\n"
