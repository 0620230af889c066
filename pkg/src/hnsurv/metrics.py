"""Concordance metrics and the Kaplan-Meier estimator.

A pair (i, j) is comparable when subject i had an observed event and
``time_i < time_j`` strictly; pairs tied in time are dropped. Tied
predictions score one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCohort, NoComparablePairs, ShapeMismatch
from .survival import TimeGrid


@dataclass
class CohortOutcome:
    time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float).reshape(-1)
        self.event = np.asarray(self.event).astype(bool).reshape(-1)
        if self.time.shape != self.event.shape:
            raise ShapeMismatch("time and event must have the same length")
        if not np.isfinite(self.time).all() or (self.time <= 0).any():
            raise ValueError("outcome times must be positive and finite")

    def __len__(self):
        return self.time.size


@dataclass
class StepCurve:
    time: np.ndarray
    survival: np.ndarray

    def at(self, t: float) -> float:
        """Right-continuous step value at time ``t``."""
        k = np.searchsorted(self.time, t, side="right") - 1
        return float(self.survival[max(k, 0)])


def _comparable(out: CohortOutcome) -> np.ndarray:
    t = out.time
    return out.event[:, None] & (t[:, None] < t[None, :])


def _score(comp: np.ndarray, lower: np.ndarray, tied: np.ndarray) -> float:
    n_comp = int(comp.sum())
    if n_comp == 0:
        raise NoComparablePairs("no comparable pairs in this cohort")
    conc = int((comp & lower).sum())
    ties = int((comp & tied).sum())
    return (conc + 0.5 * ties) / n_comp


def ctd_index(curves, outcomes: CohortOutcome, grid: TimeGrid) -> float:
    """Time-dependent concordance of per-subject survival curves [N, p].

    Subject i is scored against j at the grid interval containing time_i;
    concordant when S_i is lower there.
    """
    S = np.asarray(getattr(curves, "data", curves), dtype=float)
    n = len(outcomes)
    if n < 2:
        raise NoComparablePairs("need at least two subjects")
    if S.shape != (n, grid.p):
        raise ShapeMismatch(f"curves shape {S.shape}, expected {(n, grid.p)}")
    tau = grid.interval_of(outcomes.time)
    # at_tau[i, j] = S_j evaluated at subject i's interval
    at_tau = S[:, tau].T
    own = at_tau[np.arange(n), np.arange(n)][:, None]
    return _score(_comparable(outcomes), own < at_tau, own == at_tau)


def harrell_c(risk_scores, outcomes: CohortOutcome) -> float:
    """Harrell's C for a time-independent risk (higher means earlier event)."""
    r = np.asarray(risk_scores, dtype=float).reshape(-1)
    if r.size != len(outcomes):
        raise ShapeMismatch(f"{r.size} scores for {len(outcomes)} subjects")
    if r.size < 2:
        raise NoComparablePairs("need at least two subjects")
    return _score(_comparable(outcomes), r[:, None] > r[None, :], r[:, None] == r[None, :])


def kaplan_meier(outcomes: CohortOutcome) -> StepCurve:
    """Product-limit estimate; the curve starts at (0, 1.0) and steps only at
    event times."""
    if len(outcomes) == 0:
        raise EmptyCohort("Kaplan-Meier needs at least one subject")
    t, e = outcomes.time, outcomes.event
    times = [0.0]
    surv = [1.0]
    s = 1.0
    for u in np.unique(t[e]):
        at_risk = int((t >= u).sum())
        d = int(((t == u) & e).sum())
        s *= 1.0 - d / at_risk
        times.append(float(u))
        surv.append(s)
    return StepCurve(np.array(times), np.array(surv))
