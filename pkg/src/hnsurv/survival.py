"""Discrete-time survival head: time grid, labels, hazards, curves and loss.

Interval ``j`` (1-based) is ``(t_{j-1}, t_j]`` with ``t_0 = 0``. The network
emits one logit per interval; ``sigmoid(logit)`` is the conditional
probability of surviving the interval, so the hazard is ``sigmoid(-logit)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import HazardOutOfRange, NonPositiveTime, ShapeMismatch, TooFewDistinctTimes
from .nn import Linear, Module
from .tensor import Tensor

HAZARD_EPS = 1e-7


@dataclass(frozen=True)
class TimeGrid:
    edges: tuple

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        object.__setattr__(self, "edges", e)
        if not e:
            raise ValueError("a time grid needs at least one edge")
        if e[0] <= 0 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"grid edges must be positive and strictly increasing: {e}")

    @property
    def p(self) -> int:
        return len(self.edges)

    def interval_of(self, times) -> np.ndarray:
        """0-based index of the right-closed interval containing each time,
        clamped to the last interval beyond the horizon."""
        idx = np.searchsorted(np.asarray(self.edges), np.asarray(times, dtype=float), side="left")
        return np.minimum(idx, self.p - 1)


def build_grid(times: Sequence[float], p: int) -> TimeGrid:
    """Equal-frequency grid: edge j is the j/p quantile (midpoint
    interpolation) of ``times``; the last edge is the maximum time."""
    t = np.asarray(times, dtype=float)
    if p < 1:
        raise ValueError("p must be at least 1")
    if (t <= 0).any():
        raise NonPositiveTime("grid times must be positive")
    if np.unique(t).size < p:
        raise TooFewDistinctTimes(f"need at least {p} distinct times, got {np.unique(t).size}")
    qs = np.arange(1, p) / p
    edges = list(np.quantile(t, qs, method="midpoint")) + [float(t.max())]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise TooFewDistinctTimes(f"quantile edges collapse: {edges}")
    return TimeGrid(tuple(edges))


@dataclass(frozen=True)
class DiscreteLabel:
    """``interval_index`` is 1-based; ``n_survived`` counts the intervals the
    subject is known to have fully survived."""

    interval_index: int
    event: bool
    raw_time: float
    n_survived: int


def discretize(grid: TimeGrid, raw_time: float, event: bool) -> DiscreteLabel:
    if not raw_time > 0:
        raise NonPositiveTime(f"follow-up time must be positive, got {raw_time}")
    raw_time = float(raw_time)
    if raw_time > grid.edges[-1]:
        # beyond the horizon: survived every interval, censored at t_p
        return DiscreteLabel(grid.p, False, raw_time, grid.p)
    j = int(grid.interval_of(raw_time)) + 1
    if event:
        return DiscreteLabel(j, True, raw_time, j - 1)
    full = j if raw_time == grid.edges[j - 1] else j - 1
    return DiscreteLabel(j, False, raw_time, full)


def discretize_all(grid: TimeGrid, times, events) -> list[DiscreteLabel]:
    return [discretize(grid, t, bool(e)) for t, e in zip(times, events)]


class SurvivalHead(Module):
    def __init__(self, embedding: int, p: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.p = p
        self.linear = Linear(embedding, p, rng, dtype=dtype)

    def forward(self, fused: Tensor) -> "SurvivalOutput":
        return head_forward(self, fused)


@dataclass
class SurvivalOutput:
    hazards: Tensor
    survival: Tensor


def head_forward(head: SurvivalHead, fused: Tensor) -> SurvivalOutput:
    if fused.ndim != 2 or fused.shape[1] != head.linear.in_features:
        raise ShapeMismatch(
            f"survival head expects [N,{head.linear.in_features}], got {fused.shape}")
    logits = head.linear(fused)
    h = T.sigmoid(T.scale(logits, -1.0))
    return SurvivalOutput(h, survival_curve(h))


def survival_curve(h: Tensor) -> Tensor:
    """S_j = prod_{q<=j} (1 - h_q) per row."""
    if h.ndim != 2:
        raise ShapeMismatch(f"hazards must be [N,p], got {h.shape}")
    if (h.data < 0).any() or (h.data > 1).any():
        raise HazardOutOfRange("hazards must lie in [0, 1]")
    return T.cumprod(T.shift(T.scale(h, -1.0), 1.0))


def label_masks(labels: Sequence[DiscreteLabel], p: int, dtype=np.float64):
    """(event one-hot, survived-interval indicator), both [N, p]."""
    n = len(labels)
    event = np.zeros((n, p), dtype=dtype)
    alive = np.zeros((n, p), dtype=dtype)
    for i, lab in enumerate(labels):
        alive[i, :lab.n_survived] = 1
        if lab.event:
            event[i, lab.interval_index - 1] = 1
    return event, alive


def nll_loss(out: SurvivalOutput, labels: Sequence[DiscreteLabel]) -> Tensor:
    """Mean over subjects of the discrete-time negative log-likelihood.

    An event in interval j contributes log h_j plus log(1 - h_q) for q < j;
    a censored subject contributes log(1 - h_q) for every interval it fully
    survived. Hazards are clamped to [1e-7, 1 - 1e-7] inside the logs.
    """
    h = out.hazards
    n, p = h.shape
    if len(labels) != n:
        raise ShapeMismatch(f"{len(labels)} labels for a batch of {n}")
    if (h.data < 0).any() or (h.data > 1).any():
        raise HazardOutOfRange("hazards must lie in [0, 1]")
    if any(lab.interval_index > p for lab in labels):
        raise ShapeMismatch("label interval beyond the head's grid")
    ev, alive = label_masks(labels, p, h.dtype)
    hc = T.clip(h, HAZARD_EPS, 1 - HAZARD_EPS)
    log_h = T.log(hc)
    log_s = T.log(T.shift(T.scale(hc, -1.0), 1.0))
    ll = T.add(T.mul(log_h, Tensor._wrap(ev)), T.mul(log_s, Tensor._wrap(alive)))
    return T.scale(T.reduce("sum", ll), -1.0 / n)
