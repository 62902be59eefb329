"""Relaxed lane-selection variables: initialization, rounding and compliance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ALPHAS = (-1, 0, 1)
# argmax tie preference: keep lane first, then right, then left
_TIE_ORDER = (1, 2, 0)


@dataclass
class DecisionVars:
    b: np.ndarray  # (T, 3), columns alpha = -1, 0, +1
    mask: np.ndarray  # (3,) bool

    def __post_init__(self):
        self.b = np.array(self.b, dtype=float).reshape(-1, 3)
        self.mask = np.array(self.mask, dtype=bool).reshape(3)
        if not self.mask.any():
            raise ValueError("no available maneuver")
        self.b[:, ~self.mask] = 0.0

    @property
    def T(self) -> int:
        return len(self.b)


class ComplianceReport(NamedTuple):
    compliant: bool
    sum_error: np.ndarray  # (T,) |sum b - 1|
    max_b: np.ndarray  # (T,)
    in_range: np.ndarray  # (T,) bool
    step_ok: np.ndarray  # (T,) bool


def normalize_probabilities(d, mask) -> np.ndarray:
    """Zero masked entries and renormalize over the available ones."""
    d = np.asarray(d, dtype=float).reshape(3)
    mask = np.asarray(mask, dtype=bool).reshape(3)
    if not mask.any():
        raise ValueError("all maneuvers are masked; no available lane")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("decision probabilities must be finite and non-negative")
    d = np.where(mask, d, 0.0)
    total = d.sum()
    if total <= 0.0:
        return mask / mask.sum()
    return d / total


def init_decisions(d, mask, T: int) -> DecisionVars:
    """Every plan step starts from the same (renormalized) probability row."""
    p = normalize_probabilities(d, mask)
    return DecisionVars(np.tile(p, (T, 1)), mask)


def round_decision(b, mask=None) -> int:
    """Maneuver with the largest time-mean ``b``; ties prefer keep, then right."""
    if isinstance(b, DecisionVars):
        mask = b.mask if mask is None else mask
        b = b.b
    mean = np.asarray(b, dtype=float).reshape(-1, 3).mean(axis=0)
    if mask is not None:
        mean = np.where(np.asarray(mask, dtype=bool), mean, -np.inf)
    best = max(_TIE_ORDER, key=lambda i: (mean[i], -_TIE_ORDER.index(i)))
    return ALPHAS[best]


def compliance_check(b, tol: float = 0.05) -> ComplianceReport:
    """Per-step sum-to-one, dominance and range checks on the relaxed decisions."""
    if isinstance(b, DecisionVars):
        b = b.b
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    sum_err = np.abs(b.sum(axis=1) - 1.0)
    max_b = b.max(axis=1)
    in_range = np.all((b >= -tol) & (b <= 1.0 + tol), axis=1)
    ok = (sum_err <= tol) & (max_b >= 1.0 - tol) & in_range
    return ComplianceReport(bool(ok.all()), sum_err, max_b, in_range, ok)


def one_hot(alpha: int, T: int) -> np.ndarray:
    row = np.zeros(3)
    row[ALPHAS.index(alpha)] = 1.0
    return np.tile(row, (T, 1))
