"""Diagonal weight construction: importance times scale correction.

Weights combine a per-entry importance factor with an optional scale
correction derived from the initial forecasts, so that entries of very
different magnitudes contribute comparably to the objective. The
``reciprocal_squared`` mode turns the absolute-error objective into a
percentage-error objective; ``percentage_objective`` evaluates that loss
directly and is used to check the two formulations agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeightDomainError
from .sparse_core import DiagonalWeights, as_values

__all__ = ["WeightSpec", "build_weights", "percentage_objective", "SCALE_MODES"]

SCALE_MODES = ("none", "reciprocal", "reciprocal_squared")


@dataclass(frozen=True)
class WeightSpec:
    """How to turn initial forecasts into diagonal weights.

    ``importance`` is a positive scalar or per-entry vector; ``scale_mode``
    selects no scaling, ``1/yhat`` scaling, or ``(1/(yhat+epsilon))^2``
    percentage scaling. ``epsilon`` only participates in the squared mode
    and must be positive whenever any forecast is zero there.
    """

    importance: float | np.ndarray = 1.0
    scale_mode: str = "none"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.scale_mode not in SCALE_MODES:
            raise WeightDomainError(
                f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}"
            )
        if self.epsilon < 0:
            raise WeightDomainError("epsilon must be nonnegative")
        imp = np.asarray(self.importance, dtype=np.float64)
        if np.any(imp <= 0) or not np.all(np.isfinite(imp)):
            raise WeightDomainError("importance weights must be positive and finite")


def build_weights(spec: WeightSpec, yhat) -> DiagonalWeights:
    """Build ``W`` with entries ``importance_i * scale_i``.

    Raises
    ------
    WeightDomainError
        If scaling requirements on the forecasts are violated (naming the
        first offending index), or if any resulting weight is nonpositive
        or nonfinite.
    """
    values = as_values(yhat)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise WeightDomainError(f"forecast {bad} is not finite: {values[bad]!r}")

    imp = np.broadcast_to(
        np.asarray(spec.importance, dtype=np.float64), values.shape
    )

    if spec.scale_mode == "none":
        scale = np.ones_like(values)
    elif spec.scale_mode == "reciprocal":
        # Reciprocal scaling assumes strictly positive forecasts; zeros are
        # rejected rather than epsilon-shifted (use reciprocal_squared for
        # data that contains zeros).
        if np.any(values <= 0):
            bad = int(np.flatnonzero(values <= 0)[0])
            raise WeightDomainError(
                f"reciprocal weighting requires yhat > 0; entry {bad} is "
                f"{values[bad]!r}"
            )
        scale = 1.0 / values
    else:  # reciprocal_squared
        shifted = values + spec.epsilon
        if np.any(shifted <= 0):
            bad = int(np.flatnonzero(shifted <= 0)[0])
            raise WeightDomainError(
                f"reciprocal_squared weighting requires yhat + epsilon > 0; "
                f"entry {bad} gives {shifted[bad]!r}"
            )
        scale = (1.0 / shifted) ** 2

    entries = imp * scale
    finite = np.isfinite(entries) & (entries > 0)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise WeightDomainError(
            f"weight {bad} came out as {entries[bad]!r}; check importance and scale"
        )
    return DiagonalWeights(entries)


def percentage_objective(y, yhat, importance, epsilon: float = 1.0) -> float:
    """Evaluate the relative-error quadratic loss.

    Computes ``r^T diag(importance) r`` with ``r = (y - yhat)/(yhat + epsilon)``.
    Algebraically identical to the plain weighted squared error evaluated
    under ``build_weights`` with ``reciprocal_squared`` scaling.
    """
    y = as_values(y)
    yhat = as_values(yhat)
    if y.shape != yhat.shape:
        raise WeightDomainError(
            f"y has shape {y.shape} but yhat has shape {yhat.shape}"
        )
    denom = yhat + epsilon
    if np.any(denom == 0):
        bad = int(np.flatnonzero(denom == 0)[0])
        raise WeightDomainError(f"yhat + epsilon is zero at entry {bad}")
    imp = np.broadcast_to(np.asarray(importance, dtype=np.float64), y.shape)
    r = (y - yhat) / denom
    return float(r @ (imp * r))
