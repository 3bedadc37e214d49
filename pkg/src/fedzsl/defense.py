"""Feature magnitude defense (FMD).

Rectified visual features of attribute-bearing samples are dense, so their
per-sample sum is large; samples whose sum falls below a threshold ``M`` are
treated as malicious and dropped from the batch before the loss is computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FMD_MODES = ("off", "fixed", "auto")


@dataclass(frozen=True)
class FmdConfig:
    mode: str = "off"
    threshold: float = 0.0  # M for fixed mode
    c: float = 0.1  # multiplier for auto mode
    warmup_batches: int = 3

    def __post_init__(self) -> None:
        if self.mode not in FMD_MODES:
            raise ValueError(f"unknown FMD mode {self.mode!r}")
        if self.threshold < 0:
            raise ValueError("FMD threshold must be non-negative")
        if self.mode == "auto" and not 0 < self.c < 1:
            raise ValueError("auto FMD needs 0 < c < 1")
        if self.warmup_batches < 1:
            raise ValueError("warmup_batches must be at least 1")

    @property
    def enabled(self) -> bool:
        return self.mode != "off"


def feature_magnitudes(V: np.ndarray) -> np.ndarray:
    """Per-sample feature sums; ``V`` is (batch, d_v)."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.shape[0] == 0:
        raise ValueError("empty batch")
    return V.sum(axis=1)


def fmd_filter(V: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Split batch positions into (kept, discarded) by ``gamma >= threshold``.

    Both index arrays are ascending, so kept samples keep their order.
    """
    gamma = feature_magnitudes(V)
    keep = gamma >= threshold
    return np.flatnonzero(keep), np.flatnonzero(~keep)


def auto_threshold(magnitudes: np.ndarray, c: float) -> float:
    """``M = c * median`` of warmup magnitudes."""
    m = np.asarray(magnitudes, dtype=np.float64).ravel()
    if m.size == 0:
        raise ValueError("empty warmup")
    return float(c * np.median(m))
