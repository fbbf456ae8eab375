"""Long-term quantile summaries of a spectrogram, used as auxiliary features."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .frontend import TimeFrequencyMatrix

DEFAULT_LEVELS = (0.001, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999)
DEFAULT_WINDOW = 1800.0
DEFAULT_PERIOD = 450.0
CONTEXT_BANDS = 32


@dataclass
class ContextTensor:
    """Quantile slices indexed ``values[slice, quantile, band]``.

    Slice ``i`` is stamped at ``times[i]`` and summarizes the frames in
    ``[times[i] - window, times[i])``.
    """

    values: np.ndarray
    times: np.ndarray
    slice_period: float = DEFAULT_PERIOD
    window: float = DEFAULT_WINDOW
    quantile_levels: tuple = DEFAULT_LEVELS
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slice_period <= 0:
            raise ValueError("slice_period must be positive")

    def __len__(self):
        return len(self.times)


def reduce_bands(E: TimeFrequencyMatrix, n_out: int = CONTEXT_BANDS) -> TimeFrequencyMatrix:
    """Average groups of consecutive bands down to ``n_out`` bands."""
    n = E.n_bands
    if n % n_out:
        raise ValueError(f"band count {n} is not divisible by {n_out}")
    g = n // n_out
    values = E.values.reshape(E.n_frames, n_out, g).mean(axis=2)
    edges = np.asarray(E.band_edges)
    if edges.ndim == 2 and len(edges) == n:
        edges = np.stack([edges[::g, 0], edges[g - 1 :: g, 1]], axis=1)
    return replace(E, values=values, band_edges=edges,
                   metadata={**E.metadata, "reduced_from": n})


def slice_times(duration: float, period: float) -> np.ndarray:
    """Slice stamps ``period, 2 period, ...`` up to ``duration``.

    Recordings shorter than one period get a single slice at their end.
    """
    n = int(np.floor(duration / period + 1e-9))
    if n == 0:
        return np.array([duration])
    return period * np.arange(1, n + 1)


def summary_statistics(
    E32: TimeFrequencyMatrix,
    window: float = DEFAULT_WINDOW,
    period: float = DEFAULT_PERIOD,
    levels=DEFAULT_LEVELS,
) -> ContextTensor:
    """Windowed per-band empirical quantiles (linear interpolation estimator)."""
    if window < period:
        raise ValueError("window must be >= period")
    levels = tuple(float(q) for q in levels)
    if any(not 0 < q < 1 for q in levels) or list(levels) != sorted(levels):
        raise ValueError("quantile levels must be sorted and inside (0, 1)")
    duration = E32.n_frames / E32.frame_rate
    times = slice_times(duration, period)
    # frame t covers samples starting at t * hop; frame index for time s is s * rate
    rate = E32.frame_rate
    out = np.empty((len(times), len(levels), E32.n_bands))
    for i, t in enumerate(times):
        lo = max(0, int(np.ceil((t - window) * rate - 1e-9)))
        hi = min(E32.n_frames, int(np.ceil(t * rate - 1e-9)))
        if hi <= lo:
            raise ValueError(f"empty context window ending at t={t:.3f} s")
        out[i] = np.quantile(E32.values[lo:hi], levels, axis=0)
    return ContextTensor(
        values=out,
        times=times,
        slice_period=period,
        window=window,
        quantile_levels=levels,
        metadata={"kind": E32.kind.value},
    )


def context_index(C: ContextTensor, t) -> np.ndarray:
    """Index of the latest slice stamped at or before ``t`` (first slice before that)."""
    if len(C) == 0:
        raise ValueError("empty context tensor")
    idx = np.searchsorted(C.times, np.asarray(t, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(C) - 1)


def context_at(C: ContextTensor, t: float) -> np.ndarray:
    return C.values[int(context_index(C, t))]
