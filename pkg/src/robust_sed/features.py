"""Recording-level featurization and patch extraction shared by training and detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .context import (
    CONTEXT_BANDS, DEFAULT_LEVELS, DEFAULT_PERIOD, DEFAULT_WINDOW, ContextTensor,
    context_index, reduce_bands, summary_statistics,
)
from .frontend import (
    DESK_SPECTROGRAM, LOG_FLOOR, OUTDOOR, PCEN_PRESETS, PcenParams, SpectrogramConfig,
    TFKind, TimeFrequencyMatrix, Waveform, logmelspec, melspectrogram, pcen,
)


@dataclass(frozen=True)
class FrontendConfig:
    """Which compression to apply, and how to summarize the context."""

    kind: str = "pcen"
    spectrogram: SpectrogramConfig = DESK_SPECTROGRAM
    pcen: PcenParams = OUTDOOR
    context_window: float = DEFAULT_WINDOW
    context_period: float = DEFAULT_PERIOD
    quantile_levels: tuple = DEFAULT_LEVELS
    context_bands: int = CONTEXT_BANDS

    def __post_init__(self):
        kind = {"logmelspec": "logmel"}.get(self.kind, self.kind)
        if kind not in ("logmel", "pcen"):
            raise ValueError(f"unknown frontend kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "quantile_levels", tuple(float(q) for q in self.quantile_levels))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "spectrogram": self.spectrogram.to_dict(),
            "pcen": self.pcen.to_dict(),
            "context_window": self.context_window,
            "context_period": self.context_period,
            "quantile_levels": list(self.quantile_levels),
            "context_bands": self.context_bands,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        d = dict(d)
        if isinstance(d.get("spectrogram"), dict):
            d["spectrogram"] = SpectrogramConfig(**d["spectrogram"])
        p = d.get("pcen")
        if isinstance(p, str):
            if p not in PCEN_PRESETS:
                raise ValueError(f"unknown PCEN preset {p!r}")
            d["pcen"] = PCEN_PRESETS[p]
        elif isinstance(p, dict):
            d["pcen"] = PcenParams(**p)
        if "quantile_levels" in d:
            d["quantile_levels"] = tuple(d["quantile_levels"])
        return cls(**d)

    @property
    def fill_value(self) -> float:
        """Transformed value of zero energy, used outside the recording."""
        if self.kind == "logmel":
            return float(np.log10(LOG_FLOOR))
        return 0.0


@dataclass
class Features:
    """Transformed spectrogram of one recording plus its context summary."""

    matrix: TimeFrequencyMatrix
    context: ContextTensor
    config: FrontendConfig
    n_samples: int
    meta: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.n_samples / self.matrix.sample_rate


def transform(w: Waveform, cfg: FrontendConfig) -> TimeFrequencyMatrix:
    E = melspectrogram(w, cfg.spectrogram)
    if cfg.kind == "logmel":
        return logmelspec(E)
    return pcen(E, cfg.pcen)


def featurize(w: Waveform, cfg: FrontendConfig = FrontendConfig(), dtype=np.float32) -> Features:
    """Transform a recording and compute its context slices from the same representation."""
    X = transform(w, cfg)
    C = summary_statistics(reduce_bands(X, cfg.context_bands), cfg.context_window,
                           cfg.context_period, cfg.quantile_levels)
    X = X.with_values(X.values.astype(dtype, copy=False))
    return Features(X, C, cfg, len(w))


def center_frame(t, X: TimeFrequencyMatrix) -> np.ndarray:
    """Index of the analysis frame whose window is centered nearest to time ``t``."""
    t = np.asarray(t, dtype=np.float64)
    return np.rint((t * X.sample_rate - X.win_length / 2) / X.hop_length).astype(np.int64)


def extract_patches(feats: Features, times, n_frames: int, dtype=None):
    """Patches of ``n_frames`` frames centered on ``times`` and their context slices.

    Frames ``[j - n_frames // 2, j - n_frames // 2 + n_frames)`` are taken around the
    center frame ``j``; frames outside the recording take the transform of zero
    energy.
    """
    X = feats.matrix
    vals = X.values
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    centers = center_frame(times, X)
    starts = centers - n_frames // 2
    out = np.empty((len(times), n_frames, X.n_bands), dtype=dtype or vals.dtype)
    n = X.n_frames
    for i, s in enumerate(starts):
        e = s + n_frames
        if s >= 0 and e <= n:
            out[i] = vals[s:e]
            continue
        out[i] = feats.config.fill_value
        lo, hi = max(s, 0), min(e, n)
        if hi > lo:
            out[i, lo - s : hi - s] = vals[lo:hi]
    ctx = feats.context.values[context_index(feats.context, times)]
    return out, ctx if dtype is None else ctx.astype(dtype, copy=False)


def kind_tag(cfg: FrontendConfig) -> TFKind:
    return TFKind.LOGMEL if cfg.kind == "logmel" else TFKind.PCEN
