"""Event lists, detection functions and their CSV representations."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

EDF_HOP = 0.05
EDF_WINDOW = 0.15


@dataclass
class EventDetectionFunction:
    """Per-frame event probabilities on a regular time grid.

    Frame ``i`` is centered at ``start_time + i / frame_rate``.
    """

    values: np.ndarray
    frame_rate: float = 1.0 / EDF_HOP
    start_time: float = EDF_WINDOW / 2
    sensor: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.values)

    @property
    def hop(self) -> float:
        return 1.0 / self.frame_rate

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.values)) * self.hop

    def with_values(self, values) -> "EventDetectionFunction":
        return EventDetectionFunction(values, self.frame_rate, self.start_time, self.sensor)


@dataclass
class EventList:
    """Timestamped events in strictly increasing time order.

    ``freqs`` optionally carries a characteristic frequency (Hz) per event;
    NaN marks a missing value.
    """

    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    confidences: np.ndarray | None = None
    freqs: np.ndarray | None = None
    sensor: str | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.confidences is None:
            self.confidences = np.ones_like(self.times)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if self.freqs is not None:
            self.freqs = np.asarray(self.freqs, dtype=np.float64).reshape(-1)
        n = len(self.times)
        if len(self.confidences) != n or (self.freqs is not None and len(self.freqs) != n):
            raise ValueError("event fields differ in length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("event times must be strictly increasing")
        if n and (np.any(self.confidences <= 0) or np.any(self.confidences > 1)):
            raise ValueError("confidences must lie in (0, 1]")

    def __len__(self):
        return len(self.times)

    def subset(self, mask_or_idx) -> "EventList":
        idx = np.asarray(mask_or_idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        freqs = None if self.freqs is None else self.freqs[idx]
        return EventList(self.times[idx], self.confidences[idx], freqs, self.sensor)

    @classmethod
    def from_unsorted(cls, times, confidences=None, freqs=None, sensor=None) -> "EventList":
        times = np.asarray(times, dtype=np.float64)
        order = np.argsort(times, kind="stable")
        pick = lambda a: None if a is None else np.asarray(a, dtype=np.float64)[order]  # noqa: E731
        return cls(times[order], pick(confidences), pick(freqs), sensor)


def write_detections_csv(events: EventList, path=None) -> str:
    """Write ``time_sec,confidence`` rows; returns the text as well."""
    buf = io.StringIO()
    buf.write("time_sec,confidence\n")
    for t, c in zip(events.times, events.confidences):
        buf.write(f"{t:.3f},{c:.6f}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text


def read_detections_csv(path, sensor=None) -> EventList:
    """Detections ``time_sec[,confidence]``; a missing confidence column means 1."""
    with open(path, newline="") as f:
        reader = csv.DictReader(_skip_comments(f))
        if reader.fieldnames is None or "time_sec" not in reader.fieldnames:
            raise ValueError(f"{path}: missing time_sec column")
        rows = list(reader)
    times = [float(r["time_sec"]) for r in rows]
    confs = [float(r.get("confidence") or 1.0) for r in rows]
    return EventList.from_unsorted(times, confs, sensor=sensor)


def read_annotations_csv(path) -> dict[str | None, EventList]:
    """Reference annotations ``time_sec[,freq_hz][,sensor_id]`` grouped by sensor.

    Without a ``sensor_id`` column every event is filed under ``None``.
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(_skip_comments(f))
        if reader.fieldnames is None or "time_sec" not in reader.fieldnames:
            raise ValueError(f"{path}: missing time_sec column")
        rows = list(reader)
    groups: dict = {}
    for r in rows:
        sid = r.get("sensor_id") or None
        freq = r.get("freq_hz")
        freq = float(freq) if freq not in (None, "") else np.nan
        groups.setdefault(sid, []).append((float(r["time_sec"]), freq))
    out = {}
    for sid, items in groups.items():
        t, fq = np.array(items).T
        out[sid] = EventList.from_unsorted(t, freqs=fq, sensor=sid)
    return out


def write_annotations_csv(groups: dict, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("time_sec,freq_hz,sensor_id\n")
        for sid, ev in groups.items():
            freqs = ev.freqs if ev.freqs is not None else np.full(len(ev), np.nan)
            for t, fq in zip(ev.times, freqs):
                fq_s = "" if np.isnan(fq) else f"{fq:.1f}"
                f.write(f"{t:.6f},{fq_s},{'' if sid is None else sid}\n")


def _skip_comments(lines):
    for line in lines:
        if not line.startswith("#"):
            yield line


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
