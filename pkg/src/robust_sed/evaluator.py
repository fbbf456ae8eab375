"""Event-level scoring with tolerance-based maximum bipartite matching."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .events import EventDetectionFunction, EventList

DEFAULT_TOLERANCE = 0.5
DEFAULT_THRESHOLDS = np.arange(1, 101) / 101.0


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    auprc: float
    n_detected: np.ndarray | None = None

    def points(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))

    def best_f(self):
        """(threshold, precision, recall, f) at the maximal F-score."""
        p, r = self.precision, self.recall
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
        if len(f) == 0:
            return np.nan, 0.0, 0.0, 0.0
        i = int(np.argmax(f))
        return float(self.thresholds[i]), float(p[i]), float(r[i]), float(f[i])

    def to_csv(self, path=None) -> str:
        lines = ["threshold,precision,recall"]
        lines += [f"{t:.6f},{p:.6f},{r:.6f}" for t, p, r in self.points()]
        lines.append(f"# auprc={self.auprc:.6f}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


def _times(events):
    if isinstance(events, EventList):
        return events.times
    return np.asarray(events, dtype=np.float64).reshape(-1)


def _adjacency(det, ref, tolerance):
    # both sides sorted, so each detection sees a contiguous run of references
    lo = np.searchsorted(ref, det - tolerance, side="left")
    hi = np.searchsorted(ref, det + tolerance, side="right")
    adj = []
    for d, a, b in zip(det, lo, hi):
        adj.append([j for j in range(a, b) if abs(d - ref[j]) <= tolerance])
    return adj


def hopcroft_karp(adj, n_right):
    """Maximum-cardinality matching of a bipartite graph.

    ``adj[u]`` lists the right vertices adjacent to left vertex ``u``.
    Returns ``match_left`` with -1 for unmatched vertices.
    """
    n_left = len(adj)
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    inf = n_left + n_right + 1
    dist = [0] * n_left

    def bfs():
        q = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0
                q.append(u)
            else:
                dist[u] = inf
        found = False
        while q:
            u = q.popleft()
            for v in adj[u]:
                w = match_r[v]
                if w == -1:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return found

    def dfs(root):
        # iterative augmenting-path search along the BFS layering
        stack = [(root, iter(adj[root]))]
        path = []
        while stack:
            u, it = stack[-1]
            advanced = False
            for v in it:
                w = match_r[v]
                if w == -1:
                    path.append((u, v))
                    for pu, pv in path:
                        match_l[pu] = pv
                        match_r[pv] = pu
                    return True
                if dist[w] == dist[u] + 1:
                    path.append((u, v))
                    stack.append((w, iter(adj[w])))
                    advanced = True
                    break
            if not advanced:
                dist[u] = inf
                stack.pop()
                if path:
                    path.pop()
        return False

    while bfs():
        for u in range(n_left):
            if match_l[u] == -1:
                dfs(u)
    return match_l


def match_events(detected, reference, tolerance: float = DEFAULT_TOLERANCE) -> MatchResult:
    """Maximum matching between detections and references within ``tolerance`` seconds."""
    det = _times(detected)
    ref = _times(reference)
    if len(det) == 0 or len(ref) == 0:
        return MatchResult([], 0, len(det), len(ref))
    order_d = np.argsort(det, kind="stable")
    order_r = np.argsort(ref, kind="stable")
    adj = _adjacency(det[order_d], ref[order_r], tolerance)
    match_l = hopcroft_karp(adj, len(ref))
    pairs = sorted((int(order_d[u]), int(order_r[v])) for u, v in enumerate(match_l) if v >= 0)
    tp = len(pairs)
    return MatchResult(pairs, tp, len(det) - tp, len(ref) - tp)


def prf(m: MatchResult):
    """(precision, recall, F-score); empty denominators give 0."""
    p = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    r = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def auprc_trapezoid(thresholds, precision, recall, n_detected=None) -> float:
    """Trapezoidal area under precision over recall.

    Points with no detections carry no precision and are dropped. Points are
    ordered by recall (higher threshold first on ties) and the curve is anchored
    at zero recall with the precision of the highest-threshold point.
    """
    t = np.asarray(thresholds, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    keep = np.ones(len(t), bool) if n_detected is None else np.asarray(n_detected) > 0
    t, p, r = t[keep], p[keep], r[keep]
    if len(t) == 0:
        return 0.0
    order = np.lexsort((-t, r))
    p, r = p[order], r[order]
    anchor = p[np.argmax(t[order])]
    rr = np.concatenate([[0.0], r])
    pp = np.concatenate([[anchor], p])
    return float(np.clip(np.sum(np.diff(rr) * (pp[1:] + pp[:-1]) / 2), 0.0, 1.0))


def _curve_from_detections(detect_at, reference, thresholds, tolerance):
    ref = _times(reference)
    if len(ref) == 0:
        raise ValueError("undefined recall: empty reference")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    P, R, N = [], [], []
    for tau in thresholds:
        det = detect_at(tau)
        m = match_events(det, ref, tolerance)
        p, r, _ = prf(m)
        P.append(p)
        R.append(r)
        N.append(len(_times(det)))
    P, R, N = np.array(P), np.array(R), np.array(N)
    return PRCurve(thresholds, P, R, auprc_trapezoid(thresholds, P, R, N), N)


def pr_curve(edf: EventDetectionFunction, reference, min_lag: float = 0.0,
             thresholds=DEFAULT_THRESHOLDS, tolerance: float = DEFAULT_TOLERANCE) -> PRCurve:
    """Sweep the peak-picking threshold over an EDF and score each setting."""
    from .detector import peak_pick

    for tau in np.asarray(thresholds):
        if not 0 < tau < 1:
            raise ValueError(f"threshold {tau} outside (0, 1)")
    return _curve_from_detections(lambda tau: peak_pick(edf, tau, min_lag), reference,
                                  thresholds, tolerance)


def pr_curve_from_events(detected: EventList, reference, thresholds=DEFAULT_THRESHOLDS,
                         tolerance: float = DEFAULT_TOLERANCE) -> PRCurve:
    """PR sweep over a fixed detection list, keeping events with confidence above threshold."""
    det_t, conf = detected.times, detected.confidences
    return _curve_from_detections(lambda tau: det_t[conf > tau], reference, thresholds,
                                  tolerance)


@dataclass
class TimelineCell:
    segment: int
    start: float
    band: str
    n_reference: int
    n_matched: int

    @property
    def recall(self) -> float:
        return self.n_matched / self.n_reference


def recall_timeline(detections, reference: EventList, segment: float = 1800.0,
                    band_split: float = 5000.0, tolerance: float = DEFAULT_TOLERANCE):
    """Recall per (time segment, frequency band); cells without references are omitted.

    A reference event belongs to the ``low`` band below ``band_split`` Hz and to
    ``high`` otherwise; events without a frequency fall into ``all``. Detections
    are matched against each cell's references using the detections that fall in
    the same segment (extended by the tolerance).
    """
    det = _times(detections)
    ref_t = reference.times
    freqs = reference.freqs if reference.freqs is not None else np.full(len(ref_t), np.nan)
    bands = np.where(np.isnan(freqs), "all", np.where(freqs < band_split, "low", "high"))
    seg = np.floor(ref_t / segment).astype(int)
    cells = []
    for s in np.unique(seg):
        lo, hi = s * segment, (s + 1) * segment
        det_in = det[(det >= lo - tolerance) & (det < hi + tolerance)]
        for band in ("low", "high", "all"):
            sel = (seg == s) & (bands == band)
            if not np.any(sel):
                continue
            m = match_events(det_in, ref_t[sel], tolerance)
            cells.append(TimelineCell(int(s), float(lo), band, int(sel.sum()), m.tp))
    return cells


def timeline_csv(cells, path=None) -> str:
    lines = ["segment,start_sec,band,n_reference,n_matched,recall"]
    lines += [f"{c.segment},{c.start:.1f},{c.band},{c.n_reference},{c.n_matched},{c.recall:.6f}"
              for c in cells]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as f:
            f.write(text)
    return text


@dataclass(frozen=True)
class FoldSpec:
    index: int
    train: tuple
    val: tuple
    test: tuple


def make_folds(sensors) -> list[FoldSpec]:
    """Leave-one-sensor-out folds: fold i tests sensor i and validates on the next two.

    With only three sensors a single validation sensor is used, so that every
    fold keeps one sensor for training.
    """
    sensors = list(sensors)
    n = len(sensors)
    if n < 3:
        raise ValueError(f"need at least 3 sensors for train/val/test folds, got {n}")
    if len(set(sensors)) != n:
        raise ValueError("sensor ids must be unique")
    folds = []
    for i in range(n):
        val_idx = {(i + k) % n for k in range(1, min(2, n - 2) + 1)}
        test = (sensors[i],)
        val = tuple(sensors[j] for j in sorted(val_idx, key=lambda j: (j - i) % n))
        train = tuple(sensors[j] for j in range(n) if j != i and j not in val_idx)
        folds.append(FoldSpec(i, train, val, test))
    return folds
