"""Layer-role analysis: angular change of the residual stream and knee detection.

The profile measures how much the last-token residual vector turns between
the input to layer ``l`` and the input to layer ``l + n``. A knee detector on
that curve (run forward for the encoder, backward for the decoder) picks the
partition of the stack into encoder / thinking block / decoder.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .etd import EtdConfig
from .model import ModelParams, capture_residuals


class DegenerateInputError(ValueError):
    pass


class SelectionError(ValueError):
    """No usable partition; ``diagnostics`` carries the knee results for auditing."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def angular_distance(u, v) -> float:
    """(1/pi) * arccos(cos(u, v)), in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("angular distance is undefined for a zero vector")
    cos = float(np.dot(u, v) / (nu * nv))
    return math.acos(min(1.0, max(-1.0, cos))) / math.pi


def _rowwise_angular(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("zero residual vector in profile")
    cos = np.clip((a * b).sum(-1) / (na * nb), -1.0, 1.0)
    return np.arccos(cos) / np.pi


@dataclass
class AngularProfile:
    gap: int
    distances: list[float]
    sample_count: int
    corpus_id: str = ""

    @property
    def n_layers(self) -> int:
        return len(self.distances) + self.gap - 1

    def to_dict(self) -> dict:
        return {
            "gap": self.gap,
            "distances": list(self.distances),
            "sample_count": self.sample_count,
            "corpus_id": self.corpus_id,
            "n_layers": self.n_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AngularProfile":
        return cls(int(d["gap"]), [float(x) for x in d["distances"]], int(d.get("sample_count", 0)), d.get("corpus_id", ""))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "distance"])
            for layer, dist in enumerate(self.distances):
                w.writerow([layer, repr(dist)])


def last_token_states(tokens: np.ndarray, params: ModelParams, lengths: np.ndarray | None = None) -> np.ndarray:
    """Residual vectors of each sequence's final token at layer inputs 0..L: (L+1, batch, d)."""
    states = capture_residuals(tokens, params)
    rows = np.arange(tokens.shape[0])
    last = np.full(tokens.shape[0], tokens.shape[1] - 1) if lengths is None else np.asarray(lengths) - 1
    return np.stack([s[rows, last] for s in states])


def profile_model(
    params: ModelParams,
    corpus: np.ndarray,
    gap: int = 1,
    corpus_id: str = "",
    lengths: np.ndarray | None = None,
    batch_size: int = 64,
) -> AngularProfile:
    """Mean angular distance d(x^l, x^{l+gap}) of last-token states, l = 0..L-gap."""
    corpus = np.asarray(corpus)
    if corpus.ndim != 2 or corpus.shape[0] == 0 or corpus.shape[1] == 0:
        raise ValueError("profiling corpus must be a non-empty (n_sequences, seq_len) array")
    n_layers = params.config.n_layers
    if gap < 1 or gap > n_layers:
        raise ValueError(f"gap must be in [1, {n_layers}]")
    total = np.zeros(n_layers - gap + 1)
    for start in range(0, corpus.shape[0], batch_size):
        chunk = corpus[start : start + batch_size]
        ln = None if lengths is None else np.asarray(lengths)[start : start + batch_size]
        h = last_token_states(chunk, params, ln)
        d = _rowwise_angular(h[:-gap], h[gap:])  # (L-gap+1, batch)
        # fixed summation order: sequence by sequence
        for col in range(d.shape[1]):
            total += d[:, col]
    mean = total / corpus.shape[0]
    return AngularProfile(gap, mean.tolist(), int(corpus.shape[0]), corpus_id)


# ---------------------------------------------------------------------------
# knee detection


@dataclass
class KneeResult:
    knee: int | None
    sensitivity: float
    smoothed: list[float]
    x_normalized: list[float]
    y_normalized: list[float]
    difference: list[float]
    literal_difference: list[float]
    candidates: list[int]
    thresholds: list[float]
    coefficients: list[float] | None = None
    literal_knee: int | None = None
    chord_knee: int | None = None
    divergence: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _normalize(a: np.ndarray) -> np.ndarray | None:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return None
    return (a - lo) / (hi - lo)


def _local_maxima(d: np.ndarray, rtol: float = 1e-9) -> list[int]:
    """Interior points strictly above both neighbours.

    A run of equal values (within ``rtol`` of the curve's range) counts as one
    maximum, located at its first index; symmetric smoothed curves of even
    length produce such two-point tops.
    """
    tol = rtol * max(float(np.ptp(d)), 1e-300)
    out = []
    i, n = 1, len(d)
    while i < n - 1:
        j = i
        while j + 1 < n and abs(d[j + 1] - d[i]) <= tol:
            j += 1
        if j < n - 1 and d[i] - d[i - 1] > tol and d[j] - d[j + 1] > tol:
            out.append(i)
        i = j + 1
    return out


def _threshold_scan(d: np.ndarray, candidates: list[int], thresholds: list[float], online: bool) -> int | None:
    """Declare candidate i a knee when some later D_j drops below T_i before the next candidate."""
    found = None
    for n, (i, t) in enumerate(zip(candidates, thresholds)):
        stop = candidates[n + 1] if n + 1 < len(candidates) else len(d)
        if any(d[j] < t for j in range(i + 1, stop)):
            found = i
            if not online:
                return found
    return found


def kneedle(
    xs: Sequence[float],
    ys: Sequence[float],
    S: float = 1.0,
    smooth: bool = True,
    degree: int = 2,
    online: bool = True,
) -> KneeResult:
    """Knee of a convex decreasing curve.

    With ``smooth`` the curve is first replaced by its least-squares
    polynomial of ``degree``. The knee is reported as an index into ``xs``.
    ``difference`` is measured as the normalized curve's depth below the
    falling diagonal, so knees are its local maxima; ``literal_difference``
    is the opposite sign convention (``y_hat - (1 - x_hat)``) run through the
    same candidate/threshold steps, and any disagreement between the two, or
    with the farthest-from-chord point, is listed in ``divergence``.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and the same length")
    if len(x) < 4:
        raise ValueError("kneedle needs at least 4 points")
    if not np.all(np.diff(x) > 0):
        raise ValueError("xs must be strictly increasing")
    if S <= 0:
        raise ValueError("sensitivity must be positive")

    coeffs = None
    if smooth:
        coeffs = np.polyfit(x, y, degree)
        ys_s = np.polyval(coeffs, x)
    else:
        ys_s = y.copy()
    x_n = _normalize(x)
    y_n = _normalize(ys_s)
    if y_n is None:
        empty = [0.0] * len(x)
        return KneeResult(None, S, ys_s.tolist(), x_n.tolist(), empty, empty, empty, [], [],
                          None if coeffs is None else coeffs[::-1].tolist(),
                          divergence=["constant curve: normalization is degenerate"])

    diff = (1.0 - y_n) - x_n
    literal = y_n - (1.0 - x_n)
    step = float(np.abs(np.diff(x_n)).mean())

    cands = _local_maxima(diff)
    thresholds = [float(diff[i] - S * step) for i in cands]
    knee = _threshold_scan(diff, cands, thresholds, online)

    lit_cands = _local_maxima(literal)
    lit_knee = _threshold_scan(literal, lit_cands, [float(literal[i] - S * step) for i in lit_cands], online)

    # farthest point from the chord joining the first and last normalized points
    p0 = np.array([x_n[0], y_n[0]])
    p1 = np.array([x_n[-1], y_n[-1]])
    chord = p1 - p0
    rel = np.stack([x_n, y_n], axis=1) - p0
    dist = np.abs(chord[0] * rel[:, 1] - chord[1] * rel[:, 0]) / np.linalg.norm(chord)
    chord_knee = int(np.argmax(dist[1:-1]) + 1)

    notes = []
    if lit_knee != knee:
        notes.append(f"literal difference y_hat-(1-x_hat) gives knee {lit_knee}, oriented curve gives {knee}")
    if chord_knee != knee:
        notes.append(f"farthest-from-chord point is {chord_knee}, knee is {knee}")

    return KneeResult(
        knee=knee,
        sensitivity=S,
        smoothed=ys_s.tolist(),
        x_normalized=x_n.tolist(),
        y_normalized=y_n.tolist(),
        difference=diff.tolist(),
        literal_difference=literal.tolist(),
        candidates=cands,
        thresholds=thresholds,
        coefficients=None if coeffs is None else coeffs[::-1].tolist(),
        literal_knee=lit_knee,
        chord_knee=chord_knee,
        divergence=notes,
    )


# ---------------------------------------------------------------------------
# configuration selection


@dataclass
class Selection:
    n_encoder: int
    n_think: int
    n_decoder: int
    forward: KneeResult
    reverse: KneeResult
    reverse_knee_layer: int

    @property
    def label(self) -> str:
        return f"{self.n_encoder}-{self.n_think}*k-{self.n_decoder}"

    def config(self, iterations: int) -> EtdConfig:
        return EtdConfig(self.n_encoder, self.n_think, iterations, self.n_decoder)

    def report(self, profile: AngularProfile) -> dict:
        return {
            "gap": profile.gap,
            "distances": list(profile.distances),
            "forward_knee": self.n_encoder,
            "reverse_knee": self.reverse_knee_layer,
            "config": self.label,
            "sample_count": profile.sample_count,
            "corpus_id": profile.corpus_id,
            "sensitivity": self.forward.sensitivity,
            "forward": self.forward.to_dict(),
            "reverse": self.reverse.to_dict(),
        }


def select_config(profile: AngularProfile, S: float = 1.0, smooth: bool = True) -> Selection:
    """Encoder boundary from the forward knee, decoder boundary from the backward knee.

    The backward pass runs on ``d(l, l+1)`` for ``l = L-1 down to N_E``; a
    knee at position ``i`` of that reversed sequence is layer ``L-1-i`` and
    gives ``N_D = L - (L-1-i)``.
    """
    if profile.gap != 1:
        raise ValueError("configuration selection needs a gap-1 profile")
    d = np.asarray(profile.distances, dtype=np.float64)
    n_layers = len(d)
    fwd = kneedle(np.arange(n_layers), d, S=S, smooth=smooth)
    diag: dict = {"forward": fwd.to_dict()}
    if fwd.knee is None:
        raise SelectionError("no knee in the forward angular-distance curve", diag)
    n_enc = int(fwd.knee)
    tail = d[n_enc:][::-1]
    if len(tail) < 4:
        raise SelectionError(f"only {len(tail)} layers after the encoder boundary; need 4 for the backward pass", diag)
    rev = kneedle(np.arange(len(tail)), tail, S=S, smooth=smooth)
    diag["reverse"] = rev.to_dict()
    if rev.knee is None:
        raise SelectionError("no knee in the backward angular-distance curve", diag)
    knee_layer = n_layers - 1 - int(rev.knee)
    n_dec = n_layers - knee_layer
    n_think = n_layers - n_enc - n_dec
    if n_think < 1:
        raise SelectionError(f"boundaries {n_enc} / {n_dec} leave no thinking layers", diag)
    return Selection(n_enc, n_think, n_dec, fwd, rev, knee_layer)


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
