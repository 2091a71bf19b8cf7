"""Adaptive pseudo-label selection between a static and a dynamic teacher.

Each teacher's probability map is binarized, its 8-connected components are
counted, and the foreground pixels are scored by how line-like they are: the
ratio of the two eigenvalues of their 2x2 coordinate covariance. A dynamic
teacher producing more components than the static teacher ever does is
treated as not yet able to segment stripes, and the static map is used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import torch
from scipy import ndimage

EPS = 1e-8
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

__all__ = [
    "EPS",
    "Source",
    "BinaryPredictionStats",
    "PseudoLabelDecision",
    "binarize",
    "count_components",
    "compute_tc",
    "TcTracker",
    "covariance_eigenvalues",
    "linearity",
    "points_linearity",
    "prediction_stats",
    "select_pseudo_label",
]


class Source(str, Enum):
    ST = "ST"
    DT = "DT"
    ST_FORCED = "ST_forced"


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Strict threshold: ``pred > threshold``."""
    return _as_numpy(pred) > threshold


def count_components(mask) -> int:
    """Number of 8-connected foreground components."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0
    _, n = ndimage.label(m, structure=EIGHT_CONNECTED)
    return int(n)


def compute_tc(st_masks) -> int:
    """Largest static-teacher component count over a pool of binary maps."""
    counts = [count_components(m) for m in st_masks]
    if not counts:
        raise ValueError("compute_tc needs at least one map")
    return max(counts)


class TcTracker:
    """Running maximum of static-teacher component counts, reset per epoch."""

    def __init__(self):
        self.value = 0
        self.epoch = None

    def update(self, counts, epoch: int) -> int:
        if epoch != self.epoch:
            self.epoch = epoch
            self.value = 0
        for n in counts:
            self.value = max(self.value, int(n))
        return self.value

    def state_dict(self):
        return {"value": self.value, "epoch": self.epoch}

    def load_state_dict(self, state):
        self.value, self.epoch = state["value"], state["epoch"]


def covariance_eigenvalues(points) -> tuple[float, float]:
    """Eigenvalues (descending) of the population covariance of 2-D points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        return 0.0, 0.0
    centred = p - p.mean(axis=0)
    cov = centred.T @ centred / len(p)
    lam = np.linalg.eigvalsh(cov)[::-1]
    # PSD by construction; clip round-off below zero
    return float(max(lam[0], 0.0)), float(max(lam[1], 0.0))


def points_linearity(points, eps: float = EPS) -> tuple[float, float, float]:
    """``(lambda1, lambda2, L)`` with ``L = lambda1 / max(lambda2, eps)``.

    A point set whose covariance vanishes (empty, or a single point) scores 0.
    """
    l1, l2 = covariance_eigenvalues(points)
    if l1 <= 0.0:
        return l1, l2, 0.0
    return l1, l2, l1 / max(l2, eps)


def linearity(mask, eps: float = EPS) -> tuple[float, float, float]:
    """Linearity of the foreground pixels of a binary map."""
    return points_linearity(np.argwhere(np.asarray(mask, dtype=bool)), eps)


@dataclass
class BinaryPredictionStats:
    component_count: int
    n_points: int
    centroid: tuple[float, float] | None
    lambda1: float
    lambda2: float
    linearity: float


def prediction_stats(mask, eps: float = EPS) -> BinaryPredictionStats:
    m = np.asarray(mask, dtype=bool)
    pts = np.argwhere(m)
    l1, l2, lin = linearity(m, eps)
    centroid = tuple(float(v) for v in pts.mean(axis=0)) if len(pts) else None
    return BinaryPredictionStats(count_components(m), len(pts), centroid, l1, l2, lin)


@dataclass
class PseudoLabelDecision:
    source: Source
    st_stats: BinaryPredictionStats
    dt_stats: BinaryPredictionStats
    tc: int
    label: object  # the selected teacher's probability map

    def log_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(
            N_ST=self.st_stats.component_count,
            N_DT=self.dt_stats.component_count,
            T_c=self.tc,
            L_ST=self.st_stats.linearity,
            L_DT=self.dt_stats.linearity,
            source=self.source.value,
        )
        return rec

    def as_dict(self) -> dict:
        d = self.log_record()
        d["st_stats"] = asdict(self.st_stats)
        d["dt_stats"] = asdict(self.dt_stats)
        return d


def dt_rejected(n_st: int, n_dt: int, tc: int, gate: str = "prose") -> bool:
    """Whether the dynamic teacher is judged unable to segment stripes.

    ``gate="prose"`` uses ``N_DT > T_c``; ``gate="algorithm"`` uses
    ``|N_ST - N_DT| > T_c``.
    """
    if gate == "prose":
        return n_dt > tc
    if gate == "algorithm":
        return abs(n_st - n_dt) > tc
    raise ValueError(f"unknown gate {gate!r}")


def select_pseudo_label(
    y_st,
    y_dt,
    tc: int,
    threshold: float = 0.5,
    eps: float = EPS,
    gate: str = "prose",
    st_stats: BinaryPredictionStats | None = None,
) -> PseudoLabelDecision:
    """Pick the static or dynamic teacher's map as pseudo-label for one image.

    Ties in linearity go to the static teacher.
    """
    if tuple(y_st.shape) != tuple(y_dt.shape):
        raise ValueError(f"shape mismatch: {tuple(y_st.shape)} vs {tuple(y_dt.shape)}")
    if st_stats is None:
        st_stats = prediction_stats(binarize(y_st, threshold), eps)
    dt_stats = prediction_stats(binarize(y_dt, threshold), eps)
    if dt_rejected(st_stats.component_count, dt_stats.component_count, tc, gate):
        return PseudoLabelDecision(Source.ST_FORCED, st_stats, dt_stats, tc, y_st)
    if st_stats.linearity - dt_stats.linearity >= 0:
        return PseudoLabelDecision(Source.ST, st_stats, dt_stats, tc, y_st)
    return PseudoLabelDecision(Source.DT, st_stats, dt_stats, tc, y_dt)
