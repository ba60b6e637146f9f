"""Slot scoring and per-layer top-T row selection for sparse value updates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pkm import AccessCounts

STATS_FORMAT_VERSION = 1


@dataclass
class BackgroundStats:
    """Document frequency ``df`` and token-level read counts ``b`` over N batches."""

    M: int
    N: int = 0
    df: np.ndarray = field(default=None)
    b: np.ndarray = field(default=None)
    layer_id: int | None = None

    def __post_init__(self):
        self.df = np.zeros(self.M, np.int64) if self.df is None else np.asarray(self.df, np.int64)
        self.b = np.zeros(self.M, np.int64) if self.b is None else np.asarray(self.b, np.int64)
        if self.df.shape != (self.M,) or self.b.shape != (self.M,):
            raise ValueError("df and b must have length M")

    def update(self, counts: AccessCounts) -> None:
        self.N += 1
        self.df += (counts.counts > 0).astype(np.int64)
        self.b += counts.counts

    def merge(self, other: "BackgroundStats") -> "BackgroundStats":
        if other.M != self.M:
            raise ValueError("cannot merge stats with different slot counts")
        return BackgroundStats(self.M, self.N + other.N, self.df + other.df, self.b + other.b, self.layer_id)

    def to_dict(self) -> dict:
        return {"layer_id": self.layer_id, "N": int(self.N), "df": self.df.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackgroundStats":
        df = np.asarray(d["df"], np.int64)
        return cls(M=df.shape[0], N=int(d["N"]), df=df, b=np.asarray(d["b"], np.int64), layer_id=d.get("layer_id"))


@dataclass(frozen=True)
class ScoringConfig:
    rule: str = "tfidf"
    T: int = 16
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.rule not in ("tfidf", "kl"):
            raise ValueError(f"unknown scoring rule {self.rule!r}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class SlotMask:
    selected: np.ndarray
    layer_id: int | None = None

    @property
    def popcount(self) -> int:
        return int(self.selected.sum())


def collect_background(batch_counts) -> BackgroundStats:
    """Fold an iterable of per-batch AccessCounts into background statistics.

    Model-level collection (running the forward passes) lives in
    ``smf.trainer.collect_background_stats``.
    """
    stats = None
    for counts in batch_counts:
        if stats is None:
            stats = BackgroundStats(M=counts.counts.shape[0])
        stats.update(counts)
    if stats is None:
        raise ValueError("background collection needs at least one batch")
    return stats


def score_tfidf(counts: AccessCounts, stats: BackgroundStats) -> np.ndarray:
    if counts.total <= 0:
        raise ValueError("batch has no accesses")
    c = counts.counts
    tf = c / counts.total
    idf = np.log((stats.N + 1.0) / (stats.df + 1.0))
    return np.where(c > 0, tf * idf, -np.inf)


def score_kl(counts: AccessCounts, stats: BackgroundStats, epsilon: float = 1e-10) -> np.ndarray:
    if counts.total <= 0:
        raise ValueError("batch has no accesses")
    c = counts.counts
    p_batch = c / counts.total
    smoothed = stats.b + 1.0
    p_bg = smoothed / smoothed.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        s = p_batch * np.log((p_batch + epsilon) / (p_bg + epsilon))
    return np.where(c > 0, s, -np.inf)


def score(counts: AccessCounts, stats: BackgroundStats, cfg: ScoringConfig) -> np.ndarray:
    if cfg.rule == "tfidf":
        return score_tfidf(counts, stats)
    return score_kl(counts, stats, cfg.epsilon)


def select_top_T(scores: np.ndarray, T: int, layer_id: int | None = None) -> SlotMask:
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.flatnonzero(np.isfinite(scores))
    # stable sort on negated scores keeps the lower index first among ties
    order = finite[np.argsort(-scores[finite], kind="stable")]
    selected = np.zeros(scores.shape[0], dtype=bool)
    selected[order[:T]] = True
    return SlotMask(selected, layer_id)


def save_stats(path, stats: dict[int, BackgroundStats]) -> None:
    payload = {
        "version": STATS_FORMAT_VERSION,
        "layers": [dict(s.to_dict(), layer_id=int(lid)) for lid, s in sorted(stats.items())],
    }
    Path(path).write_text(json.dumps(payload))


def load_stats(path) -> dict[int, BackgroundStats]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != STATS_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported stats version {payload.get('version')}")
    return {int(d["layer_id"]): BackgroundStats.from_dict(d) for d in payload["layers"]}
