"""Identification, realism and verification metrics."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

PSD_TOL = 1e-8


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean dim {d}")


def _check_psd(sigma: np.ndarray) -> np.ndarray:
    sym = 0.5 * (sigma + sigma.T)
    if not np.allclose(sym, sigma, rtol=0, atol=PSD_TOL * max(1.0, np.abs(sigma).max())):
        raise ValueError("covariance is not symmetric")
    w, v = np.linalg.eigh(sym)
    if w.min() < -PSD_TOL * max(1.0, abs(w.max())):
        raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return w, v


def _trace_sqrt_product(sx: np.ndarray, sg: np.ndarray) -> float:
    """Tr((sx sg)^{1/2}) via the symmetric form sx^{1/2} sg sx^{1/2}."""
    w, v = _check_psd(sx)
    _check_psd(sg)
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = root @ sg @ root
    m = 0.5 * (m + m.T)
    ev = np.linalg.eigvalsh(m)
    tol = PSD_TOL * max(1.0, abs(ev.max()))
    if ev.min() < -tol:
        raise ValueError(f"covariance product has a negative eigenvalue ({ev.min():.3g})")
    return float(np.sqrt(np.clip(ev, 0, None)).sum())


def fid(x: GaussianStats, g: GaussianStats) -> float:
    """Frechet distance between two Gaussians."""
    if x.mu.shape != g.mu.shape:
        raise ValueError("feature dimensions differ")
    if np.array_equal(x.mu, g.mu) and np.array_equal(x.sigma, g.sigma):
        _check_psd(x.sigma)
        return 0.0
    diff = x.mu - g.mu
    value = float(diff @ diff) + float(np.trace(x.sigma) + np.trace(g.sigma)) \
        - 2.0 * _trace_sqrt_product(x.sigma, g.sigma)
    return max(value, 0.0)


def feature_stats(items, feature_fn: Optional[Callable] = None) -> GaussianStats:
    """Sample mean and unbiased covariance of ``feature_fn(items)``.

    ``feature_fn`` maps the whole collection to an (M, D) array; without one
    ``items`` must already be features.
    """
    feats = np.asarray(feature_fn(items) if feature_fn is not None else items, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] < 2:
        raise ValueError("feature statistics need at least two samples")
    return GaussianStats(feats.mean(0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], -1))


def nearest_neighbors(vectors: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of each row's nearest other row (squared Euclidean, lowest index on ties)."""
    x = np.asarray(vectors, dtype=np.float64)
    m = len(x)
    out = np.empty(m, dtype=np.int64)
    for start in range(0, m, chunk):
        block = x[start:start + chunk]
        d = ((block[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        rows = np.arange(len(block))
        d[rows, start + rows] = np.inf
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out


def recall_at_1(vectors, labels) -> float:
    """Percentage of samples whose nearest neighbour shares their label."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if vectors.ndim != 2 or len(vectors) != len(labels):
        raise ValueError("need an (M, E) embedding matrix and M labels")
    if len(vectors) < 2:
        raise ValueError("Recall@1 needs at least two samples")
    nn = nearest_neighbors(vectors)
    hits = int(np.count_nonzero(labels[nn] == labels))
    return 100.0 * hits / len(labels)


def detection_rate(images: Iterable, detector) -> float:
    """Percentage of images where ``detector`` returns at least one face."""
    total = hits = 0
    for img in images:
        total += 1
        found = detector(img) if callable(detector) else detector.detect(img)
        hits += bool(found)
    if total == 0:
        raise ValueError("no images to evaluate")
    return 100.0 * hits / total


@dataclass
class PairProtocol:
    """Verification pairs grouped into folds; ``same[i]`` marks positives."""

    same: np.ndarray
    folds: list[np.ndarray]

    @classmethod
    def lfw_style(cls, n_folds: int = 10, per_fold: int = 600) -> "PairProtocol":
        half = per_fold // 2
        same = np.tile(np.r_[np.ones(half, bool), np.zeros(per_fold - half, bool)], n_folds)
        folds = [np.arange(k * per_fold, (k + 1) * per_fold) for k in range(n_folds)]
        return cls(same, folds)


def pair_scores(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Similarity of each pair: negative Euclidean distance."""
    return -np.linalg.norm(np.asarray(first, float) - np.asarray(second, float), axis=1)


def tar_at_threshold_far(scores: np.ndarray, same: np.ndarray, far: float = 1e-3) -> tuple[float, float]:
    """(TAR, threshold) for one fold.

    A pair is accepted when its score is strictly above the threshold.  The
    threshold is the lowest one keeping accepted negatives <= ``far`` * #neg.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    neg = np.sort(scores[~same])[::-1]
    if len(neg) == 0:
        raise ValueError("TAR@FAR needs negative pairs")
    allowed = int(np.floor(far * len(neg) + 1e-12))
    threshold = neg[allowed] if allowed < len(neg) else -np.inf
    pos = scores[same]
    tar = float(np.mean(pos > threshold)) if len(pos) else 0.0
    return tar, float(threshold)


def tar_at_far(scores, protocol: PairProtocol, far: float = 1e-3) -> dict:
    per_fold = [tar_at_threshold_far(np.asarray(scores)[f], protocol.same[f], far)[0] for f in protocol.folds]
    return {"per_fold": per_fold, "mean": float(np.mean(per_fold)), "std": float(np.std(per_fold))}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_report(path, metrics: dict, config: dict, ci: Optional[dict] = None) -> Path:
    """JSON report: one ``{metric, value, ci, config_hash}`` entry per metric."""
    h = config_hash(config)
    ci = ci or {}
    entries = [{"metric": k, "value": v, "ci": ci.get(k), "config_hash": h} for k, v in metrics.items()]
    path = Path(path)
    path.write_text(json.dumps(entries, indent=2))
    return path


def write_table_csv(path, rows: Sequence[dict]) -> Path:
    """Per-method rows with columns method, detection, recall_at_1, fid."""
    path = Path(path)
    cols = ["method", "detection", "recall_at_1", "fid"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in cols})
    return path
