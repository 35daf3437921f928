"""Landmark trajectory smoothing and frame-sequence anonymization."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import make_lsq_spline

from .dataset import Detection, list_images, read_image, write_image
from .errors import ShapeError

log = logging.getLogger(__name__)

WINDOW = 9
DEGREE = 3


class TooFewFramesWarning(UserWarning):
    pass


@dataclass
class LandmarkTrack:
    """Per-frame landmark arrays of one tracked person: ``points`` is (T, P, 2)."""

    points: np.ndarray
    timestamps: np.ndarray
    window: int = WINDOW
    degree: int = DEGREE

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ShapeError(f"track points must be (T, P, 2), got {self.points.shape}")
        if len(self.timestamps) != len(self.points):
            raise ShapeError("one timestamp per frame is required")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")


def _window_fit(t: np.ndarray, y: np.ndarray, degree: int, at: float) -> np.ndarray:
    """Least-squares spline through (t, y) evaluated at ``at``.

    Knots sit only at the window ends, so the fit is a linear operator on y.
    """
    k = min(degree, len(t) - 1)
    if k == 0:
        return y.mean(axis=0)
    knots = np.r_[[t[0]] * (k + 1), [t[-1]] * (k + 1)]
    spline = make_lsq_spline(t, y, knots, k=k)
    return spline(at)


def smooth_series(t: np.ndarray, y: np.ndarray, window: int = WINDOW, degree: int = DEGREE,
                  query: Optional[np.ndarray] = None) -> np.ndarray:
    """Sliding-window spline smoothing of ``y`` (T, ...) sampled at times ``t``.

    Each output uses the samples within ``window // 2`` time units of the
    query time; the window shrinks at the ends of the sequence.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    query = t if query is None else np.asarray(query, dtype=np.float64)
    half = window // 2
    out = np.empty((len(query),) + y.shape[1:])
    for i, q in enumerate(query):
        sel = np.abs(t - q) <= half + 1e-9
        out[i] = _window_fit(t[sel], y[sel], degree, q)
    return out


def smooth_track(track: LandmarkTrack, window: Optional[int] = None, degree: Optional[int] = None) -> LandmarkTrack:
    window = track.window if window is None else window
    degree = track.degree if degree is None else degree
    if len(track.points) < degree + 1:
        warnings.warn(f"track has {len(track.points)} frames, need {degree + 1} to smooth; left as is",
                      TooFewFramesWarning, stacklevel=2)
        return replace(track, points=track.points.copy(), window=window, degree=degree)
    smoothed = smooth_series(track.timestamps, track.points, window, degree)
    return replace(track, points=smoothed, window=window, degree=degree)


def split_on_gaps(frames: Sequence[int], max_gap: int) -> list[list[int]]:
    """Split sorted frame numbers where more than ``max_gap`` frames are missing."""
    segments: list[list[int]] = []
    for f in frames:
        if segments and f - segments[-1][-1] - 1 <= max_gap:
            segments[-1].append(f)
        else:
            segments.append([f])
    return segments


def smooth_track_entries(entries: Sequence[dict], window: int = WINDOW, degree: int = DEGREE) -> dict[int, np.ndarray]:
    """Smoothed landmarks per frame for one track, filling short gaps.

    ``entries`` are ``{"frame": int, "landmarks": [[x, y], ...]}``.  Gaps of at
    most ``window // 2`` frames are filled from the surrounding spline; longer
    gaps split the track into independently smoothed pieces.
    """
    by_frame = {int(e["frame"]): np.asarray(e["landmarks"], dtype=np.float64) for e in entries}
    frames = sorted(by_frame)
    out: dict[int, np.ndarray] = {}
    for seg in split_on_gaps(frames, window // 2):
        pts = np.stack([by_frame[f] for f in seg])
        t = np.asarray(seg, dtype=np.float64)
        query = np.arange(seg[0], seg[-1] + 1)
        if len(seg) < degree + 1:
            if len(seg) > 1 or len(query) > 1:
                warnings.warn(f"track piece of {len(seg)} frames left unsmoothed", TooFewFramesWarning, stacklevel=2)
            for f in seg:
                out[f] = by_frame[f]
            continue
        smoothed = smooth_series(t, pts, window, degree, query=query.astype(np.float64))
        for f, p in zip(query, smoothed):
            out[int(f)] = p
    return out


def mean_displacement(points: np.ndarray) -> float:
    """Mean per-point frame-to-frame displacement of a (T, P, 2) track."""
    pts = np.asarray(points)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=-1).mean())


@dataclass
class VideoResult:
    frames: list[np.ndarray]
    identities: list[dict[str, int]]


def anonymize_video(generator, frames: Sequence[np.ndarray], tracks: dict, mapping, camera_id: str,
                    resolution: Optional[int] = None, feather: bool = False,
                    window: int = WINDOW, degree: int = DEGREE) -> VideoResult:
    """Anonymize every tracked face in a frame sequence.

    ``tracks`` maps track ids to lists of ``{"frame", "landmarks"}``; the track
    id is the person id, so each track keeps one target identity per camera.
    """
    from .anonymize import StaticDetector, anonymize_image

    if frames:
        shape = np.asarray(frames[0]).shape
        for i, f in enumerate(frames):
            if np.asarray(f).shape != shape:
                raise ShapeError(f"frame {i} has shape {np.asarray(f).shape}, expected {shape}")
    per_frame: dict[int, list[Detection]] = {}
    for track_id in sorted(tracks, key=str):
        smoothed = smooth_track_entries(tracks[track_id], window, degree)
        for f, pts in smoothed.items():
            if 0 <= f < len(frames):
                per_frame.setdefault(f, []).append(Detection(pts, None, str(track_id)))
    out_frames, idents = [], []
    for i, frame in enumerate(frames):
        res = anonymize_image(generator, frame, StaticDetector(per_frame.get(i, [])), mapping, camera_id,
                              resolution=resolution, feather=feather)
        out_frames.append(res.image)
        idents.append(dict(zip(res.person_ids, res.identities)))
    return VideoResult(out_frames, idents)


def read_frames(directory) -> tuple[list[Path], list[np.ndarray]]:
    paths = list_images(Path(directory))
    return paths, [read_image(p) for p in paths]


def read_tracks(path) -> dict:
    return json.loads(Path(path).read_text())


def write_frames(out_dir, names: Sequence[Path], frames: Sequence[np.ndarray]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(names, frames):
        write_image(out_dir / Path(name).name, frame)
