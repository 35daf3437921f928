"""Face ingestion: landmark subsets, landmark rasters, masked backgrounds.

Coordinates are ``(x, y)`` in pixel units with pixel centres on integers.
Images are float arrays in [0, 1], shape (H, W, 3).
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Protocol, Sequence

import cv2
import numpy as np
from PIL import Image
from skimage.draw import polygon as fill_polygon

from .errors import EmptyDatasetError, InvalidLandmarksError, ShapeError

log = logging.getLogger(__name__)

N_LANDMARKS = 68
JAW = tuple(range(0, 17))
NOSE_BRIDGE = tuple(range(27, 31))
MOUTH_OUTER = tuple(range(48, 60))
MOUTH_INNER = tuple(range(60, 68))

# (indices, closed) per anatomical group that is drawn.
DRAWN_GROUPS = ((JAW, False), (NOSE_BRIDGE, False), (MOUTH_OUTER, True), (MOUTH_INNER, True))
SUBSET_INDICES = JAW + NOSE_BRIDGE + MOUTH_OUTER + MOUTH_INNER

STROKE_WIDTH = 1.0
MASK_FILL = 0.0
FOREHEAD_RAISE = 0.15
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class LandmarksOutOfFrameWarning(UserWarning):
    pass


@dataclass
class LandmarkSet:
    points: np.ndarray
    subset_mask: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape != (N_LANDMARKS, 2):
            raise InvalidLandmarksError(
                f"expected {N_LANDMARKS} landmark points, got shape {self.points.shape}"
            )
        if self.subset_mask is None:
            self.subset_mask = np.ones(N_LANDMARKS, dtype=bool)
        self.subset_mask = np.asarray(self.subset_mask, dtype=bool)

    def in_frame(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        x, y = self.points[:, 0], self.points[:, 1]
        return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


@dataclass
class MaskedBackground:
    pixels: np.ndarray
    face_mask: np.ndarray


@dataclass
class AnnotatedFace:
    image: np.ndarray
    landmarks: Optional[LandmarkSet]
    landmark_image: np.ndarray
    masked_bg: np.ndarray
    face_mask: np.ndarray
    identity: int = -1
    source: str = ""


@dataclass
class Detection:
    """One face (or body) found by a detector."""

    landmarks: Optional[np.ndarray] = None
    silhouette: Optional[np.ndarray] = None
    person_id: Optional[str] = None


class LandmarkDetector(Protocol):
    def detect(self, image: np.ndarray, path: Optional[Path] = None) -> list[Detection]: ...


def as_landmark_set(landmarks) -> LandmarkSet:
    if isinstance(landmarks, LandmarkSet):
        return landmarks
    return LandmarkSet(np.asarray(landmarks, dtype=np.float64))


def select_landmark_subset(landmarks) -> LandmarkSet:
    """Keep only the jaw line, nose bridge and mouth points."""
    lm = as_landmark_set(landmarks)
    mask = np.zeros(N_LANDMARKS, dtype=bool)
    mask[list(SUBSET_INDICES)] = True
    return LandmarkSet(lm.points.copy(), mask)


def rasterize_polylines(polylines: Sequence[tuple[np.ndarray, bool]], shape: tuple[int, int],
                        width: float = STROKE_WIDTH) -> np.ndarray:
    """Binary raster of pixels whose centre lies within ``width/2`` of a segment.

    ``polylines`` is a sequence of ``(points, closed)``; a single point draws a
    dot of the same radius.
    """
    h, w = shape
    out = np.zeros((h, w), dtype=np.uint8)
    r = width / 2.0
    for pts, closed in polylines:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            continue
        if len(pts) == 1:
            segments = [(pts[0], pts[0])]
        else:
            segments = list(zip(pts[:-1], pts[1:]))
            if closed and len(pts) > 2:
                segments.append((pts[-1], pts[0]))
        for p, q in segments:
            _stamp_segment(out, p, q, r)
    return out


def _stamp_segment(out: np.ndarray, p: np.ndarray, q: np.ndarray, r: float) -> None:
    h, w = out.shape
    x0 = max(int(np.floor(min(p[0], q[0]) - r)), 0)
    x1 = min(int(np.ceil(max(p[0], q[0]) + r)), w - 1)
    y0 = max(int(np.floor(min(p[1], q[1]) - r)), 0)
    y1 = min(int(np.ceil(max(p[1], q[1]) + r)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    d = q - p
    denom = float(d @ d)
    if denom == 0.0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / denom, 0.0, 1.0)
    dx = xs - (p[0] + t * d[0])
    dy = ys - (p[1] + t * d[1])
    hit = dx * dx + dy * dy <= r * r + 1e-9
    out[y0:y1 + 1, x0:x1 + 1] |= hit.astype(np.uint8)


def subset_polylines(subset: LandmarkSet) -> list[tuple[np.ndarray, bool]]:
    lines = []
    for indices, closed in DRAWN_GROUPS:
        keep = [i for i in indices if subset.subset_mask[i]]
        if keep:
            lines.append((subset.points[keep], closed))
    return lines


def render_landmark_image(subset: LandmarkSet, resolution: tuple[int, int],
                          width: float = STROKE_WIDTH) -> np.ndarray:
    """Binary (H, W) uint8 raster of the selected landmark groups."""
    h, w = resolution
    if h <= 0 or w <= 0:
        raise ShapeError(f"resolution must be positive, got {resolution}")
    subset = as_landmark_set(subset)
    raster = rasterize_polylines(subset_polylines(subset), (h, w), width)
    selected = subset.subset_mask
    if selected.any() and not subset.in_frame((h, w))[selected].any():
        warnings.warn("all selected landmarks are out of frame", LandmarksOutOfFrameWarning, stacklevel=2)
    return raster


def shoelace_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def face_polygon(subset: LandmarkSet) -> np.ndarray:
    """Jaw line closed by a straight line above points 0 and 16.

    The closing edge is raised by ``FOREHEAD_RAISE`` of the subset's bounding
    box height so the eyes fall inside while the forehead stays outside.
    """
    subset = as_landmark_set(subset)
    jaw = subset.points[list(JAW)]
    sel = subset.points[subset.subset_mask] if subset.subset_mask.any() else subset.points
    height = float(sel[:, 1].max() - sel[:, 1].min())
    raise_by = np.array([0.0, FOREHEAD_RAISE * height])
    poly = np.vstack([jaw, jaw[-1] - raise_by, jaw[0] - raise_by])
    if shoelace_area(poly) < 1e-6:
        raise InvalidLandmarksError("degenerate face silhouette (zero area)")
    return poly


def polygon_mask(poly: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    rr, cc = fill_polygon(poly[:, 1], poly[:, 0], shape=shape)
    mask[rr, cc] = True
    return mask


def build_masked_background(image: np.ndarray, subset: LandmarkSet,
                            fill: float = MASK_FILL) -> MaskedBackground:
    image = check_image(image)
    face_mask = polygon_mask(face_polygon(subset), image.shape[:2])
    return MaskedBackground(apply_mask(image, face_mask, fill), face_mask)


def apply_mask(image: np.ndarray, mask: np.ndarray, fill: float = MASK_FILL) -> np.ndarray:
    out = image.copy()
    out[mask.astype(bool)] = fill
    return out


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    return image


# ---------------------------------------------------------------------------
# alignment


def canonical_anchors(resolution: int) -> np.ndarray:
    """Where jaw points 0 and 16 land in an aligned crop."""
    return np.array([[0.25, 0.40], [0.75, 0.40]]) * (resolution - 1)


def similarity_from_pairs(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """2x3 similarity transform mapping the two ``src`` points onto ``dst``."""
    s = complex(*(src[1] - src[0]))
    d = complex(*(dst[1] - dst[0]))
    if abs(s) < 1e-9:
        raise InvalidLandmarksError("alignment anchors coincide")
    z = d / s
    a, b = z.real, z.imag
    rot = np.array([[a, -b], [b, a]])
    t = dst[0] - rot @ src[0]
    return np.hstack([rot, t[:, None]])


def alignment_transform(landmarks: np.ndarray, resolution: int) -> np.ndarray:
    pts = np.asarray(landmarks, dtype=np.float64)
    return similarity_from_pairs(pts[[0, 16]], canonical_anchors(resolution))


def box_transform(box: tuple[float, float, float, float], resolution: int, margin: float = 0.1) -> np.ndarray:
    """Square crop around an (x0, y0, x1, y1) box, used for body silhouettes."""
    x0, y0, x1, y1 = box
    side = max(x1 - x0, y1 - y0) * (1 + 2 * margin) + 1
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    s = (resolution - 1) / side
    return np.array([[s, 0, (resolution - 1) / 2 - s * cx], [0, s, (resolution - 1) / 2 - s * cy]])


def transform_points(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ M[:, :2].T + M[:, 2]


def warp(image: np.ndarray, M: np.ndarray, size: tuple[int, int], nearest: bool = False) -> np.ndarray:
    h, w = size
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    src = np.ascontiguousarray(image, dtype=np.float32)
    return cv2.warpAffine(src, M.astype(np.float64), (w, h), flags=flags, borderMode=cv2.BORDER_REPLICATE)


def invert_affine(M: np.ndarray) -> np.ndarray:
    return cv2.invertAffineTransform(M.astype(np.float64))


# ---------------------------------------------------------------------------
# records


def prepare_face(image: np.ndarray, detection: Detection, resolution: int,
                 identity: int = -1, source: str = "", align: bool = True) -> AnnotatedFace:
    """Align a detected face to ``resolution`` and build its conditioning pair."""
    image = check_image(image).astype(np.float32)
    if detection.silhouette is not None:
        return _prepare_body(image, detection.silhouette, resolution, identity, source)
    if detection.landmarks is None:
        raise InvalidLandmarksError("detection has neither landmarks nor silhouette")
    points = np.asarray(detection.landmarks, dtype=np.float64)
    if points.shape != (N_LANDMARKS, 2):
        raise InvalidLandmarksError(f"expected {N_LANDMARKS} landmark points, got shape {points.shape}")
    if align:
        M = alignment_transform(points, resolution)
        crop = np.clip(warp(image, M, (resolution, resolution)), 0.0, 1.0)
        points = transform_points(M, points)
    else:
        if image.shape[:2] != (resolution, resolution):
            sy, sx = resolution / image.shape[0], resolution / image.shape[1]
            crop = np.clip(cv2.resize(image, (resolution, resolution), interpolation=cv2.INTER_AREA), 0, 1)
            points = points * np.array([sx, sy])
        else:
            crop = image
    subset = select_landmark_subset(points)
    lm_image = render_landmark_image(subset, (resolution, resolution))
    bg = build_masked_background(crop, subset)
    return AnnotatedFace(crop.astype(np.float32), subset, lm_image, bg.pixels.astype(np.float32),
                         bg.face_mask, identity, source)


def _prepare_body(image, silhouette, resolution, identity, source) -> AnnotatedFace:
    sil = np.asarray(silhouette).astype(bool)
    if sil.shape != image.shape[:2]:
        raise ShapeError("silhouette must match the image size")
    if not sil.any():
        raise InvalidLandmarksError("empty silhouette")
    ys, xs = np.nonzero(sil)
    M = box_transform((xs.min(), ys.min(), xs.max(), ys.max()), resolution)
    crop = np.clip(warp(image, M, (resolution, resolution)), 0.0, 1.0)
    mask = warp(sil.astype(np.float32), M, (resolution, resolution), nearest=True) > 0.5
    # body mode: the silhouette replaces the landmark raster
    return AnnotatedFace(crop.astype(np.float32), None, mask.astype(np.uint8),
                         apply_mask(crop, mask).astype(np.float32), mask, identity, source)


class FaceDataset(Sequence):
    """In-memory list of :class:`AnnotatedFace` plus identity bookkeeping."""

    def __init__(self, records: list[AnnotatedFace], identity_names: list[str],
                 resolution: int, skipped: int = 0, seed: int = 0):
        self.records = records
        self.identity_names = identity_names
        self.resolution = resolution
        self.skipped = skipped
        self.seed = seed
        self._by_identity: dict[int, list[int]] = {}
        for i, r in enumerate(records):
            self._by_identity.setdefault(r.identity, []).append(i)

    @property
    def n_identities(self) -> int:
        return len(self.identity_names)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self) -> Iterator[AnnotatedFace]:
        return iter(self.records)

    def indices_of(self, identity: int) -> list[int]:
        return self._by_identity.get(identity, [])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "FaceDataset":
        return FaceDataset([self.records[i] for i in indices], self.identity_names,
                           self.resolution, 0, self.seed)

    def split(self, holdout: float, seed: Optional[int] = None) -> tuple["FaceDataset", "FaceDataset"]:
        """Per-identity split; every identity keeps at least one training image."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        train, held = [], []
        for ident in sorted(self._by_identity):
            idx = np.array(self._by_identity[ident])
            idx = idx[rng.permutation(len(idx))]
            n_held = min(int(round(holdout * len(idx))), len(idx) - 1)
            held.extend(idx[:n_held].tolist())
            train.extend(idx[n_held:].tolist())
        return self.subset(sorted(train)), self.subset(sorted(held))


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, detector: LandmarkDetector, resolution: int = 128,
                 seed: int = 0, workers: int = 1, align: bool = True) -> FaceDataset:
    """Read ``<root>/<identity>/<image>`` and build annotated records.

    Images where the detector finds nothing are skipped and counted.
    """
    root = Path(root)
    names = sorted(d.name for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    jobs = []
    for ident, name in enumerate(names):
        for path in list_images(root / name):
            jobs.append((ident, path))
    if not jobs:
        raise EmptyDatasetError(f"no identities with images found under {root}")

    def work(job):
        ident, path = job
        image = read_image(path)
        found = detector.detect(image, path)
        if not found:
            return None
        try:
            return prepare_face(image, found[0], resolution, ident, str(path.relative_to(root)), align)
        except InvalidLandmarksError as exc:
            log.warning("skipping %s: %s", path, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    records = [r for r in results if r is not None]
    skipped = len(results) - len(records)
    if not records:
        raise EmptyDatasetError(f"no detectable faces under {root}")
    log.info("loaded %d records, %d identities, %d skipped", len(records), len(names), skipped)
    return FaceDataset(records, names, resolution, skipped, seed)


# ---------------------------------------------------------------------------
# sidecar landmarks and the preprocessed cache


class SidecarDetector:
    """Reads landmarks from ``<image>.json`` files written next to each image.

    Format: ``{"faces": [{"landmarks": [[x, y], ...], "person_id": "p0"}]}``;
    a face may give ``"silhouette": "mask.png"`` instead of landmarks.
    """

    def detect(self, image: np.ndarray, path: Optional[Path] = None) -> list[Detection]:
        if path is None:
            raise ValueError("SidecarDetector needs the image path")
        side = Path(str(path) + ".json")
        if not side.exists():
            return []
        data = json.loads(side.read_text())
        out = []
        for face in data.get("faces", []):
            sil = None
            if face.get("silhouette"):
                sil = read_image(side.parent / face["silhouette"])[..., 0] > 0.5
            lm = np.asarray(face["landmarks"], dtype=np.float64) if face.get("landmarks") is not None else None
            out.append(Detection(lm, sil, face.get("person_id")))
        return out


def write_sidecar(image_path: Path, detections: Sequence[Detection]) -> None:
    faces = []
    for d in detections:
        face = {"person_id": d.person_id}
        if d.landmarks is not None:
            face["landmarks"] = np.asarray(d.landmarks).round(4).tolist()
        faces.append(face)
    Path(str(image_path) + ".json").write_text(json.dumps({"faces": faces}))


def cache_parameters() -> dict:
    return {
        "jaw": [JAW[0], JAW[-1]],
        "nose_bridge": [NOSE_BRIDGE[0], NOSE_BRIDGE[-1]],
        "mouth": [MOUTH_OUTER[0], MOUTH_INNER[-1]],
        "stroke_width": STROKE_WIDTH,
        "mask_fill": MASK_FILL,
        "forehead_raise": FOREHEAD_RAISE,
    }


def save_cache(dataset: FaceDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(dataset.records):
        arrays = dict(
            image=r.image, landmark_image=r.landmark_image, masked_bg=r.masked_bg,
            face_mask=r.face_mask.astype(np.uint8), identity_index=np.int64(r.identity),
        )
        if r.landmarks is not None:
            arrays["landmarks"] = r.landmarks.points
        np.savez_compressed(out_dir / f"record_{i:06d}.npz", **arrays)
    manifest = {
        "N": dataset.n_identities,
        "identities": dataset.identity_names,
        "resolution": dataset.resolution,
        "records": len(dataset),
        "skipped": dataset.skipped,
        "seed": dataset.seed,
        "parameters": cache_parameters(),
        "sources": [r.source for r in dataset.records],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_cache(cache_dir) -> FaceDataset:
    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "manifest.json"
    if not manifest_path.exists():
        raise EmptyDatasetError(f"no dataset cache at {cache_dir}")
    manifest = json.loads(manifest_path.read_text())
    records = []
    for i in range(manifest["records"]):
        with np.load(cache_dir / f"record_{i:06d}.npz") as z:
            lm = LandmarkSet(z["landmarks"], None) if "landmarks" in z.files else None
            if lm is not None:
                lm = select_landmark_subset(lm)
            records.append(AnnotatedFace(
                z["image"], lm, z["landmark_image"], z["masked_bg"], z["face_mask"].astype(bool),
                int(z["identity_index"]), manifest["sources"][i],
            ))
    if not records:
        raise EmptyDatasetError(f"dataset cache at {cache_dir} is empty")
    return FaceDataset(records, manifest["identities"], manifest["resolution"],
                       manifest.get("skipped", 0), manifest.get("seed", 0))


def default_cache_dir() -> Path:
    return Path(os.environ.get("FACEANON_CACHE_DIR", Path.home() / ".cache" / "faceanon"))
