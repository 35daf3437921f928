"""Inference: generate a face, composite it back, keep per-camera identity maps."""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from .dataset import (
    AnnotatedFace,
    Detection,
    alignment_transform,
    box_transform,
    check_image,
    face_polygon,
    invert_affine,
    polygon_mask,
    prepare_face,
    select_landmark_subset,
    warp,
)
from .errors import DetectorError, ShapeError
from .models import Generator, one_hot
from .training import conditioning_tensor

FEATHER_PX = 2.0


class ControlMapping:
    """(camera, person) -> target identity, drawn once and then kept.

    A person seen under a new camera gets a fresh draw, so identities do not
    link across cameras.  Draws come from one seeded generator, in query order.
    """

    def __init__(self, n_identities: int, seed: int = 0):
        if n_identities < 1:
            raise ValueError("n_identities must be >= 1")
        self.n_identities = n_identities
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.table: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def draw(self) -> int:
        with self._lock:
            return int(self.rng.integers(0, self.n_identities))

    def lookup(self, camera_id: str, person_id: str) -> int:
        key = (str(camera_id), str(person_id))
        with self._lock:
            if key not in self.table:
                self.table[key] = int(self.rng.integers(0, self.n_identities))
            return self.table[key]

    def to_json(self) -> dict:
        return {
            "n_identities": self.n_identities,
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
            "table": {f"{c}/{p}": v for (c, p), v in self.table.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ControlMapping":
        m = cls(data["n_identities"], data.get("seed", 0))
        if "rng_state" in data:
            m.rng.bit_generator.state = data["rng_state"]
        for key, v in data.get("table", {}).items():
            cam, _, person = key.partition("/")
            m.table[(cam, person)] = int(v)
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "ControlMapping":
        return cls.from_json(json.loads(Path(path).read_text()))


def remap_identity(mapping: ControlMapping, camera_id: str, person_id: str) -> int:
    return mapping.lookup(camera_id, person_id)


@dataclass
class CompositeResult:
    image: np.ndarray
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)
    identities: list[int] = field(default_factory=list)
    person_ids: list[str] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


class StaticDetector:
    """Returns a fixed list of detections; handy for pre-computed landmarks."""

    def __init__(self, detections: Sequence[Detection]):
        self.detections = list(detections)

    def detect(self, image, path=None) -> list[Detection]:
        return list(self.detections)


def feather_alpha(mask: np.ndarray, width: float = FEATHER_PX) -> np.ndarray:
    """Blend weight rising linearly from the mask edge to 1 over ``width`` pixels.

    Zero everywhere outside the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    dist = distance_transform_edt(mask)
    return np.clip(dist / width, 0.0, 1.0) * mask


def composite(source: np.ndarray, generated: np.ndarray, mask: np.ndarray, feather: bool = False) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not feather:
        return np.where(mask[..., None], generated.astype(source.dtype), source)
    alpha = feather_alpha(mask)[..., None].astype(source.dtype)
    blended = alpha * generated.astype(source.dtype) + (1 - alpha) * source
    return np.where(mask[..., None], blended, source)


@torch.no_grad()
def generate(generator: Generator, faces: Sequence[AnnotatedFace], targets: Sequence[int]) -> np.ndarray:
    """Raw generator output for a batch of faces, as (B, H, W, 3) in [0, 1]."""
    n = generator.cfg.n_identities
    targets = list(targets)
    if any(t < 0 or t >= n for t in targets):
        raise ShapeError(f"target identity outside [0, {n})")
    cond = torch.stack([conditioning_tensor(f) for f in faces])
    was_training = generator.training
    generator.eval()
    out = generator(cond, one_hot(targets, n))
    generator.train(was_training)
    return ((out.permute(0, 2, 3, 1).numpy() + 1.0) / 2.0).clip(0.0, 1.0)


def anonymize_face(generator: Generator, face: AnnotatedFace, target: int, feather: bool = False) -> np.ndarray:
    """Generated pixels inside the face mask, source pixels everywhere else."""
    r = generator.cfg.resolution
    if face.image.shape[:2] != (r, r):
        raise ShapeError(f"face crop must be {r}x{r}, got {face.image.shape[:2]}")
    if not np.asarray(face.face_mask).any():
        return face.image.copy()
    gen = generate(generator, [face], [target])[0]
    return composite(face.image, gen, face.face_mask, feather)


def anonymize_faces(generator: Generator, faces: Sequence[AnnotatedFace], targets: Sequence[int],
                    feather: bool = False, batch_size: int = 64) -> list[np.ndarray]:
    """Batched :func:`anonymize_face`."""
    out = []
    for s in range(0, len(faces), batch_size):
        chunk = list(faces[s:s + batch_size])
        gen = generate(generator, chunk, targets[s:s + batch_size])
        for f, g in zip(chunk, gen):
            out.append(composite(f.image, g, f.face_mask, feather) if f.face_mask.any() else f.image.copy())
    return out


def _image_mask(image_shape, det: Detection) -> np.ndarray:
    if det.silhouette is not None:
        return np.asarray(det.silhouette, dtype=bool)
    return polygon_mask(face_polygon(select_landmark_subset(det.landmarks)), image_shape[:2])


def _crop_transform(det: Detection, resolution: int) -> np.ndarray:
    if det.silhouette is not None:
        ys, xs = np.nonzero(det.silhouette)
        return box_transform((xs.min(), ys.min(), xs.max(), ys.max()), resolution)
    return alignment_transform(det.landmarks, resolution)


def anonymize_image(generator: Generator, image: np.ndarray, detector, mapping: ControlMapping,
                    camera_id: str = "0", resolution: Optional[int] = None, feather: bool = False,
                    path=None) -> CompositeResult:
    """Anonymize all detected faces, in detection order, into one image.

    Each face is aligned to the generator resolution, generated, warped back
    and pasted inside its mask computed in image coordinates.  Later faces
    overwrite earlier ones where masks overlap.
    """
    image = check_image(image)
    resolution = resolution or generator.cfg.resolution
    try:
        detections = detector.detect(image, path)
    except Exception as exc:  # noqa: BLE001 - surfaced as a typed error
        raise DetectorError(f"detector failed: {exc}") from exc
    result = CompositeResult(image.copy())
    h, w = image.shape[:2]
    for det in detections:
        person = det.person_id
        target = mapping.lookup(camera_id, person) if person is not None else mapping.draw()
        face = prepare_face(result.image, det, resolution)
        gen = generate(generator, [face], [target])[0]
        M = _crop_transform(det, resolution)
        back = warp(gen, invert_affine(M), (h, w))
        mask = _image_mask(image.shape, det)
        result.image = composite(result.image, back, mask, feather)
        ys, xs = np.nonzero(mask)
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1) if len(xs) else (0, 0, 0, 0)
        result.boxes.append(box)
        result.identities.append(target)
        result.person_ids.append(person)
        result.masks.append(mask)
    return result
