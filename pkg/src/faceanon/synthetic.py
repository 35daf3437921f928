"""Procedural cartoon faces with 68-point landmarks for desk-scale runs.

Identity lives only inside the face region (iris colour, eye size, lip
colour, nose shade, cheek mark, beard).  Pose, jaw shape, skin tone, hair
and background are drawn per image, so nothing outside the face mask tells
identities apart.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .dataset import Detection, write_image, write_sidecar

_SS = 2  # supersampling factor
_SHIFT = 4


@dataclass
class IdentityStyle:
    iris: np.ndarray
    eye_scale: float
    lips: np.ndarray
    nose_shade: float
    mark_color: np.ndarray
    mark_pos: np.ndarray
    mark_radius: float
    beard: float


def random_identity(rng: np.random.Generator) -> IdentityStyle:
    hue = rng.uniform(0, 180)
    iris = _hsv(hue, rng.uniform(150, 255), rng.uniform(120, 230))
    lips = _hsv(rng.uniform(0, 180), rng.uniform(120, 240), rng.uniform(90, 230))
    mark = _hsv(rng.uniform(0, 180), rng.uniform(160, 255), rng.uniform(60, 240))
    return IdentityStyle(
        iris=iris,
        eye_scale=float(rng.uniform(0.7, 1.3)),
        lips=lips,
        nose_shade=float(rng.uniform(0.55, 1.0)),
        mark_color=mark,
        mark_pos=np.array([rng.choice([-1, 1]) * rng.uniform(0.45, 0.65), rng.uniform(0.3, 0.6)]),
        mark_radius=float(rng.uniform(0.06, 0.14)),
        beard=float(rng.choice([0.0, 0.0, rng.uniform(0.3, 0.7)])),
    )


def _hsv(h, s, v) -> np.ndarray:
    px = np.uint8([[[h, s, v]]])
    return cv2.cvtColor(px, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64) / 255.0


def template_landmarks(jaw_w=1.0, chin=1.15, mouth_open=0.0, mouth_w=1.0, eye_scale=1.0) -> np.ndarray:
    """68 points in a face frame: jaw corners at (+-1, 0), chin at (0, ``chin``)."""
    pts = np.zeros((68, 2))
    th = np.pi + np.arange(17) * np.pi / 16
    pts[0:17] = np.stack([np.cos(th) * jaw_w, -np.sin(th) * chin], 1)
    bx = np.linspace(0.2, 0.8, 5)
    brow_y = -0.3 - 0.06 * np.sin(np.linspace(0, np.pi, 5))
    pts[17:22] = np.stack([-bx[::-1], brow_y], 1)
    pts[22:27] = np.stack([bx, brow_y], 1)
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.15, 0.35, 4)], 1)
    pts[31:36] = np.stack([np.linspace(-0.18, 0.18, 5), [0.45, 0.48, 0.5, 0.48, 0.45]], 1)
    ang = np.deg2rad([180, 120, 60, 0, -60, -120])
    ew, eh = 0.18 * eye_scale, 0.08 * eye_scale
    for start, cx in ((36, -0.42), (42, 0.42)):
        a = ang if cx < 0 else np.pi - ang
        pts[start:start + 6] = np.stack([cx + ew * np.cos(a), 0.02 - eh * np.sin(a)], 1)
    mw = 0.38 * mouth_w
    ao = np.pi - np.arange(12) * 2 * np.pi / 12
    pts[48:60] = np.stack([mw * np.cos(ao), 0.75 - (0.12 + mouth_open) * np.sin(ao)], 1)
    ai = np.pi - np.arange(8) * 2 * np.pi / 8
    pts[60:68] = np.stack([0.28 * mw / 0.38 * np.cos(ai), 0.75 - (0.02 + mouth_open) * np.sin(ai)], 1)
    return pts


def _pose(rng, size, center=None, scale=None):
    s = scale if scale is not None else size * rng.uniform(0.2, 0.24)
    ang = np.deg2rad(rng.uniform(-8, 8))
    c = np.asarray(center if center is not None else (size / 2 + rng.uniform(-2, 2), size * 0.42 + rng.uniform(-2, 2)))
    R = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return np.hstack([R, c[:, None]])


def _apply(M, pts):
    return np.asarray(pts) @ M[:, :2].T + M[:, 2]


def _ipts(pts):
    return np.round(np.asarray(pts) * _SS * (1 << _SHIFT)).astype(np.int32).reshape(-1, 1, 2)


def _ellipse_pts(cx, cy, ax, ay, n=32):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + ax * np.cos(t), cy + ay * np.sin(t)], 1)


def draw_face(canvas: np.ndarray, style: IdentityStyle, rng: np.random.Generator, M: np.ndarray) -> np.ndarray:
    """Draw one face onto a supersampled canvas; returns image-space landmarks."""
    lm_face = template_landmarks(
        jaw_w=rng.uniform(0.9, 1.1), chin=rng.uniform(1.05, 1.25), mouth_open=rng.uniform(0.0, 0.08),
        mouth_w=rng.uniform(0.9, 1.1), eye_scale=style.eye_scale,
    )
    skin = _hsv(rng.uniform(5, 25), rng.uniform(60, 150), rng.uniform(120, 250))
    hair = _hsv(rng.uniform(0, 180), rng.uniform(0, 200), rng.uniform(20, 200))
    brow = hair * 0.6

    def poly(pts_face, color):
        cv2.fillPoly(canvas, [_ipts(_apply(M, pts_face))], color.tolist(), cv2.LINE_AA, _SHIFT)

    poly(_ellipse_pts(0, -0.35, 1.12, 1.0), hair)
    poly(np.vstack([lm_face[0:17], _ellipse_pts(0, 0, 1.0 * abs(lm_face[0, 0]), 0.85, 32)[16:]]), skin)
    if style.beard > 0:
        beard_pts = np.vstack([lm_face[3:14], lm_face[[13]] * [1, 0.6] + [0, 0.2], lm_face[[3]] * [1, 0.6] + [0, 0.2]])
        poly(beard_pts, skin * (1 - style.beard))
    for lo in (17, 22):
        cv2.polylines(canvas, [_ipts(_apply(M, lm_face[lo:lo + 5]))], False, brow.tolist(),
                      max(1, int(round(_SS * M[0, 0] * 0.06))), cv2.LINE_AA, _SHIFT)
    for lo in (36, 42):
        eye = lm_face[lo:lo + 6]
        c = eye.mean(0)
        poly(eye, np.array([0.95, 0.95, 0.95]))
        r = 0.065 * style.eye_scale
        poly(_ellipse_pts(c[0], c[1], r, r, 16), style.iris)
        poly(_ellipse_pts(c[0], c[1], r * 0.4, r * 0.4, 12), np.zeros(3))
    poly(np.array([lm_face[27], lm_face[31], lm_face[35]]), skin * style.nose_shade)
    poly(lm_face[48:60], style.lips)
    poly(lm_face[60:68], style.lips * 0.3)
    mx, my = style.mark_pos
    poly(_ellipse_pts(mx, my, style.mark_radius, style.mark_radius, 16), style.mark_color)
    return _apply(M, lm_face)


def _background(rng, h, w):
    c0 = rng.uniform(0, 1, 3)
    c1 = rng.uniform(0, 1, 3)
    t = np.linspace(0, 1, w * _SS)[None, :, None]
    grad = c0 * (1 - t) + c1 * t
    return np.repeat(grad, h * _SS, axis=0).astype(np.float32)


def _finish(canvas, rng, h, w, noise):
    img = cv2.resize(canvas, (w, h), interpolation=cv2.INTER_AREA)
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def render_face(style: IdentityStyle, rng: np.random.Generator, size: int = 80,
                noise: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """One face image (size x size x 3) and its 68 landmarks."""
    canvas = _background(rng, size, size)
    lm = draw_face(canvas, style, rng, _pose(rng, size))
    return _finish(canvas, rng, size, size, noise), lm


def render_scene(styles, rng: np.random.Generator, height: int = 96, width: int = 192,
                 noise: float = 0.01) -> tuple[np.ndarray, list[np.ndarray]]:
    """Several faces side by side on one canvas, one per style."""
    canvas = _background(rng, height, width)
    n = len(styles)
    marks = []
    for i, style in enumerate(styles):
        cx = width * (i + 0.5) / n
        M = _pose(rng, height, center=(cx, height * 0.42), scale=min(height, width / n) * 0.22)
        marks.append(draw_face(canvas, style, rng, M))
    return _finish(canvas, rng, height, width, noise), marks


def identity_styles(n: int, seed: int) -> list[IdentityStyle]:
    rng = np.random.default_rng(seed)
    return [random_identity(rng) for _ in range(n)]


def write_synthetic_dataset(root, n_identities: int = 20, per_identity: int = 20,
                            size: int = 80, seed: int = 0) -> Path:
    """Write ``<root>/id_XXX/img_YYY.png`` plus landmark sidecars."""
    root = Path(root)
    styles = identity_styles(n_identities, seed)
    rng = np.random.default_rng(seed + 1)
    for i, style in enumerate(styles):
        d = root / f"id_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(per_identity):
            img, lm = render_face(style, rng, size)
            path = d / f"img_{j:03d}.png"
            write_image(path, img)
            write_sidecar(path, [Detection(lm, None, f"id_{i:03d}")])
    (root / "synthetic.json").write_text(json.dumps(
        {"n_identities": n_identities, "per_identity": per_identity, "size": size, "seed": seed}))
    return root
