"""Small end-to-end anonymization study: train, anonymize held-out faces, score.

The recognizer is the pretrained identity network snapshot, frozen before
joint training.  Recall@1 uses its normalized embeddings; the internal FID
uses its penultimate layer (the flattened output of the last residual block).
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .anonymize import anonymize_faces
from .baselines import BaselineSpec, apply_in_box, mask_box
from .dataset import FaceDataset, SidecarDetector, load_dataset
from .evaluation import feature_stats, fid, recall_at_1
from .models import Generator, IdentityNet
from .synthetic import write_synthetic_dataset
from .training import TrainConfig, embed, fit, pretrain_identity, to_model_range

log = logging.getLogger(__name__)


def baseline_images(faces: FaceDataset, method: BaselineSpec) -> list[np.ndarray]:
    """Apply a baseline inside each face's mask bounding box."""
    out = []
    for f in faces:
        box = mask_box(f.face_mask)
        out.append(f.image.copy() if box is None else apply_in_box(f.image, method, box, f.face_mask))
    return out


@torch.no_grad()
def penultimate_features(net: IdentityNet, images, batch_size: int = 64) -> np.ndarray:
    """Flattened last-block activations of the identity trunk, before its FC layer."""
    was = net.training
    net.eval()
    out = []
    for s in range(0, len(images), batch_size):
        h = torch.stack([to_model_range(im) for im in images[s:s + batch_size]])
        for block in net.trunk.blocks:
            h = block(h)
        out.append(h.flatten(1).double().numpy())
    net.train(was)
    return np.concatenate(out)


def evaluate_methods(held: FaceDataset, recognizer: IdentityNet, generator: Optional[Generator],
                     baselines: Sequence[BaselineSpec] = (), seed: int = 0) -> list[dict]:
    """One row per method: Recall@1 under the source labels and FID against the real faces.

    Anonymized faces get uniformly random target identities from a seeded
    generator.
    """
    labels = held.labels
    real = [f.image for f in held]
    real_emb = embed(recognizer, real)
    real_stats = feature_stats(penultimate_features(recognizer, real))
    rows = [{"method": "original", "detection": None, "recall_at_1": recall_at_1(real_emb, labels), "fid": 0.0}]

    def score(name, images):
        rows.append({"method": name, "detection": None, "recall_at_1": recall_at_1(embed(recognizer, images), labels),
                     "fid": fid(real_stats, feature_stats(penultimate_features(recognizer, images)))})

    if generator is not None:
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, generator.cfg.n_identities, len(held)).tolist()
        score("anonymized", anonymize_faces(generator, list(held), targets))
    for method in baselines:
        score(method.name, baseline_images(held, method))
    return rows


@dataclass
class StudyResult:
    rows: list[dict]
    recall_real: float
    recall_anonymized: float
    chance: float
    fid_anonymized: float
    fid_blur: float
    pretrain_recall: tuple[float, float]
    seconds: float
    generator: Generator
    recognizer: IdentityNet
    held: FaceDataset
    extra: dict = field(default_factory=dict)


# Settings that fit the study into about an hour on one CPU core.
DESK_CONFIG = dict(resolution=32, width=0.5, lr=2e-4, batch_size=16, pretrain_epochs=30, pretrain_lr=2e-3,
                   pretrain_batch_size=32, holdout=0.25)
DESK_STEPS = 2500


def run_study(work_dir, n_identities: int = 20, per_identity: int = 20, steps: int = DESK_STEPS, seed: int = 0,
              config: Optional[TrainConfig] = None) -> StudyResult:
    """Synthesize a dataset, run the full pipeline and score the held-out split."""
    start = time.time()
    work = Path(work_dir)
    cfg = config or TrainConfig(seed=seed, epochs=1000, **DESK_CONFIG)
    write_synthetic_dataset(work / "raw", n_identities, per_identity, seed=seed)
    ds = load_dataset(work / "raw", SidecarDetector(), cfg.resolution, seed)
    train, held = ds.split(cfg.holdout, seed)
    pre = pretrain_identity(train, cfg, held)
    recognizer = copy.deepcopy(pre.net).eval()
    log.info("identity pretraining recall %.1f -> %.1f", pre.recall_before, pre.recall_after)
    result = fit(train, cfg, None, pre.net, pre.proxies, max_steps=steps)
    gen = result.state.generator.eval()
    rows = evaluate_methods(held, recognizer, gen, [BaselineSpec("blur", 17)], seed)
    by = {r["method"]: r for r in rows}
    return StudyResult(
        rows=rows,
        recall_real=by["original"]["recall_at_1"],
        recall_anonymized=by["anonymized"]["recall_at_1"],
        chance=100.0 / ds.n_identities,
        fid_anonymized=by["anonymized"]["fid"],
        fid_blur=by["blur-17"]["fid"],
        pretrain_recall=(pre.recall_before, pre.recall_after),
        seconds=time.time() - start,
        generator=gen,
        recognizer=recognizer,
        held=held,
    )
