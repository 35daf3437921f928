"""Identity-network pretraining, joint adversarial training, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import AnnotatedFace, FaceDataset
from .errors import CheckpointError, ConfigError, NonFiniteLossError
from .evaluation import recall_at_1
from .losses import GanLabels, ProxyBank, contrastive_loss, lsgan_d_loss, lsgan_g_loss
from .models import ArchConfig, Discriminator, Generator, IdentityNet, one_hot

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    lambda_id: float = 1.0
    resolution: int = 128
    width: float = 1.0
    embedding_dim: int = 1024
    label_fake: float = 0.0
    label_real: float = 1.0
    margin: float = 1.0
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-4
    pretrain_batch_size: int = 32
    holdout: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        if not self.lr >= 0 or not self.pretrain_lr >= 0:
            raise ConfigError("learning rates must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("ADAM betas must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if not 0 <= self.holdout < 1:
            raise ConfigError("holdout must lie in [0, 1)")
        GanLabels(self.label_fake, self.label_real)
        return self

    @property
    def labels(self) -> GanLabels:
        return GanLabels(self.label_fake, self.label_real)

    def arch(self, n_identities: int) -> ArchConfig:
        return ArchConfig(n_identities, self.resolution, self.width, self.embedding_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        # coerce to the default's type so "1e-5" or 60.0 from a file still work
        try:
            values = {k: type(getattr(cls, k))(v) for k, v in data.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        return cls(**values)

    @classmethod
    def from_file(cls, path, overrides: Optional[dict] = None) -> "TrainConfig":
        data = load_config_file(path) if path else {}
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)


def load_config_file(path) -> dict:
    """Flat key/value config from a .json or .toml file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def set_deterministic(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# tensors


def to_model_range(x: np.ndarray) -> torch.Tensor:
    """HWC [0, 1] -> CHW [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if t.dim() == 2:
        t = t[..., None]
    return t.permute(2, 0, 1) * 2.0 - 1.0


def conditioning_tensor(face: AnnotatedFace) -> torch.Tensor:
    """Masked background in channels 0-2, landmark raster repeated in 3-5."""
    bg = to_model_range(face.masked_bg)
    lm = to_model_range(np.asarray(face.landmark_image, dtype=np.float32)).expand(3, -1, -1)
    return torch.cat([bg, lm], dim=0)


@dataclass
class TensorData:
    image: torch.Tensor
    cond: torch.Tensor
    mask: torch.Tensor
    label: torch.Tensor
    n_identities: int
    by_identity: list[list[int]] = field(default_factory=list)

    @classmethod
    def from_dataset(cls, ds: FaceDataset) -> "TensorData":
        image = torch.stack([to_model_range(r.image) for r in ds])
        cond = torch.stack([conditioning_tensor(r) for r in ds])
        mask = torch.stack([torch.from_numpy(np.asarray(r.face_mask, dtype=np.float32))[None] for r in ds])
        label = torch.as_tensor(ds.labels)
        by_id = [[] for _ in range(ds.n_identities)]
        for i, y in enumerate(ds.labels.tolist()):
            by_id[y].append(i)
        return cls(image, cond, mask, label, ds.n_identities, by_id)

    def __len__(self):
        return len(self.label)


@dataclass
class Batch:
    image: torch.Tensor
    cond: torch.Tensor
    mask: torch.Tensor
    label: torch.Tensor
    target: torch.Tensor
    exemplar: torch.Tensor
    positive: torch.Tensor


def _pick(pool: list[int], rng: torch.Generator, avoid: Optional[int] = None) -> int:
    if avoid is not None and len(pool) > 1:
        choices = [p for p in pool if p != avoid]
    else:
        choices = pool
    return choices[int(torch.randint(len(choices), (1,), generator=rng))]


def make_batch(data: TensorData, indices, rng: torch.Generator) -> Batch:
    """Gather a batch and draw target identities and exemplars.

    Targets are uniform over all identities (the source's own included).  The
    exemplar is a random real image of the target; the positive is another
    real image of the source identity.
    """
    idx = torch.as_tensor(indices, dtype=torch.long)
    target = torch.randint(0, data.n_identities, (len(idx),), generator=rng)
    pools = data.by_identity
    available = [t for t in range(data.n_identities) if pools[t]]
    fixed = []
    for t in target.tolist():
        fixed.append(t if pools[t] else available[t % len(available)])
    target = torch.as_tensor(fixed)
    ex = [_pick(pools[t], rng) for t in fixed]
    pos = [_pick(pools[int(data.label[i])], rng, avoid=int(i)) for i in idx.tolist()]
    return Batch(data.image[idx], data.cond[idx], data.mask[idx], data.label[idx], target,
                 data.image[ex], data.image[pos])


# ---------------------------------------------------------------------------
# identity network pretraining


@torch.no_grad()
def embed(net: IdentityNet, images, batch_size: int = 64) -> np.ndarray:
    """L2-normalized embeddings of (M, 3, H, W) model-range tensors or (M, H, W, 3) [0, 1] arrays."""
    if isinstance(images, np.ndarray) or (isinstance(images, list) and isinstance(images[0], np.ndarray)):
        images = torch.stack([to_model_range(im) for im in images])
    was = net.training
    net.eval()
    out = [F.normalize(net(images[s:s + batch_size]), dim=1) for s in range(0, len(images), batch_size)]
    net.train(was)
    return torch.cat(out).numpy()


@dataclass
class PretrainResult:
    net: IdentityNet
    proxies: ProxyBank
    recall_before: float
    recall_after: float
    losses: list[float]


def pretrain_identity(dataset: FaceDataset, config: TrainConfig,
                      heldout: Optional[FaceDataset] = None) -> PretrainResult:
    """Train the siamese trunk and one proxy per identity with Proxy-NCA.

    Recall@1 is measured on ``heldout`` (or a per-identity split of
    ``dataset``) before and after training.
    """
    if dataset.n_identities < 2:
        raise ConfigError("identity pretraining needs at least two identities")
    if heldout is None:
        dataset, heldout = dataset.split(config.holdout, config.seed)
    set_deterministic(config.seed)
    rng = torch.Generator().manual_seed(config.seed)
    arch = config.arch(dataset.n_identities)
    net = IdentityNet(arch)
    proxies = ProxyBank(dataset.n_identities, arch.embedding_dim, generator=rng)
    data = TensorData.from_dataset(dataset)
    held_images = torch.stack([to_model_range(r.image) for r in heldout]) if len(heldout) else None

    def held_recall():
        if held_images is None or len(heldout) < 2:
            return float("nan")
        return recall_at_1(embed(net, held_images), heldout.labels)

    before = held_recall()
    opt = torch.optim.Adam(list(net.parameters()) + list(proxies.parameters()), lr=config.pretrain_lr,
                           betas=(config.beta1, config.beta2), eps=config.eps)
    losses = []
    bs = config.pretrain_batch_size
    for epoch in range(config.pretrain_epochs):
        perm = torch.randperm(len(data), generator=rng)
        for s in range(0, len(perm), bs):
            idx = perm[s:s + bs]
            loss = proxies(net(data.image[idx]), data.label[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError("non-finite Proxy-NCA loss", {"epoch": epoch, "loss": float(loss)})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.info("pretrain epoch %d loss %.4f", epoch, losses[-1] if losses else float("nan"))
    after = held_recall()
    for p in proxies.parameters():
        p.requires_grad_(False)
    return PretrainResult(net, proxies, before, after, losses)


# ---------------------------------------------------------------------------
# joint training


class TrainState:
    """Everything needed to continue training bit-for-bit."""

    def __init__(self, config: TrainConfig, arch: ArchConfig, identity: Optional[IdentityNet] = None,
                 proxies: Optional[ProxyBank] = None):
        self.config = config
        self.arch = arch
        set_deterministic(config.seed)
        self.generator = Generator(arch)
        self.discriminator = Discriminator(arch)
        self.identity = IdentityNet(arch)
        if identity is not None:
            self.identity.load_state_dict(identity.state_dict())
        self.proxies = ProxyBank(arch.n_identities, arch.embedding_dim) if arch.n_identities >= 2 else None
        if proxies is not None and self.proxies is not None:
            self.proxies.load_state_dict(proxies.state_dict())
        if self.proxies is not None:
            self.proxies.requires_grad_(False)
        kw = dict(lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), **kw)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), **kw)
        self.opt_i = torch.optim.Adam(self.identity.parameters(), **kw)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.epoch = 0
        self.step = 0
        self.perm: Optional[torch.Tensor] = None
        self.pos = 0

    def next_indices(self, n_records: int) -> torch.Tensor:
        """Next batch of record indices; reshuffles at each epoch boundary."""
        if self.perm is None or self.pos >= len(self.perm):
            if self.perm is not None:
                self.epoch += 1
            self.perm = torch.randperm(n_records, generator=self.rng)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.config.batch_size]
        self.pos += len(idx)
        return idx

    @property
    def epoch_done(self) -> bool:
        return self.perm is not None and self.pos >= len(self.perm)

    def modules(self) -> dict:
        mods = {"generator": self.generator, "discriminator": self.discriminator, "identity": self.identity}
        if self.proxies is not None:
            mods["proxies"] = self.proxies
        return mods

    def optimizers(self) -> dict:
        return {"generator": self.opt_g, "discriminator": self.opt_d, "identity": self.opt_i}


def _check_finite(name: str, value: torch.Tensor, state: TrainState, losses: dict) -> None:
    if not torch.isfinite(value):
        snap = {"step": state.step, "epoch": state.epoch, "failed": name, **{k: float(v) for k, v in losses.items()}}
        raise NonFiniteLossError(f"non-finite {name} at step {state.step}", snap)


def generator_objective(state: TrainState, batch: Batch, detach_exemplar: bool = True):
    """Adversarial + weighted identity loss of the generator on ``batch``.

    Returns ``(total, adversarial, identity, composite)``.
    """
    n = state.arch.n_identities
    fake = state.generator(batch.cond, one_hot(batch.target, n))
    comp = batch.mask * fake + (1 - batch.mask) * batch.image
    g_adv = lsgan_g_loss(state.discriminator(comp), state.config.labels)
    e_fake = F.normalize(state.identity(comp), dim=1)
    e_ex = F.normalize(state.identity(batch.exemplar), dim=1)
    if detach_exemplar:
        e_ex = e_ex.detach()
    g_id = contrastive_loss(e_fake, e_ex, torch.ones(len(e_fake), dtype=torch.bool), state.config.margin)
    return g_adv + state.config.lambda_id * g_id, g_adv, g_id, comp


def train_step(state: TrainState, batch: Batch) -> dict:
    """One D update, one G update, one identity-network update, in that order."""
    cfg = state.config
    G, D, I = state.generator, state.discriminator, state.identity
    n = state.arch.n_identities
    losses: dict = {}

    # discriminator
    with torch.no_grad():
        fake = G(batch.cond, one_hot(batch.target, n))
        comp = batch.mask * fake + (1 - batch.mask) * batch.image
    d_loss = lsgan_d_loss(D(batch.image), D(comp), cfg.labels)
    losses["d_loss"] = d_loss.detach()
    _check_finite("d_loss", d_loss, state, losses)
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    # generator
    total, g_adv, g_id, comp = generator_objective(state, batch)
    losses.update(g_adv=g_adv.detach(), g_id=g_id.detach())
    _check_finite("g_loss", total, state, losses)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()

    # identity network: fake and real embeddings pulled to the right identities
    comp = comp.detach()
    left = F.normalize(I(torch.cat([comp, comp, batch.image, batch.image])), dim=1)
    roll = torch.roll(torch.arange(len(comp)), 1)
    right_imgs = torch.cat([batch.exemplar, batch.exemplar[roll], batch.positive, batch.exemplar])
    right = F.normalize(I(right_imgs), dim=1)
    same = torch.cat([
        torch.ones(len(comp), dtype=torch.bool),
        batch.target == batch.target[roll],
        torch.ones(len(comp), dtype=torch.bool),
        batch.label == batch.target,
    ])
    id_ft = contrastive_loss(left, right, same, cfg.margin)
    losses["id_ft"] = id_ft.detach()
    _check_finite("id_ft", id_ft, state, losses)
    state.opt_i.zero_grad()
    id_ft.backward()
    state.opt_i.step()

    with torch.no_grad():
        m = batch.mask
        g_rec = ((comp - batch.image).abs() * m).sum() / (3 * m.sum()).clamp(min=1)
    losses["g_rec"] = g_rec
    state.step += 1
    return {k: float(v) for k, v in losses.items()}


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_savez(path: Path, arrays: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, mod in state.modules().items():
        for k, v in mod.state_dict().items():
            arrays[f"params/{name}/{k}"] = v.detach().cpu().numpy()
    groups = {}
    for name, opt in state.optimizers().items():
        sd = opt.state_dict()
        groups[name] = sd["param_groups"]
        for pid, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim/{name}/{pid}/{k}"] = v.cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    arrays["rng/torch"] = state.rng.get_state().numpy()
    if state.perm is not None:
        arrays["loop/perm"] = state.perm.numpy()
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": dataclasses.asdict(state.arch),
        "arch_hash": state.arch.hash(),
        "N": state.arch.n_identities,
        "E": state.arch.embedding_dim,
        "epoch": state.epoch,
        "step": state.step,
        "pos": state.pos,
        "config": state.config.to_dict(),
        "param_groups": groups,
    }
    arrays["header"] = np.array(json.dumps(header))
    _atomic_savez(path, arrays)
    return path


def read_header(path) -> dict:
    with np.load(path) as z:
        if "header" not in z.files:
            raise CheckpointError(f"{path} has no header")
        return json.loads(str(z["header"]))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        arch = ArchConfig(**header["arch"])
        if arch.hash() != header["arch_hash"]:
            raise CheckpointError("architecture hash mismatch")
        state = TrainState(TrainConfig.from_dict(header["config"]), arch)
        for name, mod in state.modules().items():
            prefix = f"params/{name}/"
            sd = {k[len(prefix):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith(prefix)}
            mod.load_state_dict(sd)
        for name, opt in state.optimizers().items():
            prefix = f"optim/{name}/"
            st: dict = {}
            for k in z.files:
                if k.startswith(prefix):
                    pid, key = k[len(prefix):].split("/", 1)
                    st.setdefault(int(pid), {})[key] = torch.from_numpy(z[k].copy())
            opt.load_state_dict({"state": st, "param_groups": header["param_groups"][name]})
        state.rng.set_state(torch.from_numpy(z["rng/torch"].copy()))
        state.perm = torch.from_numpy(z["loop/perm"].copy()) if "loop/perm" in z.files else None
    state.epoch, state.step, state.pos = header["epoch"], header["step"], header["pos"]
    return state


def load_generator(path) -> Generator:
    return load_checkpoint(path).generator.eval()


def save_identity(net: IdentityNet, proxies: ProxyBank, path, extra: Optional[dict] = None) -> Path:
    arrays = {f"params/identity/{k}": v.numpy() for k, v in net.state_dict().items()}
    arrays.update({f"params/proxies/{k}": v.detach().numpy() for k, v in proxies.state_dict().items()})
    arch = net.trunk.cfg
    header = {"version": CHECKPOINT_VERSION, "arch": dataclasses.asdict(arch), "arch_hash": arch.hash(),
              "N": arch.n_identities, "E": arch.embedding_dim, "epoch": 0, **(extra or {})}
    arrays["header"] = np.array(json.dumps(header))
    _atomic_savez(Path(path), arrays)
    return Path(path)


def load_identity(path) -> tuple[IdentityNet, ProxyBank]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        arch = ArchConfig(**header["arch"])
        if arch.hash() != header["arch_hash"]:
            raise CheckpointError("architecture hash mismatch")
        net, proxies = IdentityNet(arch), ProxyBank(arch.n_identities, arch.embedding_dim)
        for name, mod in (("identity", net), ("proxies", proxies)):
            prefix = f"params/{name}/"
            mod.load_state_dict({k[len(prefix):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith(prefix)})
    proxies.requires_grad_(False)
    return net, proxies


@dataclass
class FitResult:
    state: TrainState
    checkpoints: list[Path]
    log_path: Optional[Path]


def fit(dataset: FaceDataset, config: TrainConfig, out_dir=None, identity: Optional[IdentityNet] = None,
        proxies: Optional[ProxyBank] = None, resume=None, max_steps: Optional[int] = None,
        on_step: Optional[Callable[[TrainState, dict], None]] = None) -> FitResult:
    """Train for ``config.epochs`` epochs, checkpointing after each one.

    Log records go to ``<out_dir>/train_log.jsonl`` as one JSON object per
    step.  ``resume`` continues from a checkpoint's step counter.
    """
    config.validate()
    data = TensorData.from_dataset(dataset)
    if resume is not None:
        state = load_checkpoint(resume)
    else:
        state = TrainState(config, config.arch(dataset.n_identities), identity, proxies)
    if state.arch.n_identities != dataset.n_identities:
        raise ConfigError("dataset identity count does not match the model")
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.jsonl").open("a")
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total = config.epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    checkpoints = []
    try:
        while state.step < total:
            idx = state.next_indices(len(data))
            batch = make_batch(data, idx, state.rng)
            losses = train_step(state, batch)
            record = {"step": state.step, "epoch": state.epoch, **losses}
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_step is not None:
                on_step(state, record)
            if state.epoch_done and out is not None:
                checkpoints.append(save_checkpoint(state, out / f"epoch_{state.epoch + 1:03d}.npz"))
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(state, checkpoints, out / "train_log.jsonl" if out is not None else None)
