"""Generator, realism discriminator and siamese identity network.

Default layer widths describe the full 128x128 architecture.  Lower resolutions drop
encoder/decoder levels so the bottleneck stays at 4x4, and ``width`` scales
every channel count for small desk-scale runs.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

LEAKY_SLOPE = 0.2

# Channel tables at 128x128 (5 levels between 128 and the 4x4 bottleneck).
GEN_ENCODER = (32, 64, 128, 256, 256)
GEN_DECODER = (256, 128, 64, 32, 16)
DISC_ENCODER = (32, 64, 128, 256, 512)
EMBED_CONV = (64, 128, 256)
EMBED_FC_LAYERS = 7
EMBED_RESHAPE_CHANNELS = 32
DISC_FC = 1024


@dataclass(frozen=True)
class ArchConfig:
    n_identities: int
    resolution: int = 128
    width: float = 1.0
    embedding_dim: int = 1024

    def __post_init__(self):
        levels = math.log2(self.resolution / 4)
        if self.resolution < 8 or levels != int(levels):
            raise ShapeError(f"resolution must be 4*2^k with k >= 1, got {self.resolution}")
        if self.n_identities < 1:
            raise ShapeError("n_identities must be >= 1")
        if self.width <= 0:
            raise ShapeError("width must be positive")

    @property
    def levels(self) -> int:
        return int(math.log2(self.resolution / 4))

    def ch(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    @property
    def gen_encoder(self) -> list[int]:
        chans = list(GEN_ENCODER[: self.levels - 1]) + [GEN_ENCODER[-1]]
        return [self.ch(c) for c in chans]

    @property
    def gen_decoder(self) -> list[int]:
        return [self.ch(c) for c in GEN_DECODER[: self.levels]]

    @property
    def disc_encoder(self) -> list[int]:
        chans = list(DISC_ENCODER[: self.levels - 1]) + [DISC_ENCODER[-1]]
        return [self.ch(c) for c in chans]

    @property
    def bottleneck(self) -> int:
        return self.gen_encoder[-1]

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal init for every conv / linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, mode="fan_in", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _conv3(cin, cout):
    return nn.Conv2d(cin, cout, 3, stride=1, padding=1)


def _conv1(cin, cout):
    return nn.Conv2d(cin, cout, 1, stride=1, padding=0)


class ResidualBlockDown(nn.Module):
    """conv3+ReLU, conv3, avgpool  |  conv1, avgpool  ->  sum -> IN."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = _conv3(cin, cout)
        self.conv2 = _conv3(cout, cout)
        self.skip = _conv1(cin, cout)
        self.norm = nn.InstanceNorm2d(cout, affine=False)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = F.avg_pool2d(self.conv2(h), 2)
        s = F.avg_pool2d(self.skip(x), 2)
        return self.norm(h + s)


class ResidualBlockUp(nn.Module):
    """IN+ReLU, up, conv3+IN+ReLU, conv3  |  up, conv1  ->  sum -> IN.

    There is no average pool after the residual path; with one the block
    could not double the spatial size.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm_in = nn.InstanceNorm2d(cin, affine=False)
        self.conv1 = _conv3(cin, cout)
        self.norm_mid = nn.InstanceNorm2d(cout, affine=False)
        self.conv2 = _conv3(cout, cout)
        self.skip = _conv1(cin, cout)
        self.norm = nn.InstanceNorm2d(cout, affine=False)

    def forward(self, x):
        h = F.relu(self.norm_in(x))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.relu(self.norm_mid(self.conv1(h)))
        h = self.conv2(h)
        s = self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.norm(h + s)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.norm1 = nn.InstanceNorm2d(channels, affine=False)
        self.conv2 = _conv3(channels, channels)
        self.norm2 = nn.InstanceNorm2d(channels, affine=False)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class IdentityEmbedder(nn.Module):
    """One-hot identity -> (bottleneck channels) x 4 x 4 feature map."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.n_identities = cfg.n_identities
        self.reshape_channels = cfg.ch(EMBED_RESHAPE_CHANNELS)
        fc_width = self.reshape_channels * 16
        fcs = []
        cin = cfg.n_identities
        for _ in range(EMBED_FC_LAYERS):
            fcs.append(nn.Linear(cin, fc_width))
            cin = fc_width
        self.fcs = nn.ModuleList(fcs)
        convs = []
        chans = [cfg.ch(c) for c in EMBED_CONV[:-1]] + [cfg.bottleneck]
        cin = self.reshape_channels
        for c in chans:
            convs.append(nn.ModuleDict({"conv": _conv3(cin, c), "norm": nn.InstanceNorm2d(c, affine=False)}))
            cin = c
        self.convs = nn.ModuleList(convs)

    def forward(self, control):
        if control.dim() != 2 or control.shape[1] != self.n_identities:
            raise ShapeError(
                f"control must be (B, {self.n_identities}), got {tuple(control.shape)}"
            )
        check_one_hot(control)
        h = control
        for fc in self.fcs:
            h = F.leaky_relu(fc(h), LEAKY_SLOPE)
        h = h.view(h.shape[0], self.reshape_channels, 4, 4)
        for block in self.convs:
            h = block["norm"](F.leaky_relu(block["conv"](h), LEAKY_SLOPE))
        return h


def check_one_hot(control: torch.Tensor) -> None:
    ones = control == 1
    zeros = control == 0
    if not bool(torch.all(ones | zeros)) or not bool(torch.all(ones.sum(dim=1) == 1)):
        raise ShapeError("control vector must be one-hot")


def one_hot(index, n: int, dtype=torch.float32) -> torch.Tensor:
    index = torch.as_tensor(index, dtype=torch.long).reshape(-1)
    if torch.any(index < 0) or torch.any(index >= n):
        raise ShapeError(f"identity index out of range [0, {n})")
    return F.one_hot(index, n).to(dtype)


class Generator(nn.Module):
    """Encoder-decoder generator with the identity embedding at the bottleneck.

    Input is the 6-channel conditioning stack (masked background in 0-2,
    landmark raster replicated in 3-5) plus a one-hot control.  Output is a
    3-channel image in [-1, 1].
    """

    in_channels = 6

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        enc, cin = [], self.in_channels
        for c in cfg.gen_encoder:
            enc.append(ResidualBlockDown(cin, c))
            cin = c
        self.encoder = nn.ModuleList(enc)
        self.embedder = IdentityEmbedder(cfg)
        self.fuse = _conv3(2 * cfg.bottleneck, cfg.bottleneck)
        self.middle = nn.ModuleList([ResidualBlock(cfg.bottleneck) for _ in range(4)])
        dec, cin = [], cfg.bottleneck
        for c in cfg.gen_decoder:
            dec.append(ResidualBlockUp(cin, c))
            cin = c
        self.decoder = nn.ModuleList(dec)
        self.to_rgb = _conv3(cin, 3)
        init_weights(self)

    def forward(self, conditioning, control):
        r = self.cfg.resolution
        if conditioning.dim() != 4 or tuple(conditioning.shape[1:]) != (self.in_channels, r, r):
            raise ShapeError(f"conditioning must be (B, 6, {r}, {r}), got {tuple(conditioning.shape)}")
        if control.shape[0] != conditioning.shape[0]:
            raise ShapeError("batch size mismatch between conditioning and control")
        h = conditioning
        for block in self.encoder:
            h = block(h)
        h = torch.cat([h, self.embedder(control)], dim=1)
        h = F.relu(self.fuse(h))
        for block in self.middle:
            h = block(h)
        for block in self.decoder:
            h = block(h)
        return torch.tanh(self.to_rgb(h))


class ConvTrunk(nn.Module):
    """Residual-down trunk followed by the 1024-wide FC layer.

    Shared by the discriminator and the siamese identity network; the FC
    output is the identity embedding.
    """

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        blocks, cin = [], 3
        for c in cfg.disc_encoder:
            blocks.append(ResidualBlockDown(cin, c))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(cin * 16, cfg.embedding_dim)

    def forward(self, image):
        r = self.cfg.resolution
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, r, r):
            raise ShapeError(f"image must be (B, 3, {r}, {r}), got {tuple(image.shape)}")
        h = image
        for block in self.blocks:
            h = block(h)
        return F.leaky_relu(self.fc(h.flatten(1)), LEAKY_SLOPE)


class Discriminator(nn.Module):
    """Realism critic; returns one unbounded score per image."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.trunk = ConvTrunk(cfg)
        self.out = nn.Linear(cfg.embedding_dim, 1)
        init_weights(self)

    def forward(self, image):
        return self.out(self.trunk(image)).squeeze(1)


class IdentityNet(nn.Module):
    """Siamese identity network: both branches of a pair run through ``self``."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.trunk = ConvTrunk(cfg)
        init_weights(self)

    def forward(self, image):
        return self.trunk(image)

    def pair(self, a, b):
        return self(a), self(b)


def build_models(cfg: ArchConfig) -> dict[str, nn.Module]:
    return {"generator": Generator(cfg), "discriminator": Discriminator(cfg), "identity": IdentityNet(cfg)}
