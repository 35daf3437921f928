import numpy as np
import pytest
import torch

from faceanon.errors import ShapeError
from faceanon.models import (
    ArchConfig,
    Discriminator,
    Generator,
    IdentityEmbedder,
    IdentityNet,
    ResidualBlock,
    ResidualBlockDown,
    ResidualBlockUp,
    one_hot,
)

# (module path, output shape without batch) at 128x128, full width
GENERATOR_TABLE = [
    ("encoder.0", (32, 64, 64)),
    ("encoder.1", (64, 32, 32)),
    ("encoder.2", (128, 16, 16)),
    ("encoder.3", (256, 8, 8)),
    ("encoder.4", (256, 4, 4)),
    ("embedder", (256, 4, 4)),
    ("fuse", (256, 4, 4)),
    ("middle.0", (256, 4, 4)),
    ("middle.1", (256, 4, 4)),
    ("middle.2", (256, 4, 4)),
    ("middle.3", (256, 4, 4)),
    ("decoder.0", (256, 8, 8)),
    ("decoder.1", (128, 16, 16)),
    ("decoder.2", (64, 32, 32)),
    ("decoder.3", (32, 64, 64)),
    ("decoder.4", (16, 128, 128)),
    ("to_rgb", (3, 128, 128)),
]
EMBEDDER_TABLE = [(f"fcs.{i}", (512,)) for i in range(7)] + [
    ("convs.0.conv", (64, 4, 4)),
    ("convs.1.conv", (128, 4, 4)),
    ("convs.2.conv", (256, 4, 4)),
]
DISCRIMINATOR_TABLE = [
    ("trunk.blocks.0", (32, 64, 64)),
    ("trunk.blocks.1", (64, 32, 32)),
    ("trunk.blocks.2", (128, 16, 16)),
    ("trunk.blocks.3", (256, 8, 8)),
    ("trunk.blocks.4", (512, 4, 4)),
    ("trunk.fc", (1024,)),
    ("out", (1,)),
]


def record_shapes(model, names, *inputs):
    shapes, handles = {}, []
    modules = dict(model.named_modules())
    for name in names:
        handles.append(modules[name].register_forward_hook(
            lambda m, i, o, name=name: shapes.__setitem__(name, tuple(o.shape[1:]))))
    with torch.no_grad():
        out = model(*inputs)
    for h in handles:
        h.remove()
    return shapes, out


@pytest.fixture(scope="module")
def full():
    torch.manual_seed(0)
    return ArchConfig(n_identities=10)


def test_generator_shape_table(full):
    g = Generator(full)
    cond = torch.randn(2, 6, 128, 128)
    shapes, out = record_shapes(g, [n for n, _ in GENERATOR_TABLE], cond, one_hot([0, 3], 10))
    assert shapes == dict(GENERATOR_TABLE)
    assert out.shape == (2, 3, 128, 128)


def test_generator_bottleneck_concat_is_512(full):
    g = Generator(full)
    seen = {}
    g.fuse.register_forward_pre_hook(lambda m, i: seen.__setitem__("in", tuple(i[0].shape[1:])))
    with torch.no_grad():
        g(torch.randn(1, 6, 128, 128), one_hot([1], 10))
    assert seen["in"] == (512, 4, 4)


def test_embedder_shape_table(full):
    e = IdentityEmbedder(full)
    shapes, out = record_shapes(e, [n for n, _ in EMBEDDER_TABLE], one_hot([2], 10))
    assert shapes == dict(EMBEDDER_TABLE)
    assert out.shape == (1, 256, 4, 4)


def test_discriminator_shape_table(full):
    d = Discriminator(full)
    shapes, out = record_shapes(d, [n for n, _ in DISCRIMINATOR_TABLE], torch.randn(3, 3, 128, 128))
    assert shapes == dict(DISCRIMINATOR_TABLE)
    assert out.shape == (3,)
    assert d.out.in_features == 1024 and d.out.out_features == 1


def test_identity_net_embedding_dim(full):
    net = IdentityNet(full)
    with torch.no_grad():
        e = net(torch.randn(2, 3, 128, 128))
    assert e.shape == (2, 1024)


def test_block_shapes():
    torch.manual_seed(0)
    assert ResidualBlockDown(32, 64)(torch.randn(1, 32, 64, 64)).shape == (1, 64, 32, 32)
    assert ResidualBlockUp(256, 256)(torch.randn(1, 256, 4, 4)).shape == (1, 256, 8, 8)
    assert ResidualBlock(16)(torch.randn(1, 16, 8, 8)).shape == (1, 16, 8, 8)


def test_plain_block_zero_residual_is_identity():
    block = ResidualBlock(4)
    for p in block.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 4, 6, 6)
    assert torch.equal(block(x), x)


def test_zero_final_layer_gives_constant_output():
    g = Generator(ArchConfig(4, resolution=16, width=0.25))
    torch.nn.init.zeros_(g.to_rgb.weight)
    torch.nn.init.zeros_(g.to_rgb.bias)
    with torch.no_grad():
        out = g(torch.randn(2, 6, 16, 16), one_hot([0, 1], 4))
    assert torch.all(out == 0)


def test_generator_output_bounded():
    g = Generator(ArchConfig(3, resolution=16, width=0.25))
    with torch.no_grad():
        out = g(torch.randn(4, 6, 16, 16) * 100, one_hot([0, 1, 2, 0], 3))
    assert out.abs().max() <= 1


def test_embedder_distinct_ids_and_determinism():
    torch.manual_seed(1)
    e = IdentityEmbedder(ArchConfig(5, resolution=16, width=0.25))
    with torch.no_grad():
        a, b = e(one_hot([0], 5)), e(one_hot([1], 5))
        assert (a - b).norm() > 0
        assert torch.equal(a, e(one_hot([0], 5)))


def test_embedder_rejects_non_one_hot():
    e = IdentityEmbedder(ArchConfig(3, resolution=16, width=0.25))
    with pytest.raises(ShapeError):
        e(torch.tensor([[0.5, 0.5, 0.0]]))
    with pytest.raises(ShapeError):
        e(torch.tensor([[1.0, 1.0, 0.0]]))
    with pytest.raises(ShapeError):
        e(one_hot([0], 4))


def test_wrong_input_shapes_rejected():
    cfg = ArchConfig(3, resolution=16, width=0.25)
    with pytest.raises(ShapeError):
        Generator(cfg)(torch.randn(1, 5, 16, 16), one_hot([0], 3))
    with pytest.raises(ShapeError):
        Discriminator(cfg)(torch.randn(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        ArchConfig(3, resolution=100)


def test_siamese_branches_share_weights():
    net = IdentityNet(ArchConfig(3, resolution=16, width=0.25))
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        a, b = net.pair(x, x)
    assert torch.equal(a, b)


def test_lower_resolution_keeps_4x4_bottleneck():
    cfg = ArchConfig(4, resolution=64, width=1.0)
    g = Generator(cfg)
    shapes, out = record_shapes(g, ["encoder.3", "decoder.3"], torch.randn(1, 6, 64, 64), one_hot([0], 4))
    assert shapes["encoder.3"] == (256, 4, 4) and out.shape == (1, 3, 64, 64)


def _fd_check(model_fn, params, n_checks=6, eps=1e-6, rtol=1e-2, seed=0):
    rng = np.random.default_rng(seed)
    loss = model_fn()
    grads = torch.autograd.grad(loss, params)
    for _ in range(n_checks):
        k = int(rng.integers(len(params)))
        p, g = params[k], grads[k]
        flat = p.data.view(-1)
        # probe the coordinate with the largest gradient among a few candidates
        cand = rng.integers(0, flat.numel(), 8)
        i = int(cand[np.argmax(np.abs(g.view(-1)[cand].numpy()))])
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + eps
            up = float(model_fn())
            flat[i] = old - eps
            down = float(model_fn())
            flat[i] = old
        fd = (up - down) / (2 * eps)
        assert fd == pytest.approx(float(g.view(-1)[i]), rel=rtol, abs=1e-6)


@pytest.mark.parametrize("which", ["generator", "discriminator", "identity"])
def test_finite_difference_gradients(which):
    torch.manual_seed(0)
    cfg = ArchConfig(3, resolution=8, width=0.25, embedding_dim=16)
    model = {"generator": Generator, "discriminator": Discriminator, "identity": IdentityNet}[which](cfg).double()
    if which == "generator":
        x, c = torch.randn(2, 6, 8, 8, dtype=torch.float64), one_hot([0, 2], 3, torch.float64)
        fn = lambda: (model(x, c) ** 2).sum()  # noqa: E731
    else:
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        fn = lambda: (model(x) ** 2).sum()  # noqa: E731
    _fd_check(fn, [p for p in model.parameters()])
