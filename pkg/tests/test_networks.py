import numpy as np
import pytest
import torch

from ganda.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ganda.errors import CorruptCheckpoint, InvalidSpec, ShapeMismatch
from ganda.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    parameter_count,
)


from oracles import discriminator_param_oracle, generator_param_oracle


@pytest.mark.parametrize("cin", [1, 2])
def test_default_generator_shape_and_count(cin):
    g = build_generator(GeneratorSpec(input_channels=cin), seed=0)
    out = generator_forward(g, np.zeros((1, 512, 512, cin), np.float32))
    assert out.shape == (1, 512, 512, 1)
    assert parameter_count(g) == generator_param_oracle(cin, (32, 64, 128), 3)


def test_default_counts_frozen():
    assert generator_param_oracle(2, (32, 64, 128), 3) == 826593
    assert discriminator_param_oracle(1, (16, 32, 64, 128, 256, 512), 512) == 2828497


def test_contracting_feature_sizes():
    g = build_generator(GeneratorSpec(), 0).eval()
    with torch.no_grad():
        _, feats = g(torch.zeros(1, 2, 512, 512), return_features=True)
    assert [f.shape[-1] for f in feats] == [256, 128, 64]
    assert [f.shape[1] for f in feats] == [32, 64, 128]


@pytest.mark.parametrize("hw", [(64, 64), (8, 16), (40, 96)])
def test_size_equivariance(hw):
    g = build_generator(GeneratorSpec(), 1)
    rng = np.random.default_rng(0)
    out = generator_forward(g, rng.uniform(-1, 1, (2, *hw, 2)).astype(np.float32))
    assert out.shape == (2, *hw, 1)
    assert np.isfinite(out).all() and out.min() >= -1 and out.max() <= 1


def test_generator_shape_errors():
    g = build_generator(GeneratorSpec(), 0)
    with pytest.raises(ShapeMismatch):
        generator_forward(g, np.zeros((1, 64, 64, 1), np.float32))
    with pytest.raises(ShapeMismatch):
        generator_forward(g, np.zeros((1, 60, 64, 2), np.float32))


def test_determinism():
    spec = GeneratorSpec.scaled(2)
    a, b = build_generator(spec, 5), build_generator(spec, 5)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)
    x = np.random.default_rng(1).uniform(-1, 1, (3, 32, 32, 2)).astype(np.float32)
    assert np.array_equal(generator_forward(a, x), generator_forward(a, x))
    c = build_generator(spec, 6)
    assert not torch.equal(a.down[0][0].weight, c.down[0][0].weight)


def test_init_statistics():
    g = build_generator(GeneratorSpec(), 0)
    w = g.res[0].conv.weight.detach().numpy()
    assert abs(w.mean()) < 1e-3 and abs(w.std() - 0.02) < 1e-3


def test_residual_block_identity_with_zero_weights():
    g = build_generator(GeneratorSpec.scaled(1), 0)
    x = torch.randn(2, 32, 8, 8)
    for block in g.res:
        torch.nn.init.zeros_(block.conv.weight)
        block.train()
        assert torch.equal(block(x), x)
        block.eval()
        assert torch.equal(block(x), x)


@pytest.mark.parametrize("kw", [
    dict(expansive_filters=(32, 64, 128)),
    dict(residual_filters=64),
    dict(boundary_kernel_px=6),
    dict(contracting_filters=(32, 0, 128), expansive_filters=(128, 0, 32)),
    dict(input_channels=0),
])
def test_invalid_generator_spec(kw):
    with pytest.raises(InvalidSpec):
        build_generator(GeneratorSpec(**kw), 0)


def test_discriminator_default_layers():
    d = build_discriminator(DiscriminatorSpec(), 0).eval()
    with torch.no_grad():
        sizes = d.feature_sizes(torch.zeros(1, 1, 512, 512))
    assert [s[0] for s in sizes] == [256, 128, 64, 32, 16, 8]
    out = discriminator_forward(d, np.random.default_rng(0).uniform(-1, 1, (2, 512, 512, 1)))
    assert out.shape == (2,) and ((out > 0) & (out < 1)).all()
    assert parameter_count(d) == discriminator_param_oracle(1, (16, 32, 64, 128, 256, 512), 512)


def test_scaled_discriminator():
    spec = DiscriminatorSpec(conv_filters=(8, 16, 32), input_size_px=64)
    d = build_discriminator(spec, 0)
    x = np.random.default_rng(0).uniform(-1, 1, (3, 64, 64, 1)).astype(np.float32)
    out = discriminator_forward(d, x)
    assert out.shape == (3,)
    assert parameter_count(d) == discriminator_param_oracle(1, (8, 16, 32), 64)
    dup = discriminator_forward(d, np.concatenate([x[:1], x[:1]]))
    assert dup[0] == dup[1]
    zeros = discriminator_forward(d, np.zeros((4, 64, 64, 1), np.float32))
    assert np.all(zeros == zeros[0])
    with pytest.raises(ShapeMismatch):
        discriminator_forward(d, np.zeros((1, 32, 32, 1), np.float32))


def test_discriminator_input_gradient_matches_finite_differences():
    spec = DiscriminatorSpec(conv_filters=(4, 8, 8), input_size_px=32)
    d = build_discriminator(spec, 3).double().eval()
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.uniform(-1, 1, (1, 1, 32, 32)), requires_grad=True)
    d(x).sum().backward()
    grad = x.grad.numpy()
    assert np.isfinite(grad).all()
    h = 1e-6
    for _ in range(5):
        i, j = rng.integers(0, 32, 2)
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[0, 0, i, j] += h
        xm[0, 0, i, j] -= h
        with torch.no_grad():
            fd = (d(xp) - d(xm)).item() / (2 * h)
        assert fd == pytest.approx(grad[0, 0, i, j], rel=1e-4, abs=1e-9)


def test_invalid_discriminator_spec():
    with pytest.raises(InvalidSpec):
        build_discriminator(DiscriminatorSpec(input_size_px=100), 0)
    with pytest.raises(InvalidSpec):
        build_discriminator(DiscriminatorSpec(kernel_px=3), 0)


def _models():
    gs = GeneratorSpec.scaled(2)
    ds = DiscriminatorSpec(conv_filters=(8, 16, 32), input_size_px=64)
    return build_generator(gs, 0), build_discriminator(ds, 1)


def test_checkpoint_round_trip(tmp_path):
    g, d = _models()
    ck = Checkpoint.from_models(g, d, {"epoch": 3, "seed": 0, "loss_history": [{"a": 1.5}]})
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.generator_spec == ck.generator_spec
    assert back.discriminator_spec == ck.discriminator_spec
    assert back.training_meta["epoch"] == 3
    assert list(back.weights) == list(ck.weights)
    assert all(np.array_equal(back.weights[k], ck.weights[k]) for k in ck.weights)
    probe = np.random.default_rng(2).uniform(-1, 1, (2, 64, 64, 2)).astype(np.float32)
    assert np.array_equal(generator_forward(g, probe), generator_forward(back.generator(), probe))
    z = probe[..., :1]
    assert np.array_equal(discriminator_forward(d, z), discriminator_forward(back.discriminator(), z))


def test_checkpoint_bytes_are_reproducible(tmp_path):
    g, d = _models()
    save_checkpoint(Checkpoint.from_models(g, d, {"x": 1}), tmp_path / "a.ckpt")
    g, d = _models()
    save_checkpoint(Checkpoint.from_models(g, d, {"x": 1}), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_tampered_checkpoint(tmp_path):
    import zipfile
    g, d = _models()
    save_checkpoint(Checkpoint.from_models(g, d), tmp_path / "c.ckpt")
    with zipfile.ZipFile(tmp_path / "c.ckpt") as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    blob = bytearray(members["weights.bin"])
    blob[100] ^= 0xFF
    members["weights.bin"] = bytes(blob)
    with zipfile.ZipFile(tmp_path / "t.ckpt", "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_checkpoint_rejects_other_spec():
    g, d = _models()
    ck = Checkpoint.from_models(g, d)
    other = build_generator(GeneratorSpec.scaled(2, (4, 8, 16)), 0)
    with pytest.raises(InvalidSpec):
        ck.load_into(g=other)
