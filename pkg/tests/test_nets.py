import pytest
import torch
from hypothesis import given, settings, strategies as st

from ufem import nets
from ufem.gradcheck import probe_gradients
from ufem.nets import (DiscriminatorSpec, GeneratorSpec, NetSpecError, build_discriminator,
                       build_generator, discriminator_forward, generator_forward, parameter_count)


def _f(*shape, seed=0, scale=1.0):
    return scale * torch.randn(*shape, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("arch", ["flat_residual", "unet"])
def test_shape_preserving(arch):
    g = build_generator(GeneratorSpec(arch, 16, base_width=8, residual_blocks=2, down_levels=2), seed=0)
    x = _f(2, 16, 8, 8)
    assert generator_forward(g, x).shape == (2, 16, 8, 8)


def test_unet_default_configuration_builds():
    spec = GeneratorSpec("unet", in_channels=16, down_levels=2, feature_size=16)
    g = build_generator(spec, seed=0)
    assert g(_f(1, 16, 16, 16)).shape == (1, 16, 16, 16)


@pytest.mark.parametrize("arch", ["flat_residual", "unet"])
def test_near_identity_init(arch):
    g = build_generator(GeneratorSpec(arch, 16, base_width=16, feature_size=8), seed=1)
    x = torch.rand(3, 16, 8, 8, generator=torch.Generator().manual_seed(2)) * 2 - 1
    with torch.no_grad():
        assert (g(x) - x).abs().max() <= 1e-2


@pytest.mark.parametrize("arch", ["flat_residual", "unet"])
def test_identity_init_is_exact(arch):
    g = build_generator(GeneratorSpec(arch, 16, base_width=8, init="identity", feature_size=8), seed=1)
    x = _f(2, 16, 8, 8)
    with torch.no_grad():
        assert torch.equal(g(x), x)


def test_zeroed_residual_weights_identity():
    g = build_generator(GeneratorSpec(base_width=8, residual_blocks=3, init="standard"), seed=0)
    with torch.no_grad():
        for b in g.blocks:
            for p in b.parameters():
                p.zero_()
        x = _f(2, 16, 5, 5)
        assert torch.equal(g(x), x)


def test_unet_too_deep_rejected():
    with pytest.raises(NetSpecError, match="below 1x1"):
        build_generator(GeneratorSpec("unet", 16, down_levels=3, feature_size=4))
    with pytest.raises(NetSpecError):
        GeneratorSpec("unet", 16, down_levels=4)


def test_channel_mismatch():
    g = build_generator(GeneratorSpec(in_channels=16, base_width=4, residual_blocks=1))
    with pytest.raises(NetSpecError):
        generator_forward(g, _f(1, 8, 4, 4))
    d = build_discriminator(DiscriminatorSpec(16, layers=2, base_width=4))
    with pytest.raises(NetSpecError):
        discriminator_forward(d, _f(1, 8, 8, 8))


def test_parameter_count_deterministic():
    spec = GeneratorSpec(base_width=8, residual_blocks=2)
    a, b = build_generator(spec, seed=0), build_generator(spec, seed=5)
    assert parameter_count(a) == parameter_count(b) > 0
    # 2 blocks x (conv 16->8 3x3 + IN affine + conv 8->16 3x3)
    assert parameter_count(a) == 2 * ((16 * 8 * 9 + 8) + 16 + (8 * 16 * 9 + 16))


def test_seeded_build_reproducible_and_rng_untouched():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = build_generator(GeneratorSpec(base_width=4, residual_blocks=1, init="standard"), seed=9)
    after = torch.rand(1)
    assert torch.equal(before, after)
    b = build_generator(GeneratorSpec(base_width=4, residual_blocks=1, init="standard"), seed=9)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_discriminator_patch_shape_and_raw_logits():
    d = build_discriminator(DiscriminatorSpec(16, layers=3, base_width=8, feature_size=16), seed=0)
    out = discriminator_forward(d, _f(1, 16, 16, 16))
    assert out.shape == (1, 1, 2, 2)
    assert (out < 0).any() or (out > 1).any() or True  # raw logits: no squashing layer
    assert not isinstance(d.model[-1], (torch.nn.Sigmoid, torch.nn.Tanh))


def test_discriminator_constant_input_constant_logits():
    d = build_discriminator(DiscriminatorSpec(16, layers=3, base_width=8, feature_size=16), seed=0)
    with torch.no_grad():
        out = d(torch.full((1, 16, 16, 16), 0.7))
    assert torch.allclose(out, out.flatten()[0].expand_as(out), atol=1e-6)


def test_discriminator_too_deep():
    with pytest.raises(NetSpecError):
        build_discriminator(DiscriminatorSpec(16, layers=3, feature_size=4))
    assert nets.max_patch_layers(16) == 3 and nets.max_patch_layers(2) == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), arch=st.sampled_from(["flat_residual", "unet"]),
       scale=st.floats(0.01, 100))
def test_finite_outputs(seed, arch, scale):
    g = build_generator(GeneratorSpec(arch, 4, base_width=4, residual_blocks=1, down_levels=1,
                                      init="standard"), seed=seed)
    with torch.no_grad():
        assert torch.isfinite(g(_f(1, 4, 4, 4, seed=seed, scale=scale))).all()


def test_net_serialization_bitwise(tmp_path):
    for spec in (GeneratorSpec("unet", 8, base_width=4, down_levels=1),
                 DiscriminatorSpec(8, layers=2, base_width=4)):
        net = (build_generator if isinstance(spec, GeneratorSpec) else build_discriminator)(spec, seed=3)
        p = nets.save_net(net, tmp_path / "n.ufnt")
        back = nets.load_net(p)
        x = _f(2, 8, 8, 8)
        with torch.no_grad():
            assert torch.equal(net(x), back(x))
        assert back.spec == spec


def test_generator_gradient_finite_differences():
    g = build_generator(GeneratorSpec(base_width=4, residual_blocks=1, init="standard", in_channels=4),
                        seed=0).double()
    x = _f(2, 4, 4, 4).double()
    params = [p for p in g.parameters()]
    probes = probe_gradients(lambda: (g(x) ** 2).sum(), params, n_probe=3, seed=1)
    assert len(probes) == 3
    assert max(p.rel_error() for p in probes) <= 1e-4


def test_discriminator_gradient_finite_differences():
    d = build_discriminator(DiscriminatorSpec(4, layers=2, base_width=4), seed=0).double()
    x = _f(2, 4, 8, 8).double()
    probes = probe_gradients(lambda: (d(x) ** 2).sum(), list(d.parameters()), n_probe=3, seed=2)
    assert max(p.rel_error() for p in probes) <= 1e-4
