import pytest
import torch
import torch.nn as nn

from ufem import backbone, tensorio
from ufem.backbone import BackboneError, extract_features, forward_from, insert_module, load_backbone


def _images(n=4, res=32, seed=0):
    return torch.rand(n, 3, res, res, generator=torch.Generator().manual_seed(seed))


def test_tinyvgg_taps_and_classes(init_handle):
    h = init_handle
    assert [t.name for t in h.tap_points] == ["block1", "block2", "block3", "block4"]
    assert h.class_count == 10
    assert [t.output_shape for t in h.tap_points] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert all(a < b for a, b in zip(h.tap_points, h.tap_points[1:]))
    n = sum(p.numel() for p in h.net.parameters())
    assert 250_000 < n < 350_000


def test_bundled_weights_load(bundled):
    assert bundled.frozen and bundled.class_count == 10
    assert all(not p.requires_grad for p in bundled.net.parameters())


def test_resolution_scales_tap_shapes():
    h32 = load_backbone("tinyvgg", "init", 32)
    h64 = load_backbone("tinyvgg", "init", 64)
    for a, b in zip(h32.tap_points, h64.tap_points):
        assert b.output_shape == (a.channels, 2 * a.spatial[0], 2 * a.spatial[1])


def test_unknown_architecture():
    with pytest.raises(BackboneError, match="unknown architecture"):
        load_backbone("resnet9000", "init")


def test_wrong_tensor_shape_named(tmp_path, init_handle):
    sd = dict(init_handle.net.state_dict())
    bad = next(k for k in sd if k.endswith("weight"))
    sd[bad] = torch.zeros(3, 3)
    p = tensorio.save(tmp_path / "bad.ufnt", sd, "tinyvgg")
    with pytest.raises(BackboneError, match=bad.replace(".", r"\.")):
        load_backbone("tinyvgg", p)


def test_missing_and_unexpected_tensors(tmp_path, init_handle):
    sd = dict(init_handle.net.state_dict())
    first = next(iter(sd))
    sd.pop(first)
    with pytest.raises(BackboneError, match=first.replace(".", r"\.")):
        load_backbone("tinyvgg", tensorio.save(tmp_path / "m.ufnt", sd, "tinyvgg"))
    sd = dict(init_handle.net.state_dict(), extra=torch.zeros(1))
    with pytest.raises(BackboneError, match="extra"):
        load_backbone("tinyvgg", tensorio.save(tmp_path / "u.ufnt", sd, "tinyvgg"))


def test_save_load_roundtrip(tmp_path, init_handle):
    p = init_handle.save(tmp_path / "w.ufnt")
    h = load_backbone("tinyvgg", p)
    assert h.parameters_digest() == init_handle.parameters_digest()
    x = _images()
    assert torch.equal(h.forward(x), init_handle.forward(x))


def test_extract_shape_and_determinism(init_handle):
    x = _images()
    f1 = extract_features(init_handle, x, "block1")
    f2 = extract_features(init_handle, x, "block1")
    assert f1.data.shape == (4, 16, 16, 16)
    assert torch.equal(f1.data, f2.data)
    assert (f1.data >= 0).all() and torch.isfinite(f1.data).all()


def test_extract_errors(init_handle):
    with pytest.raises(BackboneError, match="unknown tap"):
        extract_features(init_handle, _images(), "conv9")
    with pytest.raises(BackboneError, match="resolution"):
        extract_features(init_handle, _images(res=28), "block1")
    other = load_backbone("tinyvgg", "init", 64)
    with pytest.raises(BackboneError):
        extract_features(init_handle, _images(), other.tap_points[0])


def test_forward_from_composition(init_handle):
    h = init_handle
    x = _images(8)
    full = h.forward(x)
    for t in h.tap_points:
        f = extract_features(h, x, t)
        assert (forward_from(h, f, t, "logits") - full).abs().max() <= 1e-6
    for a, b in zip(h.tap_points, h.tap_points[1:]):
        via = forward_from(h, extract_features(h, x, a), a, b)
        assert (via - extract_features(h, x, b).data).abs().max() <= 1e-6


def test_forward_from_ordering_and_finiteness(init_handle):
    h = init_handle
    f3 = extract_features(h, _images(), "block3")
    with pytest.raises(BackboneError, match="ordering"):
        forward_from(h, f3, "block3", "block1")
    with pytest.raises(BackboneError):
        forward_from(h, f3, "block2", "logits")
    z = torch.zeros(2, 32, 8, 8)
    assert torch.isfinite(forward_from(h, z, "block2")).all()


def test_default_insertion_tap(init_handle):
    assert init_handle.default_insertion_tap().name == "block1"


def test_identity_insertion_bitwise(init_handle):
    x = _images(10, seed=3)
    aug = insert_module(init_handle, nn.Identity(), "block1")
    assert torch.equal(aug(x), init_handle.forward(x))


def test_shape_changing_enhancer_rejected(init_handle):
    with pytest.raises(BackboneError, match="changes feature shape"):
        insert_module(init_handle, nn.MaxPool2d(2), "block1")


def test_feature_map_domain_validation(init_handle):
    t = init_handle.tap("block1")
    with pytest.raises(ValueError):
        backbone.FeatureMap(torch.zeros(1, 16, 16, 16), t, "foggy")
    with pytest.raises(ValueError):
        backbone.FeatureMap(torch.full((1, 16, 16, 16), float("nan")), t, "clear")


def test_vgg16_taps_follow_relus():
    h = load_backbone("vgg16", "init", 64)
    names = [t.name for t in h.tap_points]
    assert names[:4] == ["conv1_1", "conv1_2", "conv2_1", "conv2_2"]
    assert names[-1] == "conv5_3" and len(names) == 13
    assert h.tap("conv1_2").output_shape == (64, 64, 64)
    assert h.default_insertion_tap().name == "conv2_1"
