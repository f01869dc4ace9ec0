import math

import pytest
import torch

from ufem import stage2, tensorio
from ufem.backbone import BackboneError
from ufem.data import DegradationSpec, degrade_batch, to_tensor
from ufem.runtime import identity_generator
from ufem.stage1 import Stage1Config, init_stage1, tap_features
from ufem.stage2 import Stage2Checkpoint, Stage2Config, init_stage2, train_stage2
from ufem.synth import make_dataset

SMALL = dict(g_base_width=8, g_residual_blocks=1, d_base_width=8)


@pytest.fixture(scope="module")
def images():
    x, _ = make_dataset(1, seed=3)
    x2, _ = make_dataset(1, seed=4)
    return to_tensor(x[:8]), degrade_batch(to_tensor(x2[:8]), DegradationSpec("fog", 3, 5))


@pytest.fixture(scope="module")
def g_d2c(init_handle):
    return init_stage1(Stage1Config(seed=2, **SMALL), init_handle, "block1").g_d2c


def test_config_defaults_and_validation():
    c = Stage2Config()
    assert (c.lambda_corr, c.lambda_adv, c.lambda_content) == (1000.0, 5.0, 10.0)
    assert c.layer_weights == (1.0, 2.0, 3.0, 4.0)
    assert c.content_anchor == "stage1"
    with pytest.raises(ValueError):
        Stage2Config(lambda_adv=-1)
    with pytest.raises(ValueError):
        Stage2Config(correlation_taps=("block1", "block2"))
    with pytest.raises(ValueError):
        Stage2Config(content_anchor="nowhere")
    assert Stage2Config.from_dict(c.to_dict()) == c


def test_tap_resolution(init_handle):
    taps, content = Stage2Config().resolve_taps(init_handle, "block1")
    assert [t.name for t in taps] == ["block1", "block2", "block3", "block4"]
    assert content.name == "block4"
    with pytest.raises(BackboneError):
        Stage2Config(correlation_taps=("block2", "block1"), layer_weights=(1, 2)).resolve_taps(init_handle, "block1")
    with pytest.raises(BackboneError):
        Stage2Config().resolve_taps(init_handle, "block2")


def test_smoke_run_finite(init_handle, images, g_d2c):
    ck = train_stage2(Stage2Config(epochs=2, batch=2, **SMALL), *images, init_handle, g_d2c, "block1")
    assert ck.step == 8
    for rec in ck.log:
        vals = [v for x in rec.values() for v in (x if isinstance(x, list) else [x])]
        assert all(math.isfinite(v) for v in vals)
        assert rec["corr"] >= 0 and rec["content"] >= 0 and rec["adv"] >= 0


def test_zero_steps_equals_init(init_handle, images, g_d2c):
    cfg = Stage2Config(epochs=0, **SMALL)
    ck = train_stage2(cfg, *images, init_handle, g_d2c, "block1")
    assert ck.step == 0 and ck.digest() == init_stage2(cfg, init_handle, "block1").digest()


def test_identity_e2c_has_zero_content_loss(init_handle, images, g_d2c):
    ck = init_stage2(Stage2Config(g_init="identity", **SMALL), init_handle, "block1")
    t0 = init_handle.tap("block1")
    with torch.no_grad():
        ef = g_d2c(tap_features(init_handle, images[1][:3], t0))
        anchor = stage2.push(init_handle, ef, t0, init_handle.tap(ck.content_tap))
        clear = tap_features(init_handle, images[0][:3], t0)
        grams = [stage2.gram_matrix(f).mean(0) for f in
                 stage2._walk(init_handle, clear, t0, [init_handle.tap(n) for n in ck.correlation_taps])]
        g = stage2.stage2_generator_losses(ck, init_handle, ef, grams, anchor)
    assert g["content"].item() == 0.0


def test_frozen_inputs_untouched(init_handle, images, g_d2c):
    bb, gd = init_handle.parameters_digest(), tensorio.state_digest(g_d2c.state_dict())
    train_stage2(Stage2Config(epochs=1, batch=4, **SMALL), *images, init_handle, g_d2c, "block1")
    assert init_handle.parameters_digest() == bb
    assert tensorio.state_digest(g_d2c.state_dict()) == gd


def _fixture_corr(handle, ck, clear, deg):
    # correlation loss of the whole degraded fixture against the whole-clear batch mean
    t0 = handle.tap(ck.enhancement_tap)
    taps = [handle.tap(n) for n in ck.correlation_taps]
    with torch.no_grad():
        xc, ef = tap_features(handle, clear, t0), tap_features(handle, deg, t0)
        target = [stage2.gram_matrix(f, ck.config.gram_normalization).mean(0)
                  for f in stage2._walk(handle, xc, t0, taps)]
        anchor = stage2.push(handle, ef, t0, handle.tap(ck.content_tap))
        return stage2.stage2_generator_losses(ck, handle, ef, target, anchor)["corr"].item()


def test_micro_run_reduces_correlation(init_handle, images):
    clear, deg = images[0][:4], images[1][:4]
    cfg = Stage2Config(epochs=100, batch=2, augment=False, schedule="constant", seed=1, **SMALL)
    initial = _fixture_corr(init_handle, init_stage2(cfg, init_handle, "block1"), clear, deg)
    ck = train_stage2(cfg, clear, deg, init_handle, identity_generator(16), "block1")
    assert ck.step == 200
    final = _fixture_corr(init_handle, ck, clear, deg)
    assert final <= 0.7 * initial, (initial, final)


def test_deterministic_and_roundtrip(init_handle, images, g_d2c, tmp_path):
    cfg = Stage2Config(epochs=1, batch=4, seed=5, **SMALL)
    a = train_stage2(cfg, *images, init_handle, g_d2c, "block1")
    b = train_stage2(cfg, *images, init_handle, g_d2c, "block1")
    assert a.log == b.log
    pa, pb = a.save(tmp_path / "a.ufnt"), b.save(tmp_path / "b.ufnt")
    assert pa.read_bytes() == pb.read_bytes()
    back = Stage2Checkpoint.load(pa)
    assert back.digest() == a.digest() and back.config == a.config
    assert back.correlation_taps == a.correlation_taps and back.content_tap == a.content_tap
    x = tap_features(init_handle, images[1], init_handle.tap("block1"))
    with torch.no_grad():
        assert torch.equal(a.g_e2c(x), back.g_e2c(x))
        assert torch.equal(a.d_clear(x), back.d_clear(x))


@pytest.mark.parametrize("opt", [dict(content_anchor="clear"), dict(gram_target="paired"),
                                 dict(correlation_mode="kl"), dict(gram_normalization="per_element")])
def test_variants_run(init_handle, images, g_d2c, opt):
    ck = train_stage2(Stage2Config(epochs=1, batch=4, **SMALL, **opt), *images, init_handle, g_d2c, "block1")
    assert all(math.isfinite(r["total_G"]) for r in ck.log)
