import numpy as np
import pytest

from qarvd.quant import BitwidthScheme
from qarvd.toy_model import (
    DEFAULT_KEEP_LIST, CaptureRunner, FullPrecisionRunner, MinMaxRunner, ModelConfigError,
    OutlierInjection, QuantMode, ToyModelConfig, build_model, chunk_mse, is_kept, latent_mse,
    layer_names, layer_shape, load_model, rollout, save_model,
)

W8A8 = BitwidthScheme(8, 8)


def test_layer_registry():
    cfg = ToyModelConfig()
    names = layer_names(cfg)
    assert names[0] == "time_embed" and names[-1] == "head"
    assert len(names) == 2 + 10 * cfg.blocks
    assert layer_shape(cfg, "block0.ffn.0") == (256, 64)
    assert layer_shape(cfg, "block1.ffn.2") == (64, 256)
    assert layer_shape(cfg, "time_embed") == (64, 16)


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ToyModelConfig(chunks=1)
    with pytest.raises(ModelConfigError):
        ToyModelConfig(dim=0)
    with pytest.raises(ModelConfigError):
        ToyModelConfig(outliers=(("ffn.2", 0.0, 8.0),))
    with pytest.raises(ModelConfigError):
        build_model(ToyModelConfig(outliers=(("nothing", 0.1, 2.0),)))
    cfg = ToyModelConfig(outliers=(("ffn.0", 0.1, 3.0),))
    assert ToyModelConfig.from_dict(cfg.to_dict()) == cfg


def test_injected_outliers(toy_model):
    assert set(toy_model.injected) == {"block0.ffn.2", "block1.ffn.2"}
    for name, idx in toy_model.injected.items():
        assert idx.size == round(0.03 * 256)
        norms = np.linalg.norm(toy_model.weights[name], axis=0)
        assert norms[idx].min() > 3 * np.median(norms)
    assert OutlierInjection("ffn.2", 0.1, 2).matches("block3.ffn.2")


def test_build_is_deterministic():
    a, b = build_model(), build_model()
    for n in a.layer_names:
        np.testing.assert_array_equal(a.weights[n], b.weights[n])
    c = build_model(ToyModelConfig(seed=1))
    assert not np.array_equal(a.weights["head"], c.weights["head"])


def test_keep_list_matching():
    assert is_kept("time_embed", DEFAULT_KEEP_LIST)
    assert is_kept("head", DEFAULT_KEEP_LIST)
    assert not is_kept("block0.ffn.2", DEFAULT_KEEP_LIST)
    assert is_kept("block0.ffn.2", ("block0",))
    assert is_kept("block1.ffn.0", ("*.ffn.*",))


def test_rollout_shapes_and_determinism(toy_model):
    r1 = rollout(toy_model, 3)
    r2 = rollout(toy_model, 3)
    cfg = toy_model.config
    assert r1.latents.shape == (cfg.chunks, cfg.tokens_per_chunk, cfg.dim)
    np.testing.assert_array_equal(r1.latents, r2.latents)
    assert latent_mse(r1, rollout(toy_model, 4)) > 0


def test_quantized_chunk_leaves_earlier_chunks_identical(toy_model):
    ref = rollout(toy_model, 0)
    runner = MinMaxRunner(toy_model, W8A8)
    for i in (1, 4, 7):
        q = rollout(toy_model, 0, QuantMode.quantize_only_chunk(i, W8A8), runner)
        per = chunk_mse(ref, q)
        assert np.all(per[:i - 1] == 0)
        assert per[i - 1] > 0


def test_quant_mode_errors(toy_model):
    with pytest.raises(ValueError):
        rollout(toy_model, 0, QuantMode.quantize_only_chunk(8, W8A8))
    with pytest.raises(ValueError):
        rollout(toy_model, 0, QuantMode.quantize_all())
    with pytest.raises(ValueError):
        QuantMode("bogus").quantized(1)


def test_lossless_scheme_matches_full_precision(toy_model):
    lossless = BitwidthScheme.parse("fp")
    q = rollout(toy_model, 1, QuantMode.quantize_all(lossless))
    np.testing.assert_array_equal(q.latents, rollout(toy_model, 1).latents)


def test_minmax_runner_keeps_keep_list(toy_model):
    r = MinMaxRunner(toy_model, W8A8)
    x = np.random.default_rng(0).standard_normal((3, 64))
    np.testing.assert_array_equal(r("head", x), toy_model.linear("head", x))
    assert not np.array_equal(r("block0.self_attn.q", x), toy_model.linear("block0.self_attn.q", x))


def test_capture_records_per_chunk(toy_model):
    r = rollout(toy_model, 0, capture=True, capture_layers=["block0.cross_attn.k", "head"])
    assert set(r.captures) == {"block0.cross_attn.k", "head"}
    cfg = toy_model.config
    assert sorted(r.captures["head"]) == list(range(1, cfg.chunks + 1))
    assert r.captures["head"][1].shape == (cfg.steps * cfg.tokens_per_chunk, cfg.dim)
    cap = CaptureRunner(FullPrecisionRunner(toy_model), ["head"])
    cap.chunk = 1
    cap("block0.ffn.0", np.ones((1, 64)))
    assert cap.store == {}


def test_context_window_limits_history():
    m = build_model(ToyModelConfig(context_window=1))
    full = build_model()
    a, b = rollout(m, 0).latents, rollout(full, 0).latents
    np.testing.assert_array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2:], b[2:])


def test_save_load_roundtrip(tmp_path, toy_model):
    p = tmp_path / "m.qarm"
    save_model(toy_model, p)
    back = load_model(p)
    assert back.config == toy_model.config
    for n in toy_model.layer_names:
        np.testing.assert_array_equal(back.weights[n], toy_model.weights[n])
    for n, idx in toy_model.injected.items():
        np.testing.assert_array_equal(back.injected[n], idx)
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_model(bad)
