import dataclasses

import numpy as np
import pytest

from helpers import oracle_linear, random_layer
from qarvd.dual_scale import build_plan
from qarvd.engine import (
    MAX_K, EngineError, QuantizedLayer, fakequant_linear, header_nbytes, int_linear,
    kernel_a_quantize_activation, kernel_b_gemm_dequant, load_quantized, model_from_bytes,
    model_to_bytes, permute_activations, quantize_minmax, save_quantized, size_report, to_bf16,
)
from qarvd.outliers import analyze_layer
from qarvd.quant import BitwidthScheme, QuantParams, init_scale_minmax
from qarvd.tensor_core import DimensionError, TensorFormatError
from qarvd.toy_model import DEFAULT_KEEP_LIST, is_kept, rollout

W8A8 = BitwidthScheme(8, 8)


def _hand_layer(act):
    w = np.array([[1.0, 1.0, 1.0, 1.0]])
    plan = build_plan(w, [1, 3], 8, "hand")
    plan = dataclasses.replace(
        plan,
        params_normal=QuantParams.symmetric_from_scale(np.array([0.5]), 8, axis=0),
        params_outlier=QuantParams.symmetric_from_scale(np.array([0.25]), 8, axis=0),
    )
    codes = np.array([[1, 2, -1, 3]])
    return QuantizedLayer.from_weight("hand", w, plan, act, 8, codes=codes)


def test_hand_case_two_plus_two():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    sym = _hand_layer(QuantParams.symmetric_from_scale(1.0, 8))
    np.testing.assert_array_equal(sym.codes.data, [[2, 3, 1, -1]])
    np.testing.assert_array_equal(sym.colsums, [[5], [0]])
    # outlier group 0.25 * (2*2 + 4*3), normal group 0.5 * (1*1 - 3*1)
    assert int_linear(sym, x)[0, 0] == 3.0
    asym = _hand_layer(QuantParams(8, 1.0, 3, -128, 127, symmetric=False))
    assert int_linear(asym, x)[0, 0] == 3.0
    np.testing.assert_array_equal(asym.dequantized_weight(), [[0.5, 0.5, -0.5, 0.75]])


def test_permute_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 10))
    plan = build_plan(rng.standard_normal((2, 10)), [7, 2, 4], 4)
    got = permute_activations(x, plan)
    for r in range(3):
        expect = [x[r, j] for j in plan.outlier_indices] + [x[r, j] for j in range(10)
                                                            if j not in (2, 4, 7)]
        np.testing.assert_array_equal(got[r], expect)
    with pytest.raises(DimensionError):
        permute_activations(np.ones((1, 9)), plan)


@pytest.mark.parametrize("seed", range(5))
def test_random_layers_match_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        layer, x = random_layer(rng)
        np.testing.assert_array_equal(int_linear(layer, x), oracle_linear(layer, x))
        np.testing.assert_allclose(int_linear(layer, x), fakequant_linear(layer, x),
                                   rtol=1e-9, atol=1e-12)


def test_kernel_b_checks():
    layer, x = random_layer(np.random.default_rng(9))
    with pytest.raises(EngineError):
        kernel_b_gemm_dequant(np.zeros((1, layer.d_in + 1), np.int64), layer)
    xq = kernel_a_quantize_activation(x, init_scale_minmax(x, 6 if layer.act.bits == 8 else 8))
    with pytest.raises(EngineError):
        kernel_b_gemm_dequant(xq, layer)
    pres = QuantizedLayer.preserve("p", np.ones((2, 3)))
    with pytest.raises(EngineError):
        kernel_b_gemm_dequant(np.zeros((1, 3), np.int64), pres)


def test_layer_validation():
    w = np.ones((2, 4))
    plan = build_plan(w, [], 8)
    with pytest.raises(EngineError):
        QuantizedLayer("x", 2, 4)
    with pytest.raises(EngineError):
        QuantizedLayer.from_weight("x", w, plan,
                                   QuantParams.symmetric_from_scale([1.0, 1.0], 8, axis=0), 8)
    with pytest.raises(EngineError):
        QuantizedLayer("x", 2, 4, preserved=True, weight=np.ones((4, 2)))
    big = np.ones((1, MAX_K + 1))
    with pytest.raises(EngineError):
        QuantizedLayer.from_weight("x", big, build_plan(big, [], 8),
                                   QuantParams.symmetric_from_scale(1.0, 8), 8)


def test_scales_frozen_to_float32():
    layer, _ = random_layer(np.random.default_rng(4))
    s = layer.group_scales()
    np.testing.assert_array_equal(s, s.astype(np.float32).astype(np.float64))
    assert float(layer.act.scale) == float(np.float32(layer.act.scale))


def test_preserved_layer_is_bf16():
    w = np.array([[1.0 + 2 ** -10, 3.0]])
    layer = QuantizedLayer.preserve("p", w)
    np.testing.assert_array_equal(layer.weight, to_bf16(w))
    assert layer.weight[0, 0] == 1.0
    np.testing.assert_array_equal(int_linear(layer, np.ones((1, 2))), [[4.0]])


def _toy_qmodel(model, reports=True):
    names = [n for n in model.layer_names if not is_kept(n, DEFAULT_KEEP_LIST)]
    r = rollout(model, 0, capture=True, capture_layers=names)
    acts = {n: init_scale_minmax(np.vstack(list(r.captures[n].values())), 8) for n in names}
    reps = {n: analyze_layer(n, model.weights[n]).aligned_outliers for n in names} if reports else None
    return quantize_minmax(model, W8A8, acts, reports=reps)


def test_serialization_roundtrip(tmp_path, toy_model):
    qm = _toy_qmodel(toy_model)
    assert any(l.split for l in qm.layers.values())
    buf = model_to_bytes(qm)
    back = model_from_bytes(buf)
    assert model_to_bytes(back) == buf
    x = np.random.default_rng(0).standard_normal((4, 64))
    for name, layer in qm.layers.items():
        if layer.d_in == 64:
            np.testing.assert_array_equal(int_linear(back.layers[name], x), int_linear(layer, x))
    p = tmp_path / "m.qarq"
    assert save_quantized(qm, p) == len(buf)
    assert model_to_bytes(load_quantized(p)) == buf


def test_serialization_rejects_bad_input(toy_model):
    buf = model_to_bytes(_toy_qmodel(toy_model, reports=False))
    with pytest.raises(TensorFormatError):
        model_from_bytes(buf + b"\x00")
    with pytest.raises(TensorFormatError):
        model_from_bytes(buf[:-3])
    with pytest.raises(TensorFormatError):
        model_from_bytes(b"ABCD" + buf[4:])
    with pytest.raises(TensorFormatError):
        header_nbytes(b"ABCD" + buf[4:])


@pytest.mark.parametrize("dual", [False, True])
def test_size_report_matches_payload(toy_model, dual):
    qm = _toy_qmodel(toy_model, reports=dual)
    buf = model_to_bytes(qm)
    rep = size_report(qm)
    assert rep.quantized_bytes == len(buf) - header_nbytes(buf)
    n_params = sum(w.size for w in toy_model.weights.values())
    assert rep.baseline_bytes == 2 * n_params
    d = rep.to_dict()
    assert d["ratio"] == rep.ratio and len(d["layers"]) == len(qm.layers)


def test_engine_runners_agree_on_rollout(toy_model):
    from qarvd.toy_model import QuantMode

    qm = _toy_qmodel(toy_model)
    mode = QuantMode.quantize_all()
    a = rollout(toy_model, 2, mode, qm.runner("int")).latents
    b = rollout(toy_model, 2, mode, qm.runner("fakequant")).latents
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)
    with pytest.raises(ValueError):
        qm.runner("gpu")
    assert set(qm.shell().weights) == set(toy_model.weights)
