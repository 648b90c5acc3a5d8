import ml_dtypes
import numpy as np
import pytest
from conftest import tiny_model
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from hybridlm.config import preset
from hybridlm.engine import Session, prefill
from hybridlm.errors import InputError, NumericError
from hybridlm.params import init_params
from hybridlm.quant import (Fp8Spec, calibrate_kv_scale, calibration_error, code_table,
                            fp8_decode, fp8_encode, gptq_quantize, max_finite, pack_int4,
                            quantize_rtn, unpack_int4)
from hybridlm.quant.apply import (calibrate_kv, compression_ratio, eligible_names, is_eligible,
                                  quantize_checkpoint)

# --------------------------------------------------------------------------- int4


def test_pack_unpack_all_bytes():
    allbytes = np.arange(256, dtype=np.uint8)
    codes = unpack_int4(allbytes.tobytes(), 512)
    assert pack_int4(codes) == allbytes.tobytes()


def test_constant_tensor_exact():
    w = np.full((3, 10), 2.5, np.float32)
    q = quantize_rtn(w, 4)
    assert np.array_equal(q.dequantize(), w)
    assert np.all(q.scales == 1.0) and np.all(q.zeros == 2.5)


def test_endpoints_map_to_extreme_codes():
    w = np.array([[0.0, 15.0, 7.0, 3.0]], np.float32)
    q = quantize_rtn(w, 4)
    assert list(q.code_array()[0]) == [0, 15, 7, 3]
    assert np.array_equal(q.dequantize(), w)


def test_rtn_half_step_bound():
    w = np.random.default_rng(0).standard_normal((16, 64)).astype(np.float32)
    q = quantize_rtn(w, 16)
    scale = np.repeat(q.scales, 16, axis=1)
    assert np.all(np.abs(q.dequantize() - w) <= scale / 2 + 1e-6)
    assert q.code_array().max() <= 15


def test_rtn_empty_rejected():
    with pytest.raises(InputError):
        quantize_rtn(np.zeros((0, 4), np.float32))


def test_short_last_group():
    w = np.random.default_rng(1).standard_normal((4, 10)).astype(np.float32)
    q = quantize_rtn(w, 4)
    assert q.scales.shape == (4, 3)
    assert q.dequantize().shape == (4, 10)


def test_gptq_identity_hessian_equals_rtn():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((8, 16)).astype(np.float32)
    x = np.eye(16)
    g = gptq_quantize(w, x, 16)
    r = quantize_rtn(w, 16)
    assert abs(calibration_error(w, g.dequantize(), x) - calibration_error(w, r.dequantize(), x)) <= 1e-6


def test_gptq_beats_rtn_on_correlated_inputs():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((32, 32)).astype(np.float32)
    x = rng.standard_normal((256, 8)) @ rng.standard_normal((8, 32)) + 0.1 * rng.standard_normal((256, 32))
    g = gptq_quantize(w, x, 16).dequantize()
    r = quantize_rtn(w, 16).dequantize()
    assert calibration_error(w, g, x) <= calibration_error(w, r, x) + 1e-6


def test_gptq_singular_hessian():
    with pytest.raises(NumericError):
        gptq_quantize(np.ones((2, 4), np.float32), np.zeros((3, 4)), 4)


def test_eligibility_rules():
    assert not is_eligible("layers.0.mamba.conv_weight", (2048, 4))
    assert not is_eligible("layers.0.mlp.gate", (8, 8))
    assert is_eligible("layers.0.mlp.gate", (128, 64))
    ck = init_params(preset("tiny-mama"))
    names = eligible_names(ck)
    assert all("conv" not in n and "norm" not in n for n in names)


def test_tiny_mama_compression_band():
    ck = init_params(preset("tiny-mama"))
    calib = np.random.default_rng(0).integers(0, 256, 128)
    q = quantize_checkpoint(ck, "gptq", calib)
    assert 0.25 <= compression_ratio(ck, q) <= 0.35


# --------------------------------------------------------------------------- fp8


@pytest.mark.parametrize("fmt", ["E4M3", "E5M2"])
def test_code_table_matches_bitfield_definition(fmt):
    assert np.array_equal(code_table(fmt), oracles.fp8_enumerate(fmt), equal_nan=True)


def test_max_finite_values():
    assert max_finite("E4M3") == 448.0
    assert max_finite("E5M2") == 57344.0


def test_one_round_trips():
    spec = Fp8Spec("E4M3", 1.0)
    assert fp8_decode(fp8_encode(np.array([1.0]), spec), spec)[0] == 1.0


@pytest.mark.parametrize("fmt,mdt", [("E4M3", ml_dtypes.float8_e4m3fn), ("E5M2", ml_dtypes.float8_e5m2)])
def test_encode_matches_reference_library(fmt, mdt):
    rng = np.random.default_rng(0)
    m = max_finite(fmt)
    x = np.concatenate([rng.uniform(-m, m, 50_000), rng.standard_normal(50_000)])
    ours = fp8_decode(fp8_encode(x, Fp8Spec(fmt)), Fp8Spec(fmt), np.float64)
    ref = x.astype(mdt).astype(np.float64)
    assert np.array_equal(ours, ref)


def test_encode_matches_bruteforce_nearest():
    rng = np.random.default_rng(3)
    x = rng.uniform(-500, 500, 400)
    ours = fp8_decode(fp8_encode(x, Fp8Spec("E4M3")), Fp8Spec("E4M3"), np.float64)
    assert np.array_equal(ours, oracles.fp8_nearest(x, "E4M3"))


def test_half_ulp_bound():
    x = np.random.default_rng(4).uniform(-448, 448, 20_000)
    y = fp8_decode(fp8_encode(x, Fp8Spec("E4M3")), Fp8Spec("E4M3"), np.float64)
    grid = np.unique(np.abs(code_table("E4M3")[np.isfinite(code_table("E4M3"))]))
    idx = np.clip(np.searchsorted(grid, np.abs(x)), 1, len(grid) - 1)
    ulp = grid[idx] - grid[idx - 1]
    assert np.all(np.abs(y - x) <= ulp / 2 + 1e-12)


def test_nan_encoded_and_surfaced():
    for fmt in ("E4M3", "E5M2"):
        spec = Fp8Spec(fmt)
        assert np.isnan(fp8_decode(fp8_encode(np.array([np.nan]), spec), spec)[0])


@given(arrays(np.float64, 30, elements=st.floats(-1e5, 1e5)), st.sampled_from(["E4M3", "E5M2"]),
       st.floats(0.01, 100))
def test_decode_encode_idempotent_and_saturating(x, fmt, scale):
    spec = Fp8Spec(fmt, scale)
    once = fp8_decode(fp8_encode(x, spec), spec, np.float64)
    twice = fp8_decode(fp8_encode(once, spec), spec, np.float64)
    assert np.array_equal(once, twice)
    assert np.all(np.abs(once) <= max_finite(fmt) * scale * (1 + 1e-12))


@pytest.mark.parametrize("fmt", ["E4M3", "E5M2"])
def test_encode_monotone(fmt):
    x = np.linspace(-1.2 * max_finite(fmt), 1.2 * max_finite(fmt), 200_001)
    y = fp8_decode(fp8_encode(x, Fp8Spec(fmt)), Fp8Spec(fmt), np.float64)
    assert np.all(np.diff(y) >= 0)


def test_calibration_scales():
    assert calibrate_kv_scale(np.zeros(10), "E4M3").scale == 1.0
    assert calibrate_kv_scale(np.array([448.0, -3.0]), "E4M3").scale == 1.0
    x = np.random.default_rng(8).standard_normal(5000) * 7
    spec = calibrate_kv_scale(x, "E4M3")
    codes = fp8_encode(x, spec)
    top = np.abs(fp8_decode(codes, spec, np.float64)) >= max_finite("E4M3") * spec.scale * (1 - 1e-9)
    assert np.sum(top) == np.sum(np.abs(x) == np.abs(x).max())


def test_fp8_kv_cache_logit_perturbation():
    ck = init_params(preset("tiny-mama"), seed=1)
    calib = np.random.default_rng(1).integers(0, 256, 64)
    specs = calibrate_kv(ck, calib, "E4M3")
    t = list(np.random.default_rng(2).integers(0, 256, 40))
    exact = prefill(Session(ck), t)
    quant = prefill(Session(ck, "fp8e4m3", specs), t)
    assert np.max(np.abs(exact - quant)) <= 0.1
