from .fp8 import Fp8Spec, Fp8Tensor, calibrate_kv_scale, code_table, fp8_decode, fp8_encode, max_finite
from .int4 import (QuantTensor, calibration_error, gptq_quantize, pack_int4, quantize_rtn,
                   unpack_int4)

__all__ = [
    "Fp8Spec", "Fp8Tensor", "QuantTensor", "calibrate_kv_scale", "calibration_error",
    "code_table", "fp8_decode", "fp8_encode", "gptq_quantize", "max_finite", "pack_int4",
    "quantize_rtn", "unpack_int4",
]
