import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from hybridlm.config import ModelConfig  # noqa: E402
from hybridlm.params import init_params  # noqa: E402


def tiny_cfg(pattern="MA", window=4, **kw):
    base = dict(vocab_size=32, d_model=16, n_layers=len(pattern), layer_pattern=pattern,
                d_state=4, d_conv=4, expand=2, n_heads=4, n_kv_heads=2, head_dim=4,
                window=window, d_ff=24, max_train_len=64)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(pattern="MA", window=4, seed=0, dtype=np.float32, **kw):
    return init_params(tiny_cfg(pattern, window, **kw), seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_checkpoint(rng, max_tensors=6):
    """Random tensor table mixing f32, int4 and fp8 blobs of odd shapes."""
    from hybridlm.checkpoint import Checkpoint
    from hybridlm.quant import Fp8Spec, quantize_rtn
    from hybridlm.quant.fp8 import Fp8Tensor

    tensors = {}
    for i in range(int(rng.integers(1, max_tensors + 1))):
        shape = tuple(int(d) for d in rng.integers(1, 12, int(rng.integers(1, 4))))
        x = (rng.standard_normal(shape) * rng.uniform(0.01, 10)).astype(np.float32)
        kind = int(rng.integers(3))
        if kind == 1 and len(shape) == 2:
            t = quantize_rtn(x, int(rng.choice([2, 4, 8])))
        elif kind == 2:
            t = Fp8Tensor.from_array(x, Fp8Spec(str(rng.choice(["E4M3", "E5M2"])), float(rng.uniform(0.1, 4))))
        else:
            t = x
        tensors[f"t{i}.{'x' * int(rng.integers(0, 5))}"] = t
    return Checkpoint(tiny_cfg(), tensors, {"note": int(rng.integers(1000))})
