"""Group-wise asymmetric INT4 weight quantization: round-to-nearest and GPTQ.

A group is ``group_size`` consecutive columns of one row. Each group stores an
f32 ``scale`` and an f32 ``zero`` (the group minimum) and reconstructs as
``code * scale + zero`` with ``code`` in ``[0, 15]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError, NumericError, ShapeError

QMAX = 15


def pack_int4(codes: np.ndarray) -> bytes:
    """Pack 4-bit codes two per byte, low nibble first, row-major."""
    flat = np.asarray(codes, dtype=np.uint8).ravel()
    if flat.size and flat.max() > QMAX:
        raise InputError("int4 codes must lie in [0, 15]")
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(buf, dtype=np.uint8)
    if packed.size * 2 < count:
        raise InputError(f"packed buffer holds {packed.size * 2} codes, need {count}")
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


@dataclass
class QuantTensor:
    """Packed INT4 weights with per-(row, group) scales and zero points."""

    codes: bytes
    shape: tuple[int, ...]
    group_size: int
    scales: np.ndarray  # float32 [rows, n_groups]
    zeros: np.ndarray  # float32 [rows, n_groups]

    @property
    def rows(self) -> int:
        return int(np.prod(self.shape[:-1])) if len(self.shape) > 1 else 1

    @property
    def cols(self) -> int:
        return self.shape[-1]

    @property
    def n_groups(self) -> int:
        return -(-self.cols // self.group_size)

    def code_array(self) -> np.ndarray:
        return unpack_int4(self.codes, self.rows * self.cols).reshape(self.rows, self.cols)

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        q = self.code_array().astype(np.float64)
        g = np.arange(self.cols) // self.group_size
        scales = self.scales.astype(np.float64)[:, g]
        zeros = self.zeros.astype(np.float64)[:, g]
        return (q * scales + zeros).astype(dtype).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.codes) + self.scales.nbytes + self.zeros.nbytes


def _as_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    if w.size == 0:
        raise InputError("cannot quantize an empty tensor")
    return w.reshape(1, -1) if w.ndim == 1 else w.reshape(-1, w.shape[-1])


def group_params(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min/max affine parameters for each row of ``block``, rounded to f32.

    A constant row gets ``scale = 1`` and ``zero = value`` so it reconstructs exactly.
    """
    lo = block.min(axis=1)
    hi = block.max(axis=1)
    scale = (hi - lo) / QMAX
    degenerate = scale == 0
    scale = np.where(degenerate, 1.0, scale)
    scale = scale.astype(np.float32).astype(np.float64)
    zero = lo.astype(np.float32).astype(np.float64)
    return scale, zero


def quantize_values(x: np.ndarray, scale: np.ndarray, zero: np.ndarray) -> np.ndarray:
    return np.clip(np.round((x - zero) / scale), 0, QMAX)


def quantize_rtn(w: np.ndarray, group_size: int = 128) -> QuantTensor:
    if group_size < 1:
        raise InputError("group_size must be >= 1")
    shape = tuple(np.shape(w))
    m = _as_matrix(w).astype(np.float64)
    rows, cols = m.shape
    n_groups = -(-cols // group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, n_groups), dtype=np.float32)
    zeros = np.empty((rows, n_groups), dtype=np.float32)
    for g in range(n_groups):
        sl = slice(g * group_size, min(cols, (g + 1) * group_size))
        s, z = group_params(m[:, sl])
        codes[:, sl] = quantize_values(m[:, sl], s[:, None], z[:, None])
        scales[:, g] = s
        zeros[:, g] = z
    return QuantTensor(pack_int4(codes), shape, group_size, scales, zeros)


def gptq_quantize(w: np.ndarray, calib_inputs: np.ndarray, group_size: int = 128,
                  damp: float = 0.01) -> QuantTensor:
    """Quantize ``w[out, in]`` column by column with Hessian-based error feedback.

    ``calib_inputs[n, in]`` are the layer inputs. The Hessian is ``2 X^T X`` plus
    ``damp * mean(diag)`` on the diagonal. Quantization error of each column is
    pushed into the not-yet-quantized columns through the upper Cholesky factor
    of the inverse Hessian. Group parameters are taken from the (already
    error-updated) weights when the first column of each group is reached.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"gptq_quantize expects a 2-D weight, got shape {w.shape}")
    if w.size == 0:
        raise InputError("cannot quantize an empty tensor")
    x = np.asarray(calib_inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1] or x.shape[0] < 1:
        raise ShapeError(f"calibration inputs {x.shape} do not match weight {w.shape}")
    if not damp > 0:
        raise InputError("damp must be positive")
    rows, cols = w.shape

    h = 2.0 * x.T @ x
    mean_diag = float(np.mean(np.diag(h)))
    h[np.diag_indices(cols)] += damp * mean_diag
    try:
        chol = np.linalg.cholesky(h)
        eye = np.eye(cols)
        h_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, eye))
        u = np.linalg.cholesky(h_inv).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"damped Hessian is not positive definite (mean diag {mean_diag:.3e}, "
            f"damp {damp}); calibration inputs may be all zero") from exc

    work = w.astype(np.float64).copy()
    n_groups = -(-cols // group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, n_groups), dtype=np.float32)
    zeros = np.empty((rows, n_groups), dtype=np.float32)
    s = z = None
    for i in range(cols):
        if i % group_size == 0:
            g = i // group_size
            s, z = group_params(work[:, i:min(cols, i + group_size)])
            scales[:, g] = s
            zeros[:, g] = z
        q = quantize_values(work[:, i], s, z)
        codes[:, i] = q
        err = (work[:, i] - (q * s + z)) / u[i, i]
        work[:, i + 1:] -= np.outer(err, u[i, i + 1:])
    return QuantTensor(pack_int4(codes), (rows, cols), group_size, scales, zeros)


def calibration_error(w: np.ndarray, w_hat: np.ndarray, x: np.ndarray) -> float:
    """``||(W - W_hat) X^T||_F`` with ``x`` laid out as ``[n, in]``."""
    diff = np.asarray(w, np.float64) - np.asarray(w_hat, np.float64)
    return float(np.linalg.norm(diff @ np.asarray(x, np.float64).T))
