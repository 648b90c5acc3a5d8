"""Model configuration and the named presets shared by tests, demos and the CLI."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from .errors import ConfigError

FULL = None  # window value meaning unrestricted causal attention


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    layer_pattern: str
    d_state: int = 8
    d_conv: int = 4
    expand: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 8
    window: int | None = 16
    rope_theta: float = 10_000.0
    d_ff: int = 64
    max_train_len: int = 256
    qk_norm: bool = True
    norm_eps: float = 1e-6
    dt_rank: int | None = None
    d_inner_override: int | None = None

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_layers, self.d_state, self.d_conv,
               self.expand, self.n_heads, self.n_kv_heads, self.head_dim, self.d_ff,
               self.max_train_len) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if len(self.layer_pattern) != self.n_layers:
            raise ConfigError(
                f"layer_pattern {self.layer_pattern!r} has length {len(self.layer_pattern)}, "
                f"expected n_layers={self.n_layers}")
        if set(self.layer_pattern) - {"M", "A"}:
            raise ConfigError(f"layer_pattern may only contain 'M' and 'A': {self.layer_pattern!r}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be a multiple of n_kv_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.window is not None:
            if self.window < 1:
                raise ConfigError("window must be >= 1 or FULL")
            if self.window > self.max_train_len:
                raise ConfigError(
                    f"window {self.window} exceeds declared context {self.max_train_len}")
        if not self.rope_theta > 0:
            raise ConfigError("rope_theta must be positive")
        if self.dt_rank is not None and self.dt_rank <= 0:
            raise ConfigError("dt_rank must be positive")
        if self.d_inner_override is not None and self.d_inner_override <= 0:
            raise ConfigError("d_inner_override must be positive")

    @property
    def d_inner(self) -> int:
        return self.d_inner_override or self.expand * self.d_model

    @property
    def rank(self) -> int:
        """Rank of the step-size projection, ``ceil(d_model / 16)`` unless pinned."""
        return self.dt_rank or math.ceil(self.d_model / 16)

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def is_finite_window(self) -> bool:
        return self.window is not None

    def layer_kinds(self) -> list[str]:
        return list(self.layer_pattern)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = "full" if self.window is None else self.window
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("window") == "full":
            d["window"] = None
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config fields: {exc}") from exc

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def alternating_pattern(n_layers: int) -> str:
    """``"MAMA..."``: Mamba first, then attention, alternating."""
    return "".join("M" if i % 2 == 0 else "A" for i in range(n_layers))


PRESETS: dict[str, ModelConfig] = {
    "tiny-m": ModelConfig(
        vocab_size=64, d_model=32, n_layers=1, layer_pattern="M", d_state=8, d_conv=4,
        expand=2, n_heads=4, n_kv_heads=2, head_dim=8, window=16, rope_theta=10_000.0,
        d_ff=64, max_train_len=64),
    "tiny-a": ModelConfig(
        vocab_size=64, d_model=32, n_layers=1, layer_pattern="A", d_state=8, d_conv=4,
        expand=2, n_heads=4, n_kv_heads=2, head_dim=8, window=16, rope_theta=10_000.0,
        d_ff=64, max_train_len=64),
    "tiny-mama": ModelConfig(
        vocab_size=256, d_model=64, n_layers=4, layer_pattern="MAMA", d_state=8, d_conv=4,
        expand=2, n_heads=4, n_kv_heads=2, head_dim=16, window=16, rope_theta=10_000.0,
        d_ff=128, max_train_len=256),
    # weights for this one are constructed, not sampled (see longeval.build_copy_model)
    "phonebook-demo": ModelConfig(
        vocab_size=64, d_model=32, n_layers=2, layer_pattern="AA", d_state=8, d_conv=4,
        expand=2, n_heads=2, n_kv_heads=2, head_dim=16, window=8, rope_theta=1_000_000.0,
        d_ff=8, max_train_len=64, qk_norm=False),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def production_like_config() -> ModelConfig:
    """Shape-only config whose attention layers store 55,296 KV elements per token.

    27 attention layers x 2 (K and V) x 8 KV heads x 128 head_dim = 55,296.
    Full attention at 32k context, as deployed after context extension.
    Never instantiated with weights.
    """
    return ModelConfig(
        vocab_size=100_000, d_model=4096, n_layers=54, layer_pattern=alternating_pattern(54),
        d_state=64, d_conv=4, expand=2, n_heads=32, n_kv_heads=8, head_dim=128,
        window=None, rope_theta=1_000_000.0, d_ff=16_384, max_train_len=32_768)


__all__ = ["FULL", "ModelConfig", "PRESETS", "preset", "alternating_pattern",
           "production_like_config"]
