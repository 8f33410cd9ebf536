"""Encoder assembly, projector, classification head and architecture presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .autograd import LayerNorm, Linear, Module, Tensor, no_grad
from .tokenizer import TokenGenerator, conv_output_length
from .vit import ViTEncoder


@dataclass(frozen=True)
class MantisConfig:
    seq_len: int = 512
    num_patches: int = 32
    dim: int = 256
    num_layers: int = 6
    num_heads: int = 8
    mlp_dim: int = 2048
    stat_dim: int = 64
    num_scales: int = 16
    kernel_size: int = 16
    stride: int = 8
    padding: int = 4
    dropout: float = 0.1
    use_differential: bool = True
    proj_dim: int = 128
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.dim % 2:
            raise ValueError("dim must be even for sinusoidal positions")
        if self.seq_len % self.num_patches:
            raise ValueError(f"seq_len {self.seq_len} not divisible by {self.num_patches}")
        pre_pool = conv_output_length(self.seq_len, self.kernel_size, self.stride, self.padding)
        if pre_pool < self.num_patches:
            raise ValueError(f"convolution yields {pre_pool} positions, fewer than "
                             f"{self.num_patches} patches")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def fusion_width(self) -> int:
        return TokenGenerator.fusion_width(self.dim, self.stat_dim, self.use_differential)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "MantisConfig":
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**values)


PRESETS = {
    "mantis": MantisConfig(),
    # desk-scale encoders for CPU training runs
    "small": MantisConfig(dim=64, num_layers=2, num_heads=4, mlp_dim=128, stat_dim=16,
                          proj_dim=32),
    "tiny": MantisConfig(seq_len=64, dim=16, num_layers=1, num_heads=2, mlp_dim=32,
                         stat_dim=8, kernel_size=4, stride=2, padding=1, proj_dim=8),
}


def get_config(name: str = "mantis", **overrides) -> MantisConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(base, **overrides)


class MantisEncoder(Module):
    """Maps raw channels ``(batch, seq_len)`` to embeddings ``(batch, dim)``.

    Instance normalisation happens inside the forward pass, so callers pass
    resized but otherwise raw values.
    """

    def __init__(self, config: Optional[MantisConfig] = None, seed: int = 0):
        self._config = config or MantisConfig()
        cfg = self._config
        rng = np.random.default_rng(seed)
        self.tokenizer = TokenGenerator(
            dim=cfg.dim, num_patches=cfg.num_patches, stat_dim=cfg.stat_dim,
            kernel_size=cfg.kernel_size, stride=cfg.stride, padding=cfg.padding,
            use_differential=cfg.use_differential, num_scales=cfg.num_scales,
            norm_eps=cfg.norm_eps, rng=rng)
        self.vit = ViTEncoder(dim=cfg.dim, num_tokens=cfg.num_patches,
                              num_layers=cfg.num_layers, num_heads=cfg.num_heads,
                              mlp_dim=cfg.mlp_dim, dropout_rate=cfg.dropout, rng=rng)

    @property
    def config(self) -> MantisConfig:
        return self._config

    def __call__(self, x, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.tokenizer.fusion.weight.dtype)
        return self.vit(self.tokenizer(x), train, rng)

    def embed(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode embeddings of ``(n, seq_len)`` channels, no graph recorded."""
        x = np.asarray(x)
        out = np.empty((len(x), self._config.dim), dtype=self.tokenizer.fusion.weight.dtype)
        with no_grad():
            for start in range(0, len(x), batch_size):
                out[start:start + batch_size] = self(x[start:start + batch_size]).data
        return out


def count_parameters(model: MantisEncoder) -> int:
    """Learnable scalars in the tokenizer and transformer (heads excluded)."""
    return model.num_parameters()


class Projector(Module):
    def __init__(self, dim: int = 256, proj_dim: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.norm = LayerNorm(dim)
        self.linear = Linear(dim, proj_dim, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.linear(self.norm(z))


class ClassificationHead(Module):
    def __init__(self, input_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.norm = LayerNorm(input_dim)
        self.linear = Linear(input_dim, num_classes, rng)

    @property
    def input_dim(self) -> int:
        return self.linear.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.linear.weight.shape[1]

    def __call__(self, z: Tensor) -> Tensor:
        return self.linear(self.norm(z))
