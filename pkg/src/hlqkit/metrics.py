"""Quality metrics and storage accounting."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

FORMATS = ("uniform", "hlq")
FP16_BITS = 16
GIB = float(1 << 30)


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise DataError(f"vectors must have equal nonzero length, got {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity with a zero vector is defined as 0", RuntimeWarning)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def bpw(q: int, g: float, fmt: str = "hlq") -> float:
    """Average bits per weight with fp16 scales and zero-points amortized over a group.

    Uniform stores one scale and one zero per group, HLQ stores ``q`` scales
    and one zero. ``g=float('inf')`` gives the bare bit width.
    """
    if not g > 0:
        raise ConfigError("group size must be positive")
    if fmt == "uniform":
        per_group = 2
    elif fmt == "hlq":
        per_group = q + 1
    else:
        raise ConfigError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    return q + per_group * FP16_BITS / g


@dataclass
class LayerShape:
    name: str
    count: int
    n: int
    k: int


@dataclass
class ModelShapeConfig:
    name: str
    layers: list[LayerShape]
    excluded_bytes: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShapeConfig":
        layers = [LayerShape(l["name"], int(l.get("count", 1)), int(l["n"]), int(l["k"]))
                  for l in d.get("layers", [])]
        for l in layers:
            if l.count < 0 or l.n < 1 or l.k < 1:
                raise DataError(f"layer {l.name!r} has non-positive dimensions")
        excluded = {k: int(v) for k, v in d.get("excluded_bytes", {}).items()}
        return cls(d.get("name", "model"), layers, excluded)


BUILTIN_SHAPES = {"llama3.1-8b": "llama3.1-8b.json"}


def load_shape_config(src) -> ModelShapeConfig:
    """Load a shape config from a JSON path or a built-in name such as ``llama3.1-8b``."""
    if isinstance(src, dict):
        return ModelShapeConfig.from_dict(src)
    key = str(src).lower()
    if key in BUILTIN_SHAPES:
        text = resources.files("hlqkit.data").joinpath(BUILTIN_SHAPES[key]).read_text()
    else:
        text = Path(src).read_text()
    return ModelShapeConfig.from_dict(json.loads(text))


def model_footprint(cfg: ModelShapeConfig, q: int, g: int, fmt: str) -> tuple[float, float]:
    """Quantized model bytes and compression rate versus an all-fp16 model.

    Excluded layers (embedding, LM head) stay fp16 on both sides.
    """
    weights = sum(l.count * l.n * l.k for l in cfg.layers)
    excluded = float(sum(cfg.excluded_bytes.values()))
    quant_bytes = weights * bpw(q, g, fmt) / 8.0 + excluded
    fp16_bytes = weights * 2.0 + excluded
    return quant_bytes, fp16_bytes / quant_bytes
