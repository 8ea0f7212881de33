"""Low-rank factor bookkeeping and the ``W + alpha * A @ B`` update."""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

PROJECTIONS = ("Q", "V")
FACTORS = ("A", "B")
MODES = ("per_layer_lora", "hypernet_full", "hypernet_fixed_a")


class ConfigurationError(ValueError):
    """Inconsistent configuration or factors that do not match it."""


class TargetId(NamedTuple):
    layer: int
    projection: str  # "Q" or "V"
    factor: str  # "A" or "B"

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.projection}.{self.factor}"

    @classmethod
    def parse(cls, key: str) -> TargetId:
        layer, proj, fac = key.split(".")
        if proj not in PROJECTIONS or fac not in FACTORS:
            raise ValueError(f"bad target key {key!r}")
        return cls(int(layer), proj, fac)


# A mapping TargetId -> Tensor; A factors are (d, r), B factors are (r, d).
LoraFactors = dict


def all_targets(n_layers: int) -> list[TargetId]:
    return [TargetId(l, p, f) for l in range(n_layers) for p in PROJECTIONS for f in FACTORS]


def factor_shape(target: TargetId, d: int, r: int) -> tuple[int, int]:
    return (d, r) if target.factor == "A" else (r, d)


def validate_factors(factors: LoraFactors, n_layers: int, d: int, r: int) -> None:
    expected = set(all_targets(n_layers))
    missing = expected - set(factors)
    if missing:
        names = ", ".join(sorted(t.key for t in missing))
        raise ConfigurationError(f"missing LoRA factors for targets: {names}")
    extra = set(factors) - expected
    if extra:
        names = ", ".join(sorted(t.key for t in extra))
        raise ConfigurationError(f"unexpected LoRA targets: {names}")
    for t, m in factors.items():
        if tuple(m.shape) != factor_shape(t, d, r):
            raise ConfigurationError(
                f"factor {t.key} has shape {tuple(m.shape)}, expected {factor_shape(t, d, r)}")


def apply_update(W, A, B, alpha: float):
    """Return ``W + alpha * (A @ B)`` without touching ``W``.

    Works on plain arrays or on :class:`Tensor` inputs; in the latter case the
    result participates in differentiation.
    """
    if any(isinstance(x, Tensor) for x in (W, A, B)):
        return nd.add(W, nd.scale(nd.matmul(A, B), alpha))
    W, A, B = (np.asarray(x, dtype=np.float64) for x in (W, A, B))
    if A.shape[1] != B.shape[0] or W.shape != (A.shape[0], B.shape[1]):
        raise ValueError(f"apply_update: incompatible shapes W{W.shape}, A{A.shape}, B{B.shape}")
    return W + alpha * (A @ B)


def kaiming_bound(d: int) -> float:
    # kaiming_uniform with a=sqrt(5) and fan_in=d: gain^2 = 2/(1+5), bound = gain*sqrt(3/d)
    return float(np.sqrt(6.0 / ((1.0 + 5.0) * d)))


def kaiming_uniform_init(d: int, r: int, seed) -> np.ndarray:
    """A (d, r) matrix with entries uniform on [-b, b], b = sqrt(6 / (6 d))."""
    if d < 1 or r < 1:
        raise ValueError("kaiming_uniform_init: d and r must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = kaiming_bound(d)
    return rng.uniform(-b, b, size=(d, r))


class LoraAdapter:
    """Standard per-layer LoRA: independent trainable A (Kaiming) and B (zeros)."""

    kind = "lora"

    def __init__(self, n_layers: int, d: int, r: int, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.n_layers, self.d, self.r = n_layers, d, r
        self.factors: LoraFactors = {}
        for t in all_targets(n_layers):
            if t.factor == "A":
                self.factors[t] = Tensor(kaiming_uniform_init(d, r, rng), requires_grad=True)
            else:
                self.factors[t] = Tensor(np.zeros((r, d)), requires_grad=True)

    def generate(self) -> LoraFactors:
        return dict(self.factors)

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"lora.{t.key}": m for t, m in self.factors.items()}

    def trainable_parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {t.key: m.data for t, m in self.factors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            self.factors[TargetId.parse(key)].data = np.array(arr, dtype=np.float64)


def lora_param_count(config, mode: str, hyper=None, include_head: bool = False) -> int:
    """Exact number of trainable scalars for an adaptation mode.

    ``config`` is a ModelConfig; ``hyper`` a HyperNetConfig (needed for the
    hyper-network modes).  The classifier head is added only when
    ``include_head`` is true, uniformly for every mode.
    """
    L, d, r = config.n_layers, config.d_model, config.lora_rank
    if mode == "per_layer_lora":
        count = L * 2 * (d * r + r * d)
    elif mode in ("hypernet_full", "hypernet_fixed_a"):
        if hyper is None:
            raise ConfigurationError(f"{mode} needs a hyper-network config")
        from .hypernet import generator_param_count

        n_emb = (4 if mode == "hypernet_full" else 2) * L
        count = n_emb * hyper.embed_dim + generator_param_count(hyper)
    else:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if include_head:
        count += d * config.n_classes + config.n_classes
    return count


def count_elements(tensors: Iterable[Tensor]) -> int:
    return int(np.sum([t.size for t in tensors], dtype=np.int64))
