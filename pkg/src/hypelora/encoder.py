"""A small pre-norm transformer encoder with a classification head.

The backbone stands in for a pretrained model: it is frozen once built, and
LoRA factors only ever enter through the query/value projections of the
forward pass.  The stored weights are never written to.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ndgrad as nd
from .layers import MASK_VALUE, block_param_shapes, init_block, linear, normal, ones, transformer_block, zeros
from .lora import ConfigurationError, LoraFactors, TargetId, apply_update, validate_factors
from .ndgrad import Tensor

HEAD_NAMES = ("head.w", "head.b")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_seq_len: int = 32
    n_classes: int = 2
    lora_rank: int = 4
    lora_alpha: float = 8.0
    embed_dim: int = 32

    def __post_init__(self):
        for f in fields(self):
            if f.name != "lora_alpha" and getattr(self, f.name) <= 0:
                raise ConfigurationError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if not np.isfinite(self.lora_alpha):
            raise ConfigurationError(f"lora_alpha must be finite, got {self.lora_alpha}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lora_rank >= self.d_model:
            raise ConfigurationError(
                f"lora_rank={self.lora_rank} must be smaller than d_model={self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    token_ids: np.ndarray  # (N, T) int
    attention_mask: np.ndarray  # (N, T) in {0, 1}
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)


class EncoderParams:
    """Named weights of the backbone and the classification head."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def backbone_names(self) -> list[str]:
        return [k for k in self.tensors if k not in HEAD_NAMES]

    def head_parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in HEAD_NAMES]

    def freeze(self) -> EncoderParams:
        """Mark every backbone weight as constant and the head as trainable."""
        for name, t in self.tensors.items():
            t.requires_grad = name in HEAD_NAMES
            t.grad = None
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def snapshot(self) -> dict[str, bytes]:
        return {k: v.data.tobytes() for k, v in self.tensors.items()}

    def copy(self) -> EncoderParams:
        out = {}
        for k, v in self.tensors.items():
            t = Tensor(v.data.copy(), requires_grad=v.requires_grad)
            out[k] = t
        return EncoderParams(self.config, out)


def init_random(config: ModelConfig, seed=0, std: float = 0.02) -> EncoderParams:
    """Deterministic random weights standing in for a pretrained backbone."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    t: dict[str, Tensor] = {
        "tok_emb": normal(rng, (config.vocab_size, d), std),
        "pos_emb": normal(rng, (config.max_seq_len, d), std),
    }
    for i in range(config.n_layers):
        for name, p in init_block(rng, d, config.d_ff, std).items():
            t[f"layers.{i}.{name}"] = p
    t["ln_f.g"] = ones((d,))
    t["ln_f.b"] = zeros((d,))
    t["head.w"] = normal(rng, (d, config.n_classes), std)
    t["head.b"] = zeros((config.n_classes,))
    return EncoderParams(config, t)


def encoder_param_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names += [f"layers.{i}.{k}" for k in block_param_shapes(config.d_model, config.d_ff)]
    return names + ["ln_f.g", "ln_f.b", *HEAD_NAMES]


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    ids = np.asarray(batch.token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be (N, T), got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")
    if np.shape(batch.attention_mask) != ids.shape:
        raise ValueError("attention_mask shape differs from token_ids")


def forward(params: EncoderParams, batch: Batch, factors: LoraFactors | None = None,
            capture: list | None = None) -> Tensor:
    """Class logits (N, C), pooled from the first position.

    With ``factors`` each layer uses ``W + alpha * A @ B`` for its query and
    value projections, built on the fly and discarded afterwards.
    """
    cfg = params.config
    _check_batch(cfg, batch)
    if factors is not None:
        validate_factors(factors, cfg.n_layers, cfg.d_model, cfg.lora_rank)
    ids = np.asarray(batch.token_ids, dtype=np.int64)
    mask = np.asarray(batch.attention_mask, dtype=np.float64)
    n, t = ids.shape
    x = nd.add(nd.embedding(params["tok_emb"], ids), nd.getitem(params["pos_emb"], slice(0, t)))
    mask_bias = ((1.0 - mask) * MASK_VALUE)[:, None, None, :]
    for i in range(cfg.n_layers):
        p = params.layer(i)
        wq = wv = None
        if factors is not None:
            wq = apply_update(p["wq"], factors[TargetId(i, "Q", "A")],
                              factors[TargetId(i, "Q", "B")], cfg.lora_alpha)
            wv = apply_update(p["wv"], factors[TargetId(i, "V", "A")],
                              factors[TargetId(i, "V", "B")], cfg.lora_alpha)
        x = transformer_block(x, p, cfg.n_heads, mask_bias, wq=wq, wv=wv, capture=capture)
    x = nd.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    pooled = nd.getitem(x, (slice(None), 0))
    return linear(pooled, params["head.w"], params["head.b"])


def predict_proba(params: EncoderParams, batch: Batch, factors: LoraFactors | None = None) -> Tensor:
    return nd.softmax(forward(params, batch, factors), axis=-1)


def merge_factors(params: EncoderParams, factors: LoraFactors, alpha: float | None = None) -> EncoderParams:
    """Copy of ``params`` with the adapted Q/V projections folded in."""
    cfg = params.config
    validate_factors(factors, cfg.n_layers, cfg.d_model, cfg.lora_rank)
    alpha = cfg.lora_alpha if alpha is None else alpha
    merged = params.copy()
    for i in range(cfg.n_layers):
        for proj, name in (("Q", "wq"), ("V", "wv")):
            key = f"layers.{i}.{name}"
            a = factors[TargetId(i, proj, "A")]
            b = factors[TargetId(i, proj, "B")]
            a = a.data if isinstance(a, Tensor) else a
            b = b.data if isinstance(b, Tensor) else b
            merged.tensors[key].data = apply_update(params[key].data, a, b, alpha)
    return merged

