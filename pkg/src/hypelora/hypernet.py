"""Hyper-networks that turn per-target embeddings into LoRA factors.

Each adapted matrix (layer, Q/V projection, A/B factor) owns a learned
embedding.  A shared generator maps every embedding to a flat vector of
length ``d * r``, which is reshaped into the factor.  The MLP generator treats
embeddings independently; the transformer generator attends across all of
them before projecting each position.

In fixed-A mode only the B targets have embeddings and the A factors are
drawn once from a Kaiming-uniform distribution and never change.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .layers import block_param_shapes, init_block, linear, normal, ones, transformer_block, zeros
from .lora import ConfigurationError, LoraFactors, TargetId, all_targets, factor_shape, kaiming_uniform_init
from .ndgrad import Tensor

VARIANTS = ("mlp", "transformer")
MODES = ("full", "fixed_a")
OUT_INITS = ("scaled", "plain")


@dataclass(frozen=True)
class HyperNetConfig:
    variant: str = "mlp"
    mode: str = "full"
    embed_dim: int = 32
    mlp_hidden: int = 128
    mlp_layers: int = 4
    tr_hidden: int = 64
    tr_layers: int = 2
    tr_heads: int = 4
    tr_ff: int = 128
    output_dim: int = 256
    init_std: float = 0.02
    out_init: str = "scaled"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.out_init not in OUT_INITS:
            raise ConfigurationError(f"out_init must be one of {OUT_INITS}, got {self.out_init!r}")
        if self.mlp_layers < 1:
            raise ConfigurationError("mlp_layers must be at least 1")
        if self.tr_hidden % self.tr_heads:
            raise ConfigurationError("tr_hidden must be divisible by tr_heads")
        for name in ("embed_dim", "mlp_hidden", "tr_hidden", "tr_layers", "tr_heads", "tr_ff", "output_dim"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def for_model(cls, model_config, **kwargs) -> HyperNetConfig:
        """Config whose output size and embedding width match ``model_config``."""
        kwargs.setdefault("embed_dim", model_config.embed_dim)
        return cls(output_dim=model_config.d_model * model_config.lora_rank, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def generator_param_count(cfg: HyperNetConfig) -> int:
    if cfg.variant == "mlp":
        widths = [cfg.embed_dim] + [cfg.mlp_hidden] * (cfg.mlp_layers - 1) + [cfg.output_dim]
        return int(sum(a * b + b for a, b in zip(widths[:-1], widths[1:])))
    h = cfg.tr_hidden
    block = sum(int(np.prod(s)) for s in block_param_shapes(h, cfg.tr_ff).values())
    return (cfg.embed_dim * h + h) + cfg.tr_layers * block + 2 * h + (h * cfg.output_dim + cfg.output_dim)


class HyperNet:
    """Embedding table plus generator; produces a full set of LoRA factors."""

    kind = "hypernet"

    def __init__(self, config: HyperNetConfig, n_layers: int, d_model: int, rank: int,
                 embeddings: Tensor, generator: dict[str, Tensor],
                 fixed_a: dict[TargetId, Tensor] | None = None):
        if config.output_dim != d_model * rank:
            raise ConfigurationError(
                f"output_dim={config.output_dim} must equal d_model*lora_rank={d_model * rank}")
        self.config = config
        self.n_layers, self.d, self.r = n_layers, d_model, rank
        self.targets = generated_targets(n_layers, config.mode)
        if embeddings.shape != (len(self.targets), config.embed_dim):
            raise ConfigurationError(
                f"embedding table has shape {embeddings.shape}, expected "
                f"({len(self.targets)}, {config.embed_dim})")
        self.embeddings = embeddings
        self.generator = generator
        self.fixed_a = fixed_a or {}
        if config.mode == "fixed_a":
            missing = [t.key for t in all_targets(n_layers) if t.factor == "A" and t not in self.fixed_a]
            if missing:
                raise ConfigurationError(f"fixed A matrices missing for {', '.join(missing)}")

    # -- parameters -----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"hyper.embeddings": self.embeddings}
        out.update({f"hyper.{k}": v for k, v in self.generator.items()})
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def embedding_for(self, target: TargetId) -> Tensor:
        try:
            i = self.targets.index(target)
        except ValueError:
            raise ConfigurationError(f"no embedding for target {target.key}") from None
        return nd.getitem(self.embeddings, i)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"embeddings": self.embeddings.data}
        out.update({k: v.data for k, v in self.generator.items()})
        return out

    def fixed_arrays(self) -> dict[str, np.ndarray]:
        return {t.key: m.data for t, m in self.fixed_a.items()}

    # -- generation -----------------------------------------------------
    def raw_outputs(self) -> Tensor:
        """Generator outputs for every embedding, shape (n_targets, d * r)."""
        cfg = self.config
        g = self.generator
        if cfg.variant == "mlp":
            h = self.embeddings
            for i in range(cfg.mlp_layers):
                h = linear(h, g[f"mlp.{i}.w"], g[f"mlp.{i}.b"])
                if i < cfg.mlp_layers - 1:
                    h = nd.gelu(h)
            return h
        n = len(self.targets)
        x = linear(self.embeddings, g["in.w"], g["in.b"])
        x = nd.reshape(x, (1, n, cfg.tr_hidden))
        for i in range(cfg.tr_layers):
            prefix = f"blocks.{i}."
            block = {k[len(prefix):]: v for k, v in g.items() if k.startswith(prefix)}
            x = transformer_block(x, block, cfg.tr_heads)
        x = nd.layer_norm(x, g["ln_f.g"], g["ln_f.b"])
        x = nd.reshape(x, (n, cfg.tr_hidden))
        return linear(x, g["out.w"], g["out.b"])

    def generate(self) -> LoraFactors:
        out = self.raw_outputs()
        factors: LoraFactors = {}
        for i, t in enumerate(self.targets):
            factors[t] = nd.reshape(nd.getitem(out, i), factor_shape(t, self.d, self.r))
        factors.update(self.fixed_a)
        return {t: factors[t] for t in all_targets(self.n_layers)}


def generated_targets(n_layers: int, mode: str) -> list[TargetId]:
    targets = all_targets(n_layers)
    if mode == "fixed_a":
        return [t for t in targets if t.factor == "B"]
    return targets


def init(config: HyperNetConfig, n_layers: int, d_model: int, rank: int, seed=0) -> HyperNet:
    """Randomly initialised hyper-network; every trainable tensor requires grad."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = config.init_std
    out_std = std / np.sqrt(config.output_dim) if config.out_init == "scaled" else std
    targets = generated_targets(n_layers, config.mode)
    embeddings = normal(rng, (len(targets), config.embed_dim), std, requires_grad=True)
    g: dict[str, Tensor] = {}
    if config.variant == "mlp":
        widths = [config.embed_dim] + [config.mlp_hidden] * (config.mlp_layers - 1) + [config.output_dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            s = out_std if i == config.mlp_layers - 1 else std
            g[f"mlp.{i}.w"] = normal(rng, (a, b), s, requires_grad=True)
            g[f"mlp.{i}.b"] = zeros((b,), requires_grad=True)
    else:
        h = config.tr_hidden
        g["in.w"] = normal(rng, (config.embed_dim, h), std, requires_grad=True)
        g["in.b"] = zeros((h,), requires_grad=True)
        for i in range(config.tr_layers):
            for k, v in init_block(rng, h, config.tr_ff, std, requires_grad=True).items():
                g[f"blocks.{i}.{k}"] = v
        g["ln_f.g"] = ones((h,), requires_grad=True)
        g["ln_f.b"] = zeros((h,), requires_grad=True)
        g["out.w"] = normal(rng, (h, config.output_dim), out_std, requires_grad=True)
        g["out.b"] = zeros((config.output_dim,), requires_grad=True)
    fixed_a = {}
    if config.mode == "fixed_a":
        for t in all_targets(n_layers):
            if t.factor == "A":
                fixed_a[t] = Tensor(kaiming_uniform_init(d_model, rank, rng))
    return HyperNet(config, n_layers, d_model, rank, embeddings, g, fixed_a)


def from_arrays(config: HyperNetConfig, n_layers: int, d_model: int, rank: int,
                arrays: dict[str, np.ndarray], fixed: dict[str, np.ndarray] | None = None) -> HyperNet:
    """Rebuild a hyper-network from saved arrays (see :meth:`HyperNet.state_arrays`)."""
    arrays = dict(arrays)
    if "embeddings" not in arrays:
        raise ConfigurationError("saved hyper-network lacks an embedding table")
    emb = Tensor(arrays.pop("embeddings"), requires_grad=True)
    g = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    fixed_a = {TargetId.parse(k): Tensor(v) for k, v in (fixed or {}).items()}
    return HyperNet(config, n_layers, d_model, rank, emb, g, fixed_a)
