"""Building blocks shared by the backbone encoder and the transformer hyper-network."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

# Additive bias for masked keys; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9


def normal(rng: np.random.Generator, shape, std: float, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nd.matmul(x, w)
    return y if b is None else nd.add(y, b)


def block_param_shapes(d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes of one pre-norm transformer block."""
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "wq": (d, d), "bq": (d,),
        "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "w1": (d, d_ff), "b1": (d_ff,),
        "w2": (d_ff, d), "b2": (d,),
    }


def init_block(rng: np.random.Generator, d: int, d_ff: int, std: float,
               requires_grad: bool = False) -> dict[str, Tensor]:
    params = {}
    for name, shape in block_param_shapes(d, d_ff).items():
        if name.endswith(".g"):
            params[name] = ones(shape, requires_grad)
        elif name.startswith("w"):
            params[name] = normal(rng, shape, std, requires_grad)
        else:
            params[name] = zeros(shape, requires_grad)
    return params


def attention(h: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
              wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor, n_heads: int,
              mask_bias: np.ndarray | None = None, capture: list | None = None) -> Tensor:
    """Multi-head self-attention over ``h`` of shape (N, T, d).

    ``mask_bias`` has shape (N, 1, 1, T) and is added to the scores before the
    softmax.  When ``capture`` is given the attention probabilities are
    appended to it.
    """
    n, t, d = h.shape
    dh = d // n_heads

    def heads(x: Tensor) -> Tensor:
        return nd.transpose(nd.reshape(x, (n, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(h, wq, bq))
    k = heads(linear(h, wk, bk))
    v = heads(linear(h, wv, bv))
    scores = nd.scale(nd.matmul(q, nd.swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    if mask_bias is not None:
        scores = nd.add(scores, Tensor(mask_bias))
    probs = nd.softmax(scores, axis=-1)
    if capture is not None:
        capture.append(probs.data)
    ctx = nd.reshape(nd.transpose(nd.matmul(probs, v), (0, 2, 1, 3)), (n, t, d))
    return linear(ctx, wo, bo)


def transformer_block(x: Tensor, p: Mapping[str, Tensor], n_heads: int,
                      mask_bias: np.ndarray | None = None,
                      wq: Tensor | None = None, wv: Tensor | None = None,
                      capture: list | None = None) -> Tensor:
    """Pre-norm block: x + attn(ln1(x)), then + ffn(ln2(x)).

    ``wq``/``wv`` override the stored query/value projections (adapted weights).
    """
    h = nd.layer_norm(x, p["ln1.g"], p["ln1.b"])
    a = attention(h, p["wq"] if wq is None else wq, p["bq"], p["wk"], p["bk"],
                  p["wv"] if wv is None else wv, p["bv"], p["wo"], p["bo"],
                  n_heads, mask_bias, capture)
    x = nd.add(x, a)
    h = nd.layer_norm(x, p["ln2.g"], p["ln2.b"])
    f = linear(nd.gelu(linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])
    return nd.add(x, f)
