"""Caption scorer: five linear layers, weight-normalized in the middle three.

    S(h) = W5 phi4(W4 phi3(W3 phi2(W2 phi1(W1 h))))
    phi(x) = Dropout(GELU(LayerNorm(x)))

Weight norm is per row of the stored matrix (row-vector convention, so the
row index is the input unit).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .diffnum import (
    ParamStore,
    RngStream,
    ShapeError,
    Tensor,
    as_tensor,
    dropout,
    gelu,
    layer_norm,
    linear,
    weight_norm,
)

LN_EPS = 1e-5


@dataclasses.dataclass(frozen=True)
class ScorerConfig:
    d: int = 64
    h1: int = 1024
    h2: int = 512
    dropout: float = 0.2

    def __post_init__(self):
        if min(self.d, self.h1, self.h2) <= 0:
            raise ValueError(f"scorer dims must be positive, got {(self.d, self.h1, self.h2)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclasses.dataclass
class ScorerParams:
    """View onto the ``scorer.*`` tensors of a :class:`ParamStore`."""

    config: ScorerConfig
    store: ParamStore
    prefix: str = "scorer."

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self.prefix + key]

    def names(self) -> list[str]:
        return [n for n in self.store if n.startswith(self.prefix)]


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit


def apply_weight_norm(v, g) -> np.ndarray:
    """Numeric form of the reparameterization, ``(g_i / ||v_i||) v_i`` per row."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if v.ndim != 2 or g.shape != (v.shape[0],):
        raise ShapeError(f"weight norm needs v of shape (r, c) and g of shape (r,), got {v.shape} and {g.shape}")
    return weight_norm(Tensor(v), Tensor(g)).data


def layer_shapes(config: ScorerConfig) -> dict[str, tuple[int, ...]]:
    d, h1, h2 = config.d, config.h1, config.h2
    shapes: dict[str, tuple[int, ...]] = {"W1": (d, h1), "b1": (h1,)}
    for i, (fan_in, fan_out) in zip((2, 3, 4), ((h1, h1), (h1, h1), (h1, h2))):
        shapes[f"W{i}.v"] = (fan_in, fan_out)
        shapes[f"W{i}.g"] = (fan_in,)
        shapes[f"b{i}"] = (fan_out,)
    shapes["W5"] = (h2, 1)
    shapes["b5"] = (1,)
    for i, width in zip((1, 2, 3, 4), (h1, h1, h1, h2)):
        shapes[f"ln{i}.gamma"] = (width,)
        shapes[f"ln{i}.beta"] = (width,)
    return shapes


def init_scorer(
    config: ScorerConfig,
    seed: int | RngStream = 0,
    store: ParamStore | None = None,
    prefix: str = "scorer.",
) -> ScorerParams:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains.

    Each ``g`` starts at the row norms of its ``v`` so the effective matrix
    equals ``v`` at initialization.
    """
    rng = seed.child("scorer") if isinstance(seed, RngStream) else RngStream(seed, ("init", "scorer"))
    store = ParamStore() if store is None else store
    for name, shape in layer_shapes(config).items():
        if name.endswith(".g"):
            v = store[prefix + name[:-2] + ".v"].data
            value = np.sqrt((v * v).sum(axis=1))
        elif name.startswith("W"):
            value = _glorot(rng, *shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(prefix + name, value)
    return ScorerParams(config, store, prefix)


def _phi(params: ScorerParams, i: int, x: Tensor, train: bool, rng: RngStream | None) -> Tensor:
    x = layer_norm(x, params[f"ln{i}.gamma"], params[f"ln{i}.beta"], LN_EPS)
    return dropout(gelu(x), params.config.dropout, train, rng)


def score(params: ScorerParams, h, mode: str = "eval", rng: RngStream | None = None) -> Tensor:
    """Relevance score for each caption feature row.

    ``h`` is ``(..., d)``; the result drops the last axis.  ``mode`` is
    ``"train"`` (dropout active, needs ``rng``) or ``"eval"``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = as_tensor(h)
    if h.shape[-1] != params.config.d:
        raise ShapeError(f"caption feature length {h.shape[-1]} does not match scorer input {params.config.d}")
    train = mode == "train"
    x = linear(h, params["W1"], params["b1"])
    x = _phi(params, 1, x, train, rng)
    for i in (2, 3, 4):
        W = weight_norm(params[f"W{i}.v"], params[f"W{i}.g"])
        x = linear(x, W, params[f"b{i}"])
        x = _phi(params, i, x, train, rng)
    out = linear(x, params["W5"], params["b5"])
    return out.reshape(out.shape[:-1])
