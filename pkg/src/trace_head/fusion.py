"""Projection, bidirectional cross-attention fusion, classifier head and losses."""
from __future__ import annotations

import dataclasses

import numpy as np

from .diffnum import (
    ParamStore,
    RngStream,
    ShapeError,
    Tensor,
    as_tensor,
    clip,
    concat,
    linear,
    log,
    sigmoid,
    softmax,
)

PROB_CLAMP = 1e-7
_ATTN = ("Wq", "Wk", "Wv")


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    d_img: int = 64
    d_text: int = 64
    D: int = 1024

    def __post_init__(self):
        if min(self.d_img, self.d_text, self.D) <= 0:
            raise ValueError(f"fusion dims must be positive, got {self}")


@dataclasses.dataclass
class FusionParams:
    config: FusionConfig
    store: ParamStore
    prefix: str = "fusion."

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self.prefix + key]

    def attn(self, direction: str) -> dict[str, Tensor]:
        return {k: self[f"{direction}.{k}"] for k in _ATTN}


@dataclasses.dataclass
class LossBreakdown:
    l_cls: float
    l_rel: float
    l_total: float


def param_shapes(config: FusionConfig) -> dict[str, tuple[int, ...]]:
    D = config.D
    shapes = {
        "img_proj.W": (config.d_img, D), "img_proj.b": (D,),
        "txt_proj.W": (config.d_text, D), "txt_proj.b": (D,),
    }
    # i2t: image queries attend to text; t2i: text queries attend to image
    for direction in ("i2t", "t2i"):
        shapes.update({f"{direction}.{k}": (D, D) for k in _ATTN})
    shapes["cls.W"] = (2 * D, 1)
    shapes["cls.b"] = (1,)
    return shapes


def init_fusion(
    config: FusionConfig,
    seed: int | RngStream = 0,
    store: ParamStore | None = None,
    prefix: str = "fusion.",
) -> FusionParams:
    rng = seed.child("fusion") if isinstance(seed, RngStream) else RngStream(seed, ("init", "fusion"))
    store = ParamStore() if store is None else store
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = (2.0 * rng.uniform(shape) - 1.0) * limit
        else:
            value = np.zeros(shape)
        store.add(prefix + name, value)
    return FusionParams(config, store, prefix)


def project(x, W, b) -> Tensor:
    return linear(x, W, b)


def cross_attention(Q, K, V) -> Tensor:
    """``softmax(Q K^T / sqrt(D)) V`` over the key axis.

    Shapes ``(..., 1, D)``, ``(..., M, D)``, ``(..., M, D)``.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if K.shape[-2] < 1 or Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"cross_attention shapes Q{Q.shape} K{K.shape} V{V.shape}")
    scale = 1.0 / np.sqrt(K.shape[-1])
    weights = softmax((Q @ K.swapaxes(-1, -2)) * scale, axis=-1)
    return weights @ V


def _attend(query: Tensor, source: Tensor, w: dict[str, Tensor]) -> Tensor:
    q = (query @ w["Wq"]).reshape(*query.shape[:-1], 1, query.shape[-1])
    k = (source @ w["Wk"]).reshape(*source.shape[:-1], 1, source.shape[-1])
    v = (source @ w["Wv"]).reshape(*source.shape[:-1], 1, source.shape[-1])
    out = cross_attention(q, k, v)
    return out.reshape(*query.shape)


def enhance(I_p, T_p, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Residual cross-attention in both directions, each from the original inputs."""
    I_p, T_p = as_tensor(I_p), as_tensor(T_p)
    if I_p.shape != T_p.shape or I_p.shape[-1] != params.config.D:
        raise ShapeError(f"enhance needs two (..., {params.config.D}) inputs, got {I_p.shape} and {T_p.shape}")
    I_enh = I_p + _attend(I_p, T_p, params.attn("i2t"))
    T_enh = T_p + _attend(T_p, I_p, params.attn("t2i"))
    return I_enh, T_enh


def classifier_logit(I_enh, T_enh, params: FusionParams) -> Tensor:
    F = concat([as_tensor(I_enh), as_tensor(T_enh)], axis=-1)
    out = linear(F, params["cls.W"], params["cls.b"])
    return out.reshape(out.shape[:-1])


def fuse_and_classify(I_enh, T_enh, params: FusionParams) -> Tensor:
    """Probability of the hateful class for ``[I_enh ; T_enh]``."""
    return sigmoid(classifier_logit(I_enh, T_enh, params))


def binary_cross_entropy(p, y) -> Tensor:
    p = clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return -(log(p) * y + log(1.0 - p) * (1.0 - y))


def loss_cls(p_hat, y) -> Tensor:
    """Per-example binary cross-entropy of the fused prediction."""
    return binary_cross_entropy(p_hat, y)


def expected_hate(sel_probs, scores) -> Tensor:
    """Selection-weighted hate probability ``sum_i p_i * sigmoid(s_i)``."""
    return (as_tensor(sel_probs) * sigmoid(as_tensor(scores))).sum(axis=-1)


def loss_rel(sel_probs, scores, y) -> Tensor:
    """Hate-relevance loss: BCE of :func:`expected_hate` against the label.

    The selection probabilities sum to one, so a BCE on their plain sum would
    be constant; each probability is therefore weighted by the caption's own
    hate probability ``sigmoid(score)``.
    """
    return binary_cross_entropy(expected_hate(sel_probs, scores), y)


def loss_total(l_cls, l_rel):
    return l_cls + l_rel
