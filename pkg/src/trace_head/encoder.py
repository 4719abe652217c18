"""Toy pre-norm transformer text encoder with last-n-block fine-tuning.

Layout::

    x = tok_emb[ids] + pos_emb[:T]
    for each block:  x += MHA(LN1(x));  x += FFN(LN2(x))
    h = masked_mean(LN_f(x))

Token and position tables are never trained; they play the role of the
fixed lookup in front of the encoder stack.
"""
from __future__ import annotations

import dataclasses
import re

import numpy as np

from .diffnum import (
    ParamStore,
    RngStream,
    ShapeError,
    Tensor,
    as_tensor,
    gelu,
    layer_norm,
    linear,
    no_grad,
    softmax,
    take_rows,
)

PAD_ID = 0
BOS_ID = 1
LN_EPS = 1e-5
EMBED_STD = 1.0

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    max_len: int = 77
    width: int = 64
    num_layers: int = 6
    num_heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave room for padding and begin ids")
        if self.max_len < 1 or self.width < 1 or self.num_heads < 1 or self.ffn_mult < 1:
            raise ValueError(f"invalid encoder config {self}")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} is not divisible by {self.num_heads} heads")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")


@dataclasses.dataclass
class EncoderParams:
    config: EncoderConfig
    store: ParamStore
    prefix: str = "encoder."

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self.prefix + key]

    def names(self) -> list[str]:
        return [n for n in self.store if n.startswith(self.prefix)]


@dataclasses.dataclass
class TrainabilityMask:
    flags: dict[str, bool]
    n: int
    total: int
    trainable: int


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, max_len: int = 77, vocab_size: int = 4096) -> list[int]:
    """Begin id followed by hashed word / punctuation ids, truncated to ``max_len``.

    Each piece maps to ``fnv1a_64(utf8) % (vocab_size - 2) + 2``.
    """
    ids = [BOS_ID] + [fnv1a_64(w.encode("utf-8")) % (vocab_size - 2) + 2 for w in split_words(text)]
    return ids[:max_len]


def pad_batch(seqs: list[list[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack id lists into ``(N, T)`` ids and a boolean token mask."""
    T = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) > T:
            raise ShapeError(f"sequence of length {len(s)} exceeds pad length {T}")
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def block_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.width, config.ffn_mult * config.width
    shapes: dict[str, tuple[int, ...]] = {"ln1.gamma": (d,), "ln1.beta": (d,)}
    for proj in ("q", "k", "v", "o"):
        shapes[f"attn.W{proj}"] = (d, d)
        shapes[f"attn.b{proj}"] = (d,)
    shapes.update({
        "ln2.gamma": (d,), "ln2.beta": (d,),
        "ffn.W_in": (d, f), "ffn.b_in": (f,),
        "ffn.W_out": (f, d), "ffn.b_out": (d,),
    })
    return shapes


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "tok_emb": (config.vocab_size, config.width),
        "pos_emb": (config.max_len, config.width),
    }
    for b in range(config.num_layers):
        shapes.update({f"blocks.{b}.{k}": s for k, s in block_shapes(config).items()})
    shapes["ln_f.gamma"] = (config.width,)
    shapes["ln_f.beta"] = (config.width,)
    return shapes


def init_encoder(
    config: EncoderConfig,
    seed: int | RngStream = 0,
    store: ParamStore | None = None,
    prefix: str = "encoder.",
) -> EncoderParams:
    """Unit-normal embedding tables, Glorot-uniform projections, zero biases.

    The two matrices writing into the residual stream (``attn.Wo``,
    ``ffn.W_out``) are scaled by ``1 / sqrt(2 L)`` so token identity survives
    a deep stack of untrained blocks.
    """
    rng = seed.child("encoder") if isinstance(seed, RngStream) else RngStream(seed, ("init", "encoder"))
    store = ParamStore() if store is None else store
    residual_scale = 1.0 / np.sqrt(2 * max(config.num_layers, 1))
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            store.add(prefix + name, rng.normal(shape) * EMBED_STD, trainable=False)
            continue
        if leaf.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            if leaf in ("Wo", "W_out"):
                limit *= residual_scale
            value = (2.0 * rng.uniform(shape) - 1.0) * limit
        elif leaf == "gamma":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(prefix + name, value)
    return EncoderParams(config, store, prefix)


def freeze_mask(config: EncoderConfig, n: int) -> TrainabilityMask:
    """Trainable flags for fine-tuning only the last ``n`` blocks (+ final LayerNorm)."""
    L = config.num_layers
    if not 0 <= n <= L:
        raise ValueError(f"n must lie in [0, {L}], got {n}")
    shapes = param_shapes(config)
    flags = {}
    for name in shapes:
        if name.startswith("blocks."):
            flags[name] = int(name.split(".")[1]) >= L - n
        else:
            flags[name] = name.startswith("ln_f.")
    sizes = {k: int(np.prod(s)) for k, s in shapes.items()}
    return TrainabilityMask(
        flags=flags,
        n=n,
        total=sum(sizes.values()),
        trainable=sum(sizes[k] for k, f in flags.items() if f),
    )


def apply_mask(params: EncoderParams, mask: TrainabilityMask) -> None:
    params.store.set_trainable({params.prefix + k: v for k, v in mask.flags.items()})


def count_params(params: EncoderParams, mask: TrainabilityMask) -> tuple[int, int]:
    """(total, trainable) element counts of the encoder under ``mask``."""
    names = {n[len(params.prefix):] for n in params.names()}
    if names != set(mask.flags):
        extra = sorted(names.symmetric_difference(mask.flags))
        raise KeyError(f"mask does not match encoder tensors: {extra[:5]}")
    total = trainable = 0
    for name in names:
        size = params[name].data.size
        total += size
        trainable += size if mask.flags[name] else 0
    return total, trainable


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def multi_head_attention(x, attn: dict[str, Tensor], num_heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Bidirectional self-attention over ``x`` of shape ``(N, T, d)``.

    ``attn`` holds ``Wq, bq, Wk, bk, Wv, bv, Wo, bo``.  Keys where
    ``key_mask`` is false receive zero attention weight.
    """
    x = as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
        km = None if key_mask is None else np.asarray(key_mask).reshape(1, -1)
        return multi_head_attention(x, attn, num_heads, km).reshape(*x.shape[1:])
    N, T, d = x.shape
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(N, T, num_heads, dh).swapaxes(1, 2)

    q = heads(linear(x, attn["Wq"], attn["bq"]))
    k = heads(linear(x, attn["Wk"], attn["bk"]))
    v = heads(linear(x, attn["Wv"], attn["bv"]))
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    weights = softmax(logits, axis=-1, mask=mask)
    ctx = (weights @ v).swapaxes(1, 2).reshape(N, T, d)
    return linear(ctx, attn["Wo"], attn["bo"])


def _block_attn(params: EncoderParams, b: int) -> dict[str, Tensor]:
    return {k: params[f"blocks.{b}.attn.{k}"] for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}


def embed(params: EncoderParams, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    T = ids.shape[-1]
    if T > params.config.max_len:
        raise ShapeError(f"sequence length {T} exceeds max_len {params.config.max_len}")
    return take_rows(params["tok_emb"], ids) + params["pos_emb"][:T]


def run_block(params: EncoderParams, b: int, x: Tensor, mask: np.ndarray) -> Tensor:
    p = f"blocks.{b}."
    h = layer_norm(x, params[p + "ln1.gamma"], params[p + "ln1.beta"], LN_EPS)
    x = x + multi_head_attention(h, _block_attn(params, b), params.config.num_heads, mask)
    h = layer_norm(x, params[p + "ln2.gamma"], params[p + "ln2.beta"], LN_EPS)
    h = gelu(linear(h, params[p + "ffn.W_in"], params[p + "ffn.b_in"]))
    return x + linear(h, params[p + "ffn.W_out"], params[p + "ffn.b_out"])


def pool(params: EncoderParams, x: Tensor, mask: np.ndarray) -> Tensor:
    x = layer_norm(x, params["ln_f.gamma"], params["ln_f.beta"], LN_EPS)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    return (x * m).sum(axis=-2) / m.sum(axis=-2)


def first_live_block(params: EncoderParams) -> int:
    """Index of the first block holding a trainable tensor (``L`` if none)."""
    L = params.config.num_layers
    for b in range(L):
        if any(t.requires_grad for n, t in params.store.items() if n.startswith(f"{params.prefix}blocks.{b}.")):
            return b
    return L


def encode_prefix(params: EncoderParams, ids: np.ndarray, mask: np.ndarray, stop: int) -> np.ndarray:
    """Hidden states after blocks ``[0, stop)``, computed without a tape."""
    with no_grad():
        x = embed(params, ids)
        for b in range(stop):
            x = run_block(params, b, x, mask)
    return x.data


def encode(
    params: EncoderParams,
    ids,
    mask: np.ndarray | None = None,
    hidden: np.ndarray | None = None,
    start: int = 0,
) -> Tensor:
    """Pooled ``d``-vector per sequence.

    ``ids`` is ``(T,)`` or ``(N, T)``.  When ``hidden`` is given it replaces
    the embedding output and the blocks before ``start`` (see
    :func:`encode_prefix`).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ShapeError("cannot encode an empty id sequence")
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    mask = (ids != PAD_ID) if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
    if not mask.any(axis=-1).all():
        raise ShapeError("every sequence needs at least one unmasked token")
    if hidden is None:
        x, start = embed(params, ids), 0
    else:
        x = Tensor(hidden.reshape(ids.shape + (params.config.width,)))
    for b in range(start, params.config.num_layers):
        x = run_block(params, b, x, mask)
    out = pool(params, x, mask)
    return out.reshape(out.shape[-1]) if single else out


def encode_text(params: EncoderParams, text: str) -> Tensor:
    cfg = params.config
    return encode(params, tokenize(text, cfg.max_len, cfg.vocab_size))
