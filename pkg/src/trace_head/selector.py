"""Caption selection with Gumbel-softmax, plus the noise-free inference path."""
from __future__ import annotations

import dataclasses

import numpy as np

from .diffnum import RngStream, Tensor, as_tensor, softmax, straight_through

U_CLAMP = 1e-12


def sample_gumbel(count, rng: RngStream) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log(u))``, u clamped to [1e-12, 1 - 1e-12]."""
    if np.prod(count) < 1:
        raise ValueError("need at least one draw")
    u = np.clip(rng.uniform(count), U_CLAMP, 1.0 - U_CLAMP)
    return gumbel_from_uniform(u)


def gumbel_from_uniform(u) -> np.ndarray:
    return -np.log(-np.log(np.asarray(u, dtype=np.float64)))


def gumbel_softmax(scores, noise, tau: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """``softmax((s + g) / tau)`` over the last axis.

    With zero noise and ``tau == 1`` this is exactly :func:`softmax` of the
    scores.  ``mask`` marks which candidates exist (ragged caption lists).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = as_tensor(scores)
    return softmax((scores + np.asarray(noise, dtype=np.float64)) / tau, axis=-1, mask=mask)


def hard_one_hot(probs: np.ndarray) -> np.ndarray:
    """One-hot at the argmax of the last axis; ties go to the lowest index."""
    probs = np.asarray(probs)
    out = np.zeros_like(probs, dtype=np.float64)
    np.put_along_axis(out, probs.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return out


def select_features(caption_features, probs, mode: str = "soft") -> Tensor:
    """Collapse ``(..., K, d)`` caption features to ``(..., d)``.

    ``soft`` takes the probability-weighted sum.  ``hard_st`` returns the
    argmax row in the forward pass and the soft gradient in the backward pass.
    """
    feats, probs = as_tensor(caption_features), as_tensor(probs)
    if mode == "hard_st":
        probs = straight_through(hard_one_hot(probs.data), probs)
    elif mode != "soft":
        raise ValueError(f"selection mode must be 'soft' or 'hard_st', got {mode!r}")
    return (feats * probs.reshape(*probs.shape, 1)).sum(axis=-2)


@dataclasses.dataclass
class SelectionResult:
    scores: list[float]
    raw_probs: list[float]
    gumbel_probs: list[float]
    selected_index: int  # 1-based
    temperature: float = 1.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(**d)

    def lines(self) -> list[str]:
        rows = [
            f"{i}. Score: {s:.4f} | Raw Prob: {r:.4f} | Gumbel Prob: {g:.3f}"
            for i, (s, r, g) in enumerate(zip(self.scores, self.raw_probs, self.gumbel_probs), start=1)
        ]
        rows.append(f"Selected Caption Index: {self.selected_index}")
        return rows


def eval_select(scores) -> SelectionResult:
    """Deterministic selection: no noise, one-hot at the highest score."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size < 1:
        raise ValueError("need at least one caption score")
    raw = softmax(Tensor(s)).data
    hard = hard_one_hot(s)
    return SelectionResult(
        scores=s.tolist(),
        raw_probs=raw.tolist(),
        gumbel_probs=hard.tolist(),
        selected_index=int(s.argmax()) + 1,
        temperature=1.0,
    )
