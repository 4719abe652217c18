"""Full classification head: encoder -> scorer -> selection -> fusion."""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import encoder as enc
from . import fusion as fus
from . import scorer as sc
from .diffnum import ParamStore, RngStream, Tensor, no_grad
from .selector import gumbel_softmax, hard_one_hot, sample_gumbel, select_features


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    encoder: enc.EncoderConfig = enc.EncoderConfig()
    h1: int = 1024
    h2: int = 512
    dropout: float = 0.2
    D: int = 1024
    d_img: int = 64

    def scorer_config(self) -> sc.ScorerConfig:
        return sc.ScorerConfig(self.encoder.width, self.h1, self.h2, self.dropout)

    def fusion_config(self) -> fus.FusionConfig:
        return fus.FusionConfig(self.d_img, self.encoder.width, self.D)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = enc.EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclasses.dataclass
class Batch:
    """Padded tensors for B examples with up to K captions of up to T tokens."""

    ids: np.ndarray        # (B, K, T) int
    tok_mask: np.ndarray   # (B, K, T) bool
    cap_mask: np.ndarray   # (B, K) bool
    images: np.ndarray     # (B, d_img)
    labels: np.ndarray     # (B,) float

    def __len__(self) -> int:
        return self.ids.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.ids[idx], self.tok_mask[idx], self.cap_mask[idx], self.images[idx], self.labels[idx])


@dataclasses.dataclass
class Forward:
    scores: Tensor      # (B, K)
    sel_probs: Tensor   # (B, K)
    prob: Tensor        # (B,)
    cap_mask: np.ndarray


class TraceModel:
    def __init__(self, config: ModelConfig, store: ParamStore, seed: int = 0):
        self.config = config
        self.store = store
        self.seed = seed
        self.encoder = enc.EncoderParams(config.encoder, store)
        self.scorer = sc.ScorerParams(config.scorer_config(), store)
        self.fusion = fus.FusionParams(config.fusion_config(), store)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TraceModel":
        rng = RngStream(seed).child("init")
        store = ParamStore()
        enc.init_encoder(config.encoder, rng, store)
        sc.init_scorer(config.scorer_config(), rng, store)
        fus.init_fusion(config.fusion_config(), rng, store)
        return cls(config, store, seed)

    def apply_freeze(self, n: int | None) -> enc.TrainabilityMask | None:
        if n is None:
            return None
        mask = enc.freeze_mask(self.config.encoder, n)
        enc.apply_mask(self.encoder, mask)
        return mask

    # -- batching ----------------------------------------------------------
    def make_batch(self, examples: Sequence, length: int | None = None, K: int | None = None) -> Batch:
        cfg = self.config.encoder
        K = max(len(ex.captions) for ex in examples) if K is None else K
        seqs = [[enc.tokenize(c, cfg.max_len, cfg.vocab_size) for c in ex.captions] for ex in examples]
        T = max(len(s) for caps in seqs for s in caps) if length is None else length
        B = len(examples)
        ids = np.zeros((B, K, T), dtype=np.int64)
        tok_mask = np.zeros((B, K, T), dtype=bool)
        cap_mask = np.zeros((B, K), dtype=bool)
        for i, caps in enumerate(seqs):
            for k in range(K):
                s = caps[k] if k < len(caps) else [enc.BOS_ID]
                ids[i, k, : len(s)] = s
                tok_mask[i, k, : len(s)] = True
                cap_mask[i, k] = k < len(caps)
        images = np.stack([np.asarray(ex.image_embedding, dtype=np.float64) for ex in examples])
        if images.shape[1] != self.config.d_img:
            raise ValueError(f"image embedding length {images.shape[1]} does not match model d_img {self.config.d_img}")
        labels = np.array([ex.label for ex in examples], dtype=np.float64)
        return Batch(ids, tok_mask, cap_mask, images, labels)

    # -- forward -----------------------------------------------------------
    def prefix_start(self) -> int:
        return enc.first_live_block(self.encoder)

    def prefix_states(self, batch: Batch) -> np.ndarray:
        """Frozen-prefix hidden states ``(B, K, T, d)`` for caching."""
        B, K, T = batch.ids.shape
        flat = enc.encode_prefix(self.encoder, batch.ids.reshape(B * K, T), batch.tok_mask.reshape(B * K, T), self.prefix_start())
        return flat.reshape(B, K, T, -1)

    def caption_features(self, batch: Batch, hidden: np.ndarray | None = None) -> Tensor:
        B, K, T = batch.ids.shape
        flat_ids = batch.ids.reshape(B * K, T)
        flat_mask = batch.tok_mask.reshape(B * K, T)
        if hidden is None:
            h = enc.encode(self.encoder, flat_ids, flat_mask)
        else:
            h = enc.encode(self.encoder, flat_ids, flat_mask, hidden=hidden.reshape(B * K, T, -1), start=self.prefix_start())
        return h.reshape(B, K, -1)

    def forward(
        self,
        batch: Batch,
        train: bool = False,
        tau: float = 1.0,
        selection: str = "soft",
        dropout_rng: RngStream | None = None,
        gumbel_rng: RngStream | None = None,
        hidden: np.ndarray | None = None,
    ) -> Forward:
        """Eval mode: no dropout, no noise, hard argmax selection.

        Train mode: dropout in the scorer and Gumbel-softmax selection at
        temperature ``tau`` (``selection`` is ``soft`` or ``hard_st``).
        Without ``dropout_rng`` / ``gumbel_rng`` the training path runs
        without dropout / noise.
        """
        feats = self.caption_features(batch, hidden)
        mode = "train" if train and dropout_rng is not None else "eval"
        scores = sc.score(self.scorer, feats, mode, dropout_rng)
        cap_mask = batch.cap_mask
        if train:
            g = sample_gumbel(scores.shape, gumbel_rng) if gumbel_rng is not None else np.zeros(scores.shape)
            probs = gumbel_softmax(scores, g, tau, mask=cap_mask)
            text = select_features(feats, probs, selection)
        else:
            masked = np.where(cap_mask, scores.data, -np.inf)
            probs = Tensor(hard_one_hot(masked))
            text = select_features(feats, probs, "soft")
        f = self.fusion
        I_p = fus.project(batch.images, f["img_proj.W"], f["img_proj.b"])
        T_p = fus.project(text, f["txt_proj.W"], f["txt_proj.b"])
        I_enh, T_enh = fus.enhance(I_p, T_p, f)
        return Forward(scores, probs, fus.fuse_and_classify(I_enh, T_enh, f), cap_mask)

    def losses(self, out: Forward, labels: np.ndarray, use_rel: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        """Batch-mean (l_cls, l_rel, l_total); l_rel is zero when disabled."""
        l_cls = fus.loss_cls(out.prob, labels).mean()
        if use_rel:
            l_rel = fus.loss_rel(out.sel_probs, out.scores, labels).mean()
        else:
            l_rel = Tensor(0.0)
        return l_cls, l_rel, fus.loss_total(l_cls, l_rel)

    def predict(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities, raw caption scores) on the deterministic path."""
        with no_grad():
            out = self.forward(batch, train=False)
        return out.prob.data.copy(), np.where(batch.cap_mask, out.scores.data, -np.inf)
