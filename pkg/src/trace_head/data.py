"""Meme dataset records, the line-delimited JSON format, and a synthetic corpus.

File layout: the first line is a header ``{"version": 1, "d_img": N}``; each
following line is one example::

    {"id": "...", "label": 0|1, "image_embedding": [N floats], "captions": ["...", ...]}

Caption 1 is the original meme text; later captions are generated
candidates.  Synthetic files add ``signal_index`` (1-based, or null).
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Iterable, Sequence

import numpy as np

from .diffnum import RngStream

FORMAT_VERSION = 1

BENIGN_WORDS = (
    "morning coffee garden sunny walk friends park dog cat bicycle river "
    "mountain picnic smile music dance bread market window chair table "
    "book lamp street city train road cloud rain summer winter beach "
    "school teacher office laptop phone camera photo holiday family dinner "
    "kitchen tree flower bird game team goal ball field happy quiet "
    "bright yellow green blue orange simple little"
).split()

SIGNAL_WORDS = (
    "vermin subhuman invaders filth parasites savages infest exterminate "
    "mongrels plague degenerate scum"
).split()

assert not set(BENIGN_WORDS) & set(SIGNAL_WORDS)


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingFieldError(DatasetError):
    pass


class LabelError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class EmptyCaptionsError(DatasetError):
    pass


class HeaderError(DatasetError):
    pass


@dataclasses.dataclass
class Example:
    id: str
    label: int
    image_embedding: np.ndarray
    captions: list[str]
    signal_index: int | None = None  # synthetic ground truth, 1-based

    def to_record(self, include_signal: bool = False) -> dict:
        rec = {
            "id": self.id,
            "label": int(self.label),
            "image_embedding": [float(x) for x in self.image_embedding],
            "captions": list(self.captions),
        }
        if include_signal or self.signal_index is not None:
            rec["signal_index"] = self.signal_index
        return rec


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_dataset(path: str | os.PathLike, examples: Sequence[Example], d_img: int | None = None) -> None:
    if d_img is None:
        if not examples:
            raise DatasetError("cannot infer d_img from an empty dataset")
        d_img = len(examples[0].image_embedding)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump({"version": FORMAT_VERSION, "d_img": int(d_img)}) + "\n")
        with_signal = any(ex.signal_index is not None for ex in examples)
        for ex in examples:
            fh.write(_dump(ex.to_record(with_signal)) + "\n")


def parse_records(lines: Iterable[str]) -> list[Example]:
    it = iter(enumerate(lines, start=1))
    try:
        _, first = next(it)
    except StopIteration:
        raise HeaderError("empty file, expected a header line", 1) from None
    try:
        header = json.loads(first)
    except json.JSONDecodeError as err:
        raise HeaderError(f"header is not valid JSON ({err.msg})", 1) from None
    if not isinstance(header, dict) or "d_img" not in header or "version" not in header:
        raise HeaderError("header must be an object with 'version' and 'd_img'", 1)
    if header["version"] != FORMAT_VERSION:
        raise HeaderError(f"unsupported dataset version {header['version']!r}", 1)
    d_img = header["d_img"]
    if not isinstance(d_img, int) or d_img <= 0:
        raise HeaderError(f"d_img must be a positive integer, got {d_img!r}", 1)

    examples = []
    for lineno, raw in it:
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as err:
            raise DatasetError(f"invalid JSON ({err.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetError("record must be a JSON object", lineno)
        for field in ("id", "label", "image_embedding", "captions"):
            if field not in rec:
                raise MissingFieldError(f"missing field {field!r}", lineno)
        label = rec["label"]
        if isinstance(label, bool) or label not in (0, 1):
            raise LabelError(f"label must be 0 or 1, got {label!r}", lineno)
        emb = rec["image_embedding"]
        if not isinstance(emb, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in emb):
            raise DimensionError("image_embedding must be an array of numbers", lineno)
        if len(emb) != d_img:
            raise DimensionError(f"image_embedding has length {len(emb)}, header says d_img={d_img}", lineno)
        if not all(math.isfinite(x) for x in emb):
            raise DimensionError("image_embedding contains non-finite values", lineno)
        caps = rec["captions"]
        if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
            raise EmptyCaptionsError("captions must be an array of strings", lineno)
        if not caps:
            raise EmptyCaptionsError("caption list is empty", lineno)
        sig = rec.get("signal_index")
        if sig is not None and (not isinstance(sig, int) or not 1 <= sig <= len(caps)):
            raise DatasetError(f"signal_index {sig!r} out of range", lineno)
        examples.append(Example(str(rec["id"]), int(label), np.array(emb, dtype=np.float64), list(caps), sig))
    return examples


def load_dataset(path: str | os.PathLike) -> list[Example]:
    with open(path, encoding="utf-8") as fh:
        return parse_records(fh)


def dataset_d_img(examples: Sequence[Example]) -> int:
    return len(examples[0].image_embedding)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def gen_synthetic(count: int, d_img: int = 64, K: int = 3, alpha: float = 2.0, seed: int = 0) -> list[Example]:
    """Balanced toy corpus with a planted hateful caption.

    Labels alternate 0, 1.  Images are standard normal, shifted by
    ``alpha * u`` for hateful examples (``u`` a seed-derived unit vector).
    Every caption has 6-12 benign words; in a hateful example exactly one
    caption, chosen uniformly, has three words swapped for signal words.
    """
    if K < 2:
        raise ValueError(f"K must be at least 2, got {K}")
    if count <= 0 or count % 2:
        raise ValueError(f"count must be positive and even, got {count}")
    rng = RngStream(seed, ("synthetic",))
    u = rng.normal(d_img)
    u /= np.linalg.norm(u)
    examples = []
    for i in range(count):
        label = i % 2
        img = rng.normal(d_img) + (alpha * u if label else 0.0)
        caps = []
        for _ in range(K):
            n_words = int(rng.integers(6, 13))
            caps.append([BENIGN_WORDS[j] for j in rng.integers(0, len(BENIGN_WORDS), n_words)])
        signal = None
        if label:
            signal = int(rng.integers(0, K))
            slots = rng.permutation(len(caps[signal]))[:3]
            for slot in sorted(int(s) for s in slots):
                caps[signal][slot] = SIGNAL_WORDS[int(rng.integers(0, len(SIGNAL_WORDS)))]
            signal += 1
        examples.append(Example(f"syn-{i:05d}", label, img, [" ".join(c) for c in caps], signal))
    return examples


def reference_corpus(seed: int = 42, d_img: int = 64, K: int = 3, alpha: float = 2.0):
    """The 400 / 100 / 100 train / val / test split used by the benchmarks."""
    data = gen_synthetic(600, d_img=d_img, K=K, alpha=alpha, seed=seed)
    return data[:400], data[400:500], data[500:]
