"""Per-example explanation records: caption scores, probabilities, selection."""
from __future__ import annotations

import dataclasses
import json

from .data import Example
from .model import TraceModel
from .selector import eval_select


@dataclasses.dataclass
class CaptionRow:
    index: int
    text: str
    score: float
    raw_prob: float
    gumbel_prob: float


@dataclasses.dataclass
class Explanation:
    id: str
    captions: list[CaptionRow]
    selected_index: int
    probability: float
    predicted_label: int
    threshold: float
    label: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        d = dict(d)
        d["captions"] = [CaptionRow(**c) for c in d["captions"]]
        return cls(**d)

    def render(self) -> str:
        def name(y):
            return "Hateful" if y else "Not Hateful"

        out = [
            f"Image {self.id}:",
            f"Prediction: {name(self.predicted_label)} (Probability: {self.probability:.4f})",
        ]
        if self.label is not None:
            out.append(f"True Label: {name(self.label)}")
        out += ["", "Caption Scores:", ""]
        for row in self.captions:
            kind = "Text" if row.index == 1 else "Caption"
            out.append(f"{row.index}. {kind}: {row.text}")
            out.append("")
            out.append(f"   - Score: {row.score:.4f} | Raw Prob: {row.raw_prob:.4f} | Gumbel Prob: {row.gumbel_prob:.3f}")
            out.append("")
        out.append(f"Selected Caption Index: {self.selected_index}")
        return "\n".join(out)


def explain(model: TraceModel, example: Example, threshold: float = 0.5) -> Explanation:
    probs, scores = model.predict(model.make_batch([example]))
    k = len(example.captions)
    sel = eval_select(scores[0, :k])
    rows = [
        CaptionRow(i + 1, text, sel.scores[i], sel.raw_probs[i], sel.gumbel_probs[i])
        for i, text in enumerate(example.captions)
    ]
    p = float(probs[0])
    return Explanation(
        id=example.id,
        captions=rows,
        selected_index=sel.selected_index,
        probability=p,
        predicted_label=int(p >= threshold),
        threshold=threshold,
        label=example.label,
    )
