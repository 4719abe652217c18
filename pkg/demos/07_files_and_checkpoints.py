# # Datasets and checkpoints on disk
#
# Datasets are line-delimited JSON with a header line.  Checkpoints are one
# binary file: a magic string, a JSON manifest and float32 tensors.

import tempfile
from pathlib import Path

import numpy as np

from trace_head import checkpoint, data
from trace_head.diagnostics import TOY_CONFIG
from trace_head.model import TraceModel
from trace_head.training import predict_dataset

tmp = Path(tempfile.mkdtemp())
examples = data.gen_synthetic(6, d_img=TOY_CONFIG.d_img, seed=3)
data.save_dataset(tmp / "toy.jsonl", examples)
print((tmp / "toy.jsonl").read_text().splitlines()[1][:120], "...")

# Broken records are rejected with the line number.

(tmp / "bad.jsonl").write_text('{"version": 1, "d_img": 4}\n{"id": "x", "label": 2, "image_embedding": [0,0,0,0], "captions": ["hi"]}\n')
try:
    data.load_dataset(tmp / "bad.jsonl")
except data.DatasetError as err:
    print("rejected:", err)

# Parameters are stored as float32, so predictions move by round-off only.

model = TraceModel.init(TOY_CONFIG, seed=7)
checkpoint.save_checkpoint(model, tmp / "toy.ckpt")
back = checkpoint.load_checkpoint(tmp / "toy.ckpt")
before, _ = predict_dataset(model, examples)
after, _ = predict_dataset(back, examples)
print("max prediction change:", np.abs(before - after).max())
print("file starts with:", (tmp / "toy.ckpt").read_bytes()[:9])
