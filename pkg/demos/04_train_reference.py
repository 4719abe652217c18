# # Training on the synthetic corpus
#
# The synthetic corpus plants three "signal" words in exactly one caption of
# every hateful example and shifts its image embedding.  We train twice, with
# and without the hate-relevance loss, and compare how often the model picks
# the planted caption.  Takes about a minute.

import dataclasses

from trace_head import data, training
from trace_head.explain import explain

train_set, val_set, test_set = data.reference_corpus(42)
cfg, model_cfg = training.REFERENCE_TRAIN_CONFIG, training.REFERENCE_MODEL_CONFIG

full = training.train(cfg, train_set, val_set, model_cfg)
print(full.history_csv())

ablation = training.train(dataclasses.replace(cfg, use_rel_loss=False), train_set, val_set, model_cfg)

for name, run in (("classification + relevance", full), ("classification only", ablation)):
    m = training.evaluate(run.model, test_set)
    sel = training.selection_accuracy(run.model, test_set)
    print(f"{name:<28} acc {m.accuracy:.3f}  macro-F1 {m.f1:.3f}  picks planted caption {sel:.3f}")

# What the model says about one hateful test meme.

hateful = next(ex for ex in test_set if ex.label == 1)
print(explain(full.model, hateful).render())
print("planted caption:", hateful.signal_index)
