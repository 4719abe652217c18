# # How many encoder blocks to tune
#
# One model per n with everything else held fixed, scored on the test
# split.  Takes a couple of minutes.

from trace_head import data, training

train_set, val_set, test_set = data.reference_corpus(42)
rows = training.layer_sweep(
    training.REFERENCE_TRAIN_CONFIG, [0, 1, 2, 4, 6], train_set, val_set, test_set,
    training.REFERENCE_MODEL_CONFIG,
)
print(training.sweep_csv(rows))

for r in rows:
    print(f"n={r.n}  {'#' * round(40 * r.macro_f1)} {r.macro_f1:.3f}")
