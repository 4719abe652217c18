# # Macro metrics and McNemar's test
#
# Macro averages weight both classes equally.  McNemar's test compares two
# classifiers on the same examples using only the cases where they disagree.

from trace_head.metrics import classification_metrics, mcnemar, mcnemar_counts, metrics_from_counts

m = metrics_from_counts(tp=2, fp=1, fn=1, tn=4)
print(f"accuracy {m.accuracy:.4f}  precision {m.precision:.4f}  recall {m.recall:.4f}  F1 {m.f1:.4f}")

# A predictor that always says "not hateful" gets half the macro recall.

print("always-0 macro recall:", classification_metrics([0, 1, 0, 1], [0, 0, 0, 0]).recall)

# Disagreement counts from three model comparisons.

for n10, n01 in [(93, 90), (197, 104), (172, 82)]:
    stat, p = mcnemar(n10, n01)
    print(f"n10={n10:<4} n01={n01:<4} statistic {stat:6.2f}  p {p:.4g}")

# Or straight from prediction vectors.

y = [1, 0, 1, 1, 0, 0, 1, 0]
a = [1, 0, 1, 1, 0, 1, 1, 0]
b = [0, 0, 1, 0, 0, 1, 0, 1]
print(mcnemar_counts(y, a, b))
