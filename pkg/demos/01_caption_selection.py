# # Picking a caption
#
# Each meme comes with a few candidate captions.  A small scorer network
# gives every caption a hate-relevance score, and a Gumbel-softmax turns the
# scores into a (noisy, differentiable) choice during training.  At
# inference there is no noise: the top score wins.

import numpy as np

from trace_head import selector
from trace_head.diffnum import RngStream, Tensor, softmax
from trace_head.scorer import ScorerConfig, init_scorer, score

# Three scores from a worked example.  The raw softmax puts almost 89% of
# the mass on the third caption, and the deterministic path selects it.

scores = [-6.7855, -5.4245, -3.1250]
record = selector.eval_select(scores)
print("\n".join(record.lines()))

# During training the same scores get Gumbel noise and a temperature.
# Lower temperatures make the soft choice look more like a one-hot vector.

rng = RngStream(0)
noise = selector.sample_gumbel(3, rng)
for tau in (5.0, 1.0, 0.2):
    probs = selector.gumbel_softmax(np.array(scores), noise, tau).data
    print(f"tau={tau:<4} probs={np.round(probs, 3)}")

# The Gumbel-max trick: argmax(s + g) is an exact draw from softmax(s).
# Counting winners over many draws recovers the softmax.

g = selector.sample_gumbel((100_000, 3), rng.child("many"))
freq = np.bincount((np.array(scores) + g).argmax(axis=1), minlength=3) / 100_000
print("empirical", np.round(freq, 4), " softmax", np.round(softmax(Tensor(scores)).data, 4))

# The scorer itself: four LayerNorm/GELU/dropout blocks, the last three
# with weight-normalised matrices, then a single linear output.

params = init_scorer(ScorerConfig(d=64, h1=128, h2=64), seed=1)
caption_features = rng.child("features").normal((3, 64))
print("scores from a fresh scorer:", np.round(score(params, caption_features).data, 4))
