# %% [markdown]
# # CTC and mask planning on toy inputs
#
# A three-frame grid over blank plus two tokens, scored by the
# forward-backward recursion and by enumerating every frame path.

# %%
import itertools

import numpy as np

from csnat.ctc import brute_force_ctc, collapse, ctc_loss, greedy_decode
from csnat.masking import CN, EN, Vocabulary, complement, detect_cs_pairs, plan_mask
from csnat.numerics import make_rng

probs = np.array([[0.1, 0.7, 0.2],
                  [0.5, 0.3, 0.2],
                  [0.2, 0.2, 0.6]])
lp = np.log(probs)

for labels in ([1], [1, 2], [2], []):
    print(labels, ctc_loss(lp, labels).item(), brute_force_ctc(lp, labels))

# %% [markdown]
# Summing the probability of every label sequence the grid can emit
# gives one.

# %%
total = 0.0
for n in range(4):
    for lab in itertools.product([1, 2], repeat=n):
        nll = brute_force_ctc(lp, lab)
        if np.isfinite(nll):
            total += np.exp(-nll)
print("total probability", total)

# %% [markdown]
# Greedy decoding collapses the frame argmax; each token's confidence is
# the best frame probability in its run.

# %%
print(collapse([1, 1, 0, 2, 2, 0, 2]))
print(greedy_decode(lp))

# %% [markdown]
# ## Masking strategies
#
# ids 1-2 are English, 3-4 Mandarin.  The utterance switches twice.

# %%
vocab = Vocabulary(["okay", "then", "我", "们"], [EN, EN, CN, CN])
utt = [3, 4, 1, 2, 3]
print(detect_cs_pairs(utt, vocab.langmap))

rng = make_rng(0)
for strategy in "RFSME":
    plan = plan_mask(strategy, utt, vocab.langmap, rng)
    print(strategy, plan.positions, "complement", complement(plan).positions)
