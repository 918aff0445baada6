# %% [markdown]
# # N-best lists and the MWE criterion
#
# Output-Nbest enumerates fill-ins of the masked positions; the MWE loss
# weights each hypothesis' centred edit distance by its renormalised
# posterior.

# %%
import numpy as np

from csnat import numerics as nx
from csnat.masking import MaskPlan
from csnat.objectives import gen_output_nbest, mwe_loss

rng = np.random.default_rng(1)
logits = nx.parameter(rng.normal(size=(4, 5)) * 2)
# the reference agrees with the model's best guess, so distances differ across the list
truth = (np.argmax(logits.data, axis=-1) + 1).tolist()
plan = MaskPlan(4, (1, 3))

nb = gen_output_nbest(nx.log_softmax(logits), plan, truth, n=4)
for hyp, lp, d in zip(nb.hypotheses, nb.log_posteriors.data, nb.distances):
    print(hyp, round(float(lp), 3), d)

# %% [markdown]
# Shifting every distance or every log-posterior by a constant leaves
# the loss unchanged.

# %%
base = mwe_loss(nb)
print(base.item(),
      mwe_loss(log_posteriors=nb.log_posteriors.data, distances=nb.distances + 3).item(),
      mwe_loss(log_posteriors=nb.log_posteriors.data - 7, distances=nb.distances).item())

# %% [markdown]
# The gradient pushes probability away from hypotheses with more errors
# than the list average.

# %%
nx.backward(base)
print(np.round(logits.grad, 4))
