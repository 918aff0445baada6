# %% [markdown]
# # Train, decode and score a small model
#
# A reduced synthetic corpus keeps this to a couple of minutes on one core.  The
# acceptance suite runs the full-size version.

# %%
import tempfile
from pathlib import Path

import numpy as np

from csnat import pipeline
from csnat.config import RunConfig
from csnat.corpus import load_split
from csnat.scoring import cs_point_mer, mer

work = Path(tempfile.mkdtemp())
cfg = RunConfig(corpus_dir=str(work / "corpus"), out_dir=str(work / "exp"),
                n_train=600, n_valid=50, n_test=50, epochs=15, warmup=300, avg_last=3)
pipeline.run_gen_data(cfg)
print(sorted(p.name for p in (work / "corpus").iterdir()))

# %%
ckpt = pipeline.run_train(cfg)
print((work / "exp" / "train_curve.csv").read_text())

# %% [markdown]
# Mask-CTC decoding refines the low-confidence part of the CTC greedy
# output.  Compare the two on the test split.

# %%
vocab = pipeline._load_vocab(cfg)
test = load_split(cfg.corpus_dir, "test", vocab)
model = pipeline.load_model(cfg, ckpt, vocab)
results = pipeline.decode_utterances(model, cfg, test)
refs = [u.tokens for u in test]
print("greedy MER  %.2f" % mer(refs, [r.greedy for r in results]))
print("maskctc MER %.2f" % mer(refs, [r.hypothesis for r in results]))
print("CS-point MER %.2f" % cs_point_mer(refs, [r.hypothesis for r in results], vocab.langmap))
print("passes per utterance", np.bincount([r.passes for r in results]))

# %%
for u, r in list(zip(test, results))[:5]:
    print(" ".join(vocab.decode(u.tokens)), "|", " ".join(vocab.decode(r.hypothesis)))
