"""Preference tuning arithmetic, checkpoint merging, and near-duplicate removal."""

import math

import numpy as np

from hybridlm import init_params, preset
from hybridlm.dedup import DedupConfig, dedup_corpus
from hybridlm.prefkit import DpoHyper, PreferencePair, dpo_loss, merge_weighted

# the loss starts at ln 2 when policy equals reference, and a longer chosen answer costs more
hp = DpoHyper(beta=0.1, alpha_len=0.02, gamma_sft=0.0)
for n_chosen in (10, 20, 40):
    p = PreferencePair(5, n_chosen, 10, -20.0, -22.0, -20.0, -22.0, 1.0, 0.0)
    print(f"chosen length {n_chosen:>2}: loss {dpo_loss(p, hp)[0]:.4f} (ln 2 = {math.log(2):.4f})")

# linear merge of two checkpoints
a, b = (init_params(preset("tiny-m"), seed=s) for s in (1, 2))
m = merge_weighted([a, b], [0.25, 0.75])
print("merge is the weighted mean:",
      np.allclose(m.tensors["embed"], 0.25 * a.tensors["embed"] + 0.75 * b.tensors["embed"]))

docs = [
    "The cat sat on the mat and looked out of the window all afternoon.",
    "The cat sat on the mat and looked out of the window all afternoon!",
    "A completely different sentence about trains leaving the station at noon.",
    "the cat sat on the mat and looked out of the  window all afternoon.",
]
kept = dedup_corpus(docs, DedupConfig(ngram=5))
print("kept documents:", [docs[i] for i in kept])
