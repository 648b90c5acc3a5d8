"""Retrieval grids: a perfect reader, and a sliding-window model that cannot see far enough."""

import numpy as np

from hybridlm import init_params, preset
from hybridlm.longeval import (GridSpec, build_copy_model, checkpoint_sweep, echo_oracle,
                               greedy_runner, receptive_field, run_grid)

lengths, depths = [8, 16, 24, 48], [0.0, 0.5, 1.0]
print("echo reader (passkey):")
print(run_grid(echo_oracle(), lengths, depths, 4).to_table())

# two attention layers with window 8 reach back 2 * (8 - 1) = 14 tokens and no further
copy = build_copy_model()
print(f"\ncopy model, receptive field {receptive_field(copy.config)}:")
print(run_grid(greedy_runner(copy), lengths, depths, 4, key_len=1).to_table())

# pick between checkpoints on retrieval accuracy and held-out log-likelihood
held = np.random.default_rng(0).integers(28, 64, 64)
noise = init_params(preset("phonebook-demo"), seed=3)  # same shape, random weights
report = checkpoint_sweep([copy, noise], GridSpec(lengths=(12, 24), depths=(0.0, 1.0), key_len=1),
                          heldout_tokens=held)
print()
print(report.to_table())
