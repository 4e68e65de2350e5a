"""A small end-to-end training run of the two-level loop.

Synthesizes a biased benchmark, trains with the adaptive fair loss and
trainable representations, and prints the per-epoch trajectory.
Run:  python demos/04_bilevel_training.py   (about half a minute)
"""

import numpy as np

from bifair.bilevel import TrainConfig, train
from bifair.dataio import (PreprocessConfig, assign_attribute_groups,
                           load_interactions, load_item_metadata, preprocess)
from bifair.embed import SemanticMatrix
from bifair.synthdata import SynthDataConfig, benchmark_embeddings, generate, write_raw_files

sd = SynthDataConfig(num_users=300, num_items=200, num_genres=3, d_sem=12,
                     signal_scale=0.5, seed=1)
data = generate(sd)
inter, meta = write_raw_files(data, "runs/demo04/raw")
ds = preprocess(load_interactions(inter), PreprocessConfig(seed=2))
genre = assign_attribute_groups(load_item_metadata(meta), ds)

# genre 0 ships clean embeddings, genre 2 very noisy ones
Z0 = SemanticMatrix(benchmark_embeddings(data, ds, [0.05, 0.3, 0.6], seed=3), True)

cfg = TrainConfig(fairness="bifair", inner_lr=0.1, outer_lr=0.001, tau=0.1,
                  batch_size=256, num_negatives=32, max_epochs=6, patience=6,
                  d_rec=16, seed=0)
model = train(ds, genre, Z0, cfg)

print(f"{'epoch':>5} {'val recall@20':>14} {'val cv@20':>10}  group losses")
for rec in model.history:
    losses = ", ".join("-" if x is None else f"{x:.3f}" for x in rec["group_losses"])
    cv = "-" if rec["val_cv"] is None else f"{rec['val_cv']:.4f}"
    print(f"{rec['epoch']:>5} {rec['val_recall']:>14.4f} {cv:>10}  [{losses}]")
print(f"best epoch: {model.best_epoch}")
print(f"mean Frank-Wolfe weights in the last epoch "
      f"(per group + entropy): {np.round(model.history[-1]['mean_weights'], 3)}")
