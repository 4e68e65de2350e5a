"""Full-catalog ranking evaluation with group utilities and fairness measures.

Run after demo 04 or standalone:  python demos/05_evaluation_report.py
"""

import json

import numpy as np

from bifair.bilevel import TrainConfig, train
from bifair.dataio import (PreprocessConfig, assign_attribute_groups,
                           assign_popularity_groups, load_interactions,
                           load_item_metadata, preprocess)
from bifair.embed import SemanticMatrix
from bifair.evalmetrics import (ReportOptions, build_report, cv, epsilon_if,
                                group_utilities, min_bottom, overall_metric,
                                rank_topk, write_report)
from bifair.synthdata import SynthDataConfig, benchmark_embeddings, generate, write_raw_files

sd = SynthDataConfig(num_users=250, num_items=150, num_genres=3, d_sem=12, seed=4)
data = generate(sd)
inter, meta = write_raw_files(data, "runs/demo05/raw")
ds = preprocess(load_interactions(inter), PreprocessConfig(seed=5))
genre = assign_attribute_groups(load_item_metadata(meta), ds)
pop = assign_popularity_groups(ds, 0.1)
Z0 = SemanticMatrix(benchmark_embeddings(data, ds, [0.05, 0.3, 0.6], seed=6), True)

cfg = TrainConfig(fairness="plain", train_z=False, inner_lr=0.1, tau=0.1,
                  batch_size=256, num_negatives=32, max_epochs=5, patience=5,
                  d_rec=16, seed=0)
model = train(ds, genre, Z0, cfg)

# the all-ranking protocol scores every item for every user, masking the
# user's train+val items for test evaluation
result = rank_topk(model.theta, model.Z.Z, ds, K=20, mask_policy="train+val", tau=cfg.tau)
print(f"overall recall@20 = {overall_metric(result, ds.test, 'recall'):.4f}")
print(f"overall ndcg@20   = {overall_metric(result, ds.test, 'ndcg'):.4f}")
print(f"overall hr@20     = {overall_metric(result, ds.test, 'hr'):.4f}")

util = group_utilities(result, ds, genre, metric="recall")
print(f"genre utilities: {np.round(util.values, 4)}")
print(f"cv = {cv(util):.4f}  min_bottom = {min_bottom(util):.4f}  "
      f"eps-fair(0.1) = {epsilon_if(util, 0.1)}")

report = build_report(model.theta, model.Z.Z, ds,
                      {"popularity": pop, "genre": genre},
                      ReportOptions(K=20, tau=cfg.tau))
write_report(report, "runs/demo05/report")
print("wrote runs/demo05/report/report.json:")
print(json.dumps(report["groupings"]["genre"], indent=2)[:400])
