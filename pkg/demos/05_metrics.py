# # Evaluation: weighted log loss, per-class AUC, study-level aggregation

import numpy as np

from ichfusion.metrics import evaluate_arrays, roc_auc, study_level_aggregate, weighted_log_loss
from ichfusion.oracles import pairwise_auc

# "any" carries weight 2/7 and each sub-type 1/7, so constant 0.5 scores ln 2.
rng = np.random.default_rng(0)
y = (rng.random((200, 6)) < 0.3).astype(float)
y[:, 0] = y[:, 1:].max(axis=1)
print("all-0.5 loss", weighted_log_loss(np.full_like(y, 0.5), y), "ln 2", np.log(2))

# AUC from average ranks agrees with counting every positive/negative pair.
scores = np.round(rng.random(200) + 0.5 * y[:, 0], 1)  # rounding creates ties
print("AUC ranks", roc_auc(scores, y[:, 0]), "pairwise", pairwise_auc(scores.tolist(), y[:, 0].tolist()))

# Noisy predictions that lean toward the truth, summarised as a table.
preds = np.clip(0.25 * y + 0.75 * rng.random(y.shape), 0.0, 1.0)
print()
print(evaluate_arrays(preds, y).table())

# A study is positive for a class when any of its slices is.
slices = rng.random((5, 6))
print("\nslice rows\n", np.round(slices, 2))
print("study row\n", np.round(study_level_aggregate(slices), 2))
