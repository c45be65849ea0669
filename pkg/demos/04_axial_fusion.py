# # Stage 2: fusing neighbouring slice descriptors
#
# The fusion network sees the 7x6 descriptor stack of a block and predicts the
# centre slice again. When the centre descriptor is noisy but its neighbours
# agree, the network can correct it.

import numpy as np

from ichfusion.fusion import Stage2Config, assemble_fusion_input, predict_from_descriptors, train_stage2
from ichfusion.metrics import weighted_log_loss
from ichfusion.phantom import NeighborConsistencyConfig, neighbor_consistency_dataset

nc = NeighborConsistencyConfig()
d_train, l_train = neighbor_consistency_dataset(nc, seed=1)
d_test, l_test = neighbor_consistency_dataset(nc, seed=2)

sid = next(iter(d_test))
print("fusion input for slice 0 (rows are slices -3..+3, edge rows repeat slice 0):")
print(np.round(assemble_fusion_input(d_test[sid], 0)[:, :, 0], 2))

cfg = Stage2Config()
params, log = train_stage2(d_train, l_train, cfg, seed=0)
print("\nfusion training loss by epoch:", [round(e["train_loss"], 4) for e in log["epochs"][::4]])

y = np.concatenate(list(l_test.values()))
baseline = np.concatenate(list(d_test.values()))
fused = np.concatenate([predict_from_descriptors(d, params, cfg.fusion) for d in d_test.values()])
lb, lf = weighted_log_loss(baseline, y), weighted_log_loss(fused, y)
print(f"held-out weighted log loss: centre descriptor {lb:.4f}, fused {lf:.4f} ({1 - lf / lb:.1%} lower)")
