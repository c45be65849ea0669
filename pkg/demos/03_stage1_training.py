# # Stage 1: a per-slice classifier trained on 7-slice blocks
#
# Batches are built from blocks of 7 consecutive slices centred on a sampled
# slice, with edge slices repeated at the volume boundaries. The backbone
# classifies every slice of every block into the six hemorrhage classes.

import numpy as np

from ichfusion.backbone import BackboneConfig, Stage1Config, dataset_loss, extract_descriptors, train_stage1
from ichfusion.phantom import PhantomConfig, generate_studies
from ichfusion.preprocessing import AugmentConfig
from ichfusion.sampler import Dataset, sample_batch

cfg = PhantomConfig(image_size=32, slices=(20, 24), seed=7)
train = Dataset.from_studies(generate_studies(cfg, 16, prefix="train"))
val = Dataset.from_studies(generate_studies(PhantomConfig(image_size=32, slices=(20, 24), seed=8), 4, prefix="val"))

batch = sample_batch(train, np.random.default_rng(0), blocks_per_batch=4)
print("batch images", batch.images.shape, "labels", batch.labels.shape)
print("first block members:", batch.blocks[0].member_indices)

stage1 = Stage1Config(
    epochs=20,
    blocks_per_batch=16,
    augment=AugmentConfig(flip_p=0.5),
    backbone=BackboneConfig(input_size=(32, 32)),
)
params, log = train_stage1(train, stage1, seed=0, val_dataset=val)
for rec in log["epochs"]:
    print(f"epoch {rec['epoch']:2d}  train {rec['train_loss']:.4f}  val {rec['val_loss']:.4f}  lr {rec['lr']:.2e}")
print("best epoch", log["best_epoch"], "validation loss", round(dataset_loss(val, params, stage1.backbone), 4))

# The trained classifier turns each study into a [slices, 6] descriptor matrix.
# At this budget the signal is weak but visible: lesion runs score higher.
desc = extract_descriptors(val, params, stage1.backbone)
i = int(np.argmax([val.labels(k)[:, 0].sum() for k in range(len(val))]))
sid = val.study_ids[i]
print(f"\n{sid} descriptors (any column) vs labels")
print(np.round(desc[sid][:, 0], 2))
print(val.labels(i)[:, 0].astype(int))
