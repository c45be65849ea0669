# # Windowing CT slices into three channels
#
# A CT slice stores attenuation in Hounsfield units (HU). Each window maps an
# HU interval [level - width/2, level + width/2] linearly onto [0, 1] and clamps
# everything outside it. Three windows side by side make a 3-channel image.

import numpy as np

from ichfusion.phantom import PhantomConfig, generate_study
from ichfusion.preprocessing import BONE, BRAIN, SUBDURAL, AugmentConfig, apply_window, augment, compose_channels

# The window centre always maps to 0.5.
for name, win in (("brain", BRAIN), ("subdural", SUBDURAL), ("bone", BONE)):
    print(f"{name:9s} level {win.level:6.0f} width {win.width:6.0f} -> centre maps to {float(apply_window(win.level, win))}")

# Air, water, fresh blood and bone under each window.
hu = np.array([-1000.0, 0.0, 60.0, 1000.0])
print("HU       ", hu)
for name, win in (("brain", BRAIN), ("subdural", SUBDURAL), ("bone", BONE)):
    print(f"{name:9s}", np.round(apply_window(hu, win), 3))

# A phantom study: skull ring, brain, and any planted hyperdense lesions.
rng = np.random.default_rng(0)
study = generate_study(rng, PhantomConfig(image_size=32, slices=(12, 12)), "demo")
channels = compose_channels(study.hu)
print("\nvolume", study.hu.shape, "-> windowed", channels.shape)
print("labels per slice (any column):", study.labels[:, 0].astype(int))

# Lesion slices are brighter inside the brain window.
lesion = study.labels[:, 0] == 1
if lesion.any():
    print("mean brain-window intensity, lesion slices:", channels[lesion, 0].mean().round(4))
print("mean brain-window intensity, clean slices: ", channels[~lesion, 0].mean().round(4))

# Training-time augmentation: crop, flip, rotation, distortion and noise, all
# applied identically to the three channels.
img, lab = augment(channels[:1], study.labels[:1], np.random.default_rng(1), AugmentConfig.training_default())
print("\naugmented slice", img.shape, "range", img.min().round(3), img.max().round(3))
