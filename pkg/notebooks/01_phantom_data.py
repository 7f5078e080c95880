# %% [markdown]
# # Phantom data
#
# Two imaging modalities of the same kind of anatomy: a 3-channel source
# modality with labels for every patient, and a 5-channel target modality
# whose appearance (channel gains, bias field, texture, lesion contrast)
# varies from patient to patient. Only some target patients are labeled.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from uada.phantom import (
    DatasetConfig,
    build_dataset,
    generate_anatomy,
    lesion_mask,
    load_slices,
    render_source,
    render_target,
)
from uada.domains import Domain

OUT = Path("notebook_output")
OUT.mkdir(exist_ok=True)

# %% [markdown]
# One anatomy rendered in both modalities. The target rendering depends on a
# style seed; the lesion mask does not.

# %%
anatomy = generate_anatomy(seed=7)
src = render_source(anatomy).image
tgts = [render_target(anatomy, style_seed=s).image for s in range(3)]
mask = lesion_mask(anatomy)
print("lesions:", len(anatomy.lesions), "lesion pixels:", int(mask.sum()))

fig, axes = plt.subplots(1, 5, figsize=(12, 2.6))
axes[0].imshow(src[0], cmap="gray")
axes[0].set_title("source ch0")
axes[1].imshow(mask, cmap="Reds")
axes[1].set_title("mask")
for k, t in enumerate(tgts):
    axes[k + 2].imshow(t[0], cmap="gray")
    axes[k + 2].set_title(f"target style {k}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "phantom_styles.png")

# %% [markdown]
# Stored slices are z-scored per channel.

# %%
print("per-channel mean", np.round(tgts[0].mean(axis=(1, 2)), 6))
print("per-channel std ", np.round(tgts[0].std(axis=(1, 2)), 6))

# %% [markdown]
# A small dataset on disk, with its patient-level folds.

# %%
manifest = build_dataset(DatasetConfig(n_source=10, n_target=10, slices_per_patient=2, grid_size=32), OUT / "data")
for fold, ids in manifest.folds.items():
    print(fold, ids)
labeled = load_slices(manifest, Domain.TARGET, labeled=True)
print(len(labeled), "labeled target slices from", len({s.patient_id for s in labeled}), "patients")
