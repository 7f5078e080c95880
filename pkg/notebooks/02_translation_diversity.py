# %% [markdown]
# # One-to-many translation
#
# A source slice translated into the target modality with several sampled
# style codes. A deterministic model (style fixed at zero) is trained next to
# it for comparison: its translations do not vary, and the segmenter's dice on
# the translations measures how much lesion structure survives translation.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from uada.config import BaselineMode, TrainConfig
from uada.domains import Domain
from uada.metrics import diversity_report
from uada.phantom import DatasetConfig, build_dataset, load_slices
from uada.segmentation import SegConfig
from uada.trainer import train
from uada.translation import TranslatorConfig

OUT = Path("notebook_output")
ITERS = 30  # raise for nicer pictures

manifest = build_dataset(DatasetConfig(n_source=10, n_target=10, slices_per_patient=2, grid_size=32),
                         OUT / "data_translation")
small = dict(batch_size=4, iterations=ITERS, translator=TranslatorConfig(base_width=4, n_res=1, mlp_dim=16,
             disc_width=4, style_downsample=3), segmenter=SegConfig(widths=(4, 8), kernel_size=3))

# %%
models = {}
for mode in (BaselineMode.STOCH_TRANSLATION_SEG, BaselineMode.DET_TRANSLATION_SEG):
    models[mode], history = train(TrainConfig(mode=mode, **small), manifest)
    print(mode.value, "final objective", round(history.rows[-1]["total"], 3))

# %%
src = load_slices(manifest, Domain.SOURCE)[:8]
for mode, model in models.items():
    rep = diversity_report(model, src, n_styles=10)
    print(f"{mode.value:24s} diversity {rep.diversity:.4f}  structure dice {rep.structure_dice:.1f}")

# %%
model = models[BaselineMode.STOCH_TRANSLATION_SEG]
x = torch.from_numpy(src[0].image).unsqueeze(0).expand(4, -1, -1, -1)
with torch.no_grad():
    styles = model.translator.sample_style(4, torch.Generator().manual_seed(0))
    fakes = model.translator.translate(x, Domain.SOURCE, Domain.TARGET, styles)
fig, axes = plt.subplots(1, 5, figsize=(11, 2.4))
axes[0].imshow(src[0].image[0], cmap="gray")
axes[0].contour(src[0].mask, levels=[0.5], colors="r", linewidths=0.8)
for k in range(4):
    axes[k + 1].imshow(fakes[k, 0], cmap="gray")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "translations.png")
