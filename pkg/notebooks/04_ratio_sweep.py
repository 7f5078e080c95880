# %% [markdown]
# # How much synthesized data helps
#
# The share of source patients available for synthesis is varied while the
# labeled target data stays fixed. Each point is a cross-validated AP,
# repeated over seeds.

# %%
from pathlib import Path

from uada.config import BaselineMode, TrainConfig
from uada.metrics import SweepAxis, ratio_sweep
from uada.phantom import DatasetConfig, build_dataset
from uada.segmentation import SegConfig
from uada.translation import TranslatorConfig

OUT = Path("notebook_output")

manifest = build_dataset(DatasetConfig(n_source=10, n_target=10, slices_per_patient=2, grid_size=32),
                         OUT / "data_sweep")
base = TrainConfig(mode=BaselineMode.STOCH_TRANSLATION_SEG_RA, batch_size=4, iterations=10,
                   translator=TranslatorConfig(base_width=4, n_res=1, mlp_dim=16, disc_width=4, style_downsample=3),
                   segmenter=SegConfig(widths=(4, 8), kernel_size=3))

# %%
result = ratio_sweep(manifest, base, SweepAxis.SYNTH_GIVEN_REAL, grid=(10, 100), seeds=(0, 1), folds=(0, 1),
                     out_dir=OUT / "sweep")
for row in result.summary():
    print(f"{row['percent']:5.0f}%  AP {row['ap_mean']:.1f} (± {row['ap_std']:.1f})")
