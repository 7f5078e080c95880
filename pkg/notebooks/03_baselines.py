# %% [markdown]
# # Baselines under cross-validation
#
# Each regime is trained on four target folds (plus source data where the
# regime uses it) and evaluated per patient on the held-out fold. The table
# reports mean (± sample std) over folds, in percent.

# %%
from pathlib import Path

from uada.config import BaselineMode, TrainConfig
from uada.metrics import cross_validate
from uada.phantom import DatasetConfig, build_dataset
from uada.segmentation import SegConfig
from uada.translation import TranslatorConfig

OUT = Path("notebook_output")
ITERS = 20

manifest = build_dataset(DatasetConfig(n_source=10, n_target=10, slices_per_patient=2, grid_size=32),
                         OUT / "data_baselines")
small = dict(batch_size=4, iterations=ITERS, pretrain_iterations=ITERS,
             translator=TranslatorConfig(base_width=4, n_res=1, mlp_dim=16, disc_width=4, style_downsample=3),
             segmenter=SegConfig(widths=(4, 8), kernel_size=3))

# %%
configs = {m.value: TrainConfig(mode=m, **small) for m in BaselineMode}
table = cross_validate(manifest, configs)
print(table.to_text())
