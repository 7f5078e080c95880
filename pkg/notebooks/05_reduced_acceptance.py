# %% [markdown]
# # Diversity, baseline ordering and the synthesized-data sweep at reduced scale
#
# The same three end-to-end protocols as the full acceptance runs, at a size a
# single CPU finishes in a few hours: 32x32 slices, 60 source and 60 target
# patients, batch 8, 500 iterations, narrow networks. Learning rate and loss
# weights keep their defaults. Set UADA_SCALE=full for the desk-scale budget.

# %%
import json
import logging
import os
import time
from pathlib import Path

from uada.experiments import FULL_SCALE, REDUCED_SCALE, diversity_experiment, ordering_experiment, sweep_experiment

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
scale = FULL_SCALE if os.environ.get("UADA_SCALE") == "full" else REDUCED_SCALE
OUT = Path(os.environ.get("UADA_RESULTS", "results")) / scale.name
OUT.mkdir(parents=True, exist_ok=True)
print(scale)

# %% [markdown]
# Stochastic vs deterministic translation: spread of 10 translations per
# source slice, and dice of the segmenter on those translations.

# %%
t0 = time.time()
div = diversity_experiment(scale, OUT / "diversity", n_styles=10)
print(json.dumps(div, indent=1), f"{time.time() - t0:.0f}s")

# %% [markdown]
# Four regimes, five folds, three seeds.

# %%
t0 = time.time()
order = ordering_experiment(scale, OUT / "ordering")
print((OUT / "ordering" / "table.txt").read_text(), f"{time.time() - t0:.0f}s")

# %% [markdown]
# AP against the share of source patients available for synthesis.

# %%
t0 = time.time()
sweep = sweep_experiment(scale, OUT / "sweep")
for row in sweep["summary"]:
    print(f"{row['percent']:5.0f}%  AP {row['ap_mean']:.1f} (± {row['ap_std']:.1f})")
print(f"gain {sweep['ap_gain']:.1f}", f"{time.time() - t0:.0f}s")
