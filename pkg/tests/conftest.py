import pytest
import torch

from uada.config import TrainConfig
from uada.phantom import DatasetConfig, build_dataset
from uada.segmentation import SegConfig
from uada.translation import TranslatorConfig

SMALL_DATA = DatasetConfig(n_source=10, n_target=10, labeled_fraction=0.5, slices_per_patient=2, grid_size=32, seed=3)

TOY_TRANSLATOR = TranslatorConfig(
    source_channels=1, target_channels=1, base_width=2, n_downsample=1, n_res=1, style_dim=2, mlp_dim=4,
    disc_width=2, disc_layers=2, style_downsample=1, stem_kernel=3,
)
TOY_SEG = SegConfig(source_channels=1, target_channels=1, widths=(2, 4), kernel_size=3)

SMALL_TRANSLATOR = TranslatorConfig(base_width=4, n_res=1, mlp_dim=16, disc_width=4, style_downsample=3)
SMALL_SEG = SegConfig(widths=(4, 8), kernel_size=3)


def small_train_config(**kw):
    base = dict(batch_size=4, iterations=2, pretrain_iterations=2, translator=SMALL_TRANSLATOR, segmenter=SMALL_SEG)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return build_dataset(SMALL_DATA, root)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
