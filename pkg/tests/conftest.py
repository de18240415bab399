import numpy as np
import pytest
import torch

from semsr.dataset import build_dataset
from semsr.losses import LossWeights
from semsr.models import DiscriminatorConfig, GeneratorConfig, SegmenterConfig
from semsr.training import TrainConfig


def pytest_configure(config):
    torch.set_num_threads(max(torch.get_num_threads(), 2))
    config.addinivalue_line(
        "markers", "criterion(num, name): acceptance criterion identifier"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        status = "PASS" if report.passed else "FAIL"
        line = f"[acceptance] criterion {marker.args[0]} ({marker.args[1]}): {status}"
        reporter = item.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """20 small tiles, enough to exercise every pipeline mechanism quickly."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    return build_dataset(root, seeds=range(20), scales=[4], size=128, class_count=6)


@pytest.fixture()
def tiny_train_config():
    return TrainConfig(
        batch_size=4,
        crop=64,
        segmenter_steps=40,
        seg_val_interval=20,
        pretrain_steps=12,
        finetune_steps=8,
        val_interval=6,
        checkpoint_interval=6,
        segmenter_miou_floor=0.0,
        weights=LossWeights(),
        seed=11,
    )


@pytest.fixture()
def tiny_gen_config():
    return GeneratorConfig(scale=4, rrdb_count=1, dense_blocks=1, base_channels=16, growth_channels=8)


@pytest.fixture()
def tiny_disc_config():
    return DiscriminatorConfig(stage_channels=(16, 32))


@pytest.fixture()
def tiny_seg_config():
    return SegmenterConfig(class_count=6, encoder_channels=(8, 16))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
