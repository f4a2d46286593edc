import matplotlib
import pytest
import torch

from layout_guidance.data_loader import ShapesConfig, generate_shapes, records_to_images
from layout_guidance.diffusion import (DiffusionTrainConfig, NoiseSchedule, UNetConfig, build_unet, save_diffusion,
                                       train_diffusion)
from layout_guidance.embeddings import ToyEmbedder
from layout_guidance.scene_graph import Vocab
from layout_guidance.sg2seg import SG2SEGModelConfig, build_model

matplotlib.use('Agg')


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run long acceptance experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long acceptance experiment, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def embedder():
    return ToyEmbedder()


@pytest.fixture
def vocab():
    return Vocab(object_classes=('circle', 'square', 'triangle', 'star'),
                 relationship_classes=('left-of', 'above', 'inside', 'beside'))


@pytest.fixture
def sheep_vocab():
    return Vocab(object_classes=('sheep', 'grass', 'sky', 'tree'),
                 relationship_classes=('by', 'on', 'above', 'left of'))


@pytest.fixture(scope='session')
def shapes_records():
    return generate_shapes(ShapesConfig(seed=0), 24)


@pytest.fixture
def small_sg2seg():
    """Narrow network with the full 64x64 mask head"""
    config = SG2SEGModelConfig(embedding_dim=32, gconv_hidden_dim=64, gconv_num_layers=2, box_hidden_dim=64)
    return build_model(4, config, seed=0)


@pytest.fixture(scope='session')
def schedule():
    return NoiseSchedule.linear(1000, 1e-4, 2e-2)


@pytest.fixture
def tiny_unet():
    return build_unet(UNetConfig(base_channels=8, time_dim=32), seed=0)


@pytest.fixture
def diffusion_checkpoint(tmp_path, tiny_unet, schedule):
    return save_diffusion(tmp_path / 'ckpt' / 'diffusion.lgck', tiny_unet, schedule)


@pytest.fixture
def random_image():
    def make(seed: int, size: int = 32) -> torch.Tensor:
        generator = torch.Generator().manual_seed(seed)
        return torch.rand(3, size, size, generator=generator, dtype=torch.float64)
    return make


@pytest.fixture(scope='session')
def trained_diffusion(schedule):
    """Toy UNet fitted on 1000 generated scenes at 32 px; slow tests only"""
    records = generate_shapes(ShapesConfig(seed=11), 1000)
    images = records_to_images(records, size=32)
    model = build_unet(UNetConfig(), seed=0)
    train_diffusion(model, images, schedule, DiffusionTrainConfig(epochs=100, batch_size=64, learning_rate=1e-3))
    return model, images
