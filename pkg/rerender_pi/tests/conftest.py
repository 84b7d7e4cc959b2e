import os

import numpy as np
import pytest

from rerender_pi.checkpoint import ModelCheckpoint, save_checkpoint
from rerender_pi.dataset import ImageFrame
from rerender_pi.network import RerenderNet
from rerender_pi.params import RunSettings
from rerender_pi.synth_data import SubjectSpec, T_POSE, degrade, render_figure, generate_dataset

HEIGHT, WIDTH = 64, 32


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run the long training experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training experiment, only run with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def make_small_settings(**kwargs):
    """Settings of a network small enough to train in a unit test."""
    settings = RunSettings()
    settings.set(height=HEIGHT, width=WIDTH, base_channels=4, spade_hidden=8, n_refs=4, batch_size=2,
                 finetune_ref_frames=2, finetune_epochs=1)
    settings.set(**kwargs)
    return settings


@pytest.fixture()
def data_dir():
    parent_dir = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
    return '{}/data'.format(parent_dir)


@pytest.fixture()
def small_settings():
    return make_small_settings()


@pytest.fixture()
def small_model(small_settings):
    return RerenderNet(small_settings.model_params)


@pytest.fixture()
def sample_frame():
    """A degraded view of a procedural subject in the T pose."""
    subject = SubjectSpec.from_seed(3)
    gt_image, gt_mask, keypoints = render_figure(subject, T_POSE, 0, HEIGHT, WIDTH)
    return ImageFrame(gt_image=gt_image, gt_mask=gt_mask, rendered_input=degrade(gt_image, gt_mask, seed=1),
                      keypoints=keypoints, view_id=0, frame_id=0, subject_id='subj0')


@pytest.fixture(scope='session')
def tiny_dataset(tmpdir_factory):
    """One training and one held-out subject, 6 frames x 2 views each and 2
    reference poses."""
    root = str(tmpdir_factory.mktemp('dataset'))
    generate_dataset(root, n_subjects=1, frames_per_seq=6, n_views=2, n_refs=2, height=HEIGHT, width=WIDTH, seed=0,
                     n_heldout=1)
    return root


@pytest.fixture(scope='session')
def tiny_checkpoint(tmpdir_factory):
    """An untrained full model at the small test size."""
    settings = make_small_settings()
    model = RerenderNet(settings.model_params)
    path = '{}/model.ckpt'.format(tmpdir_factory.mktemp('ckpt'))
    save_checkpoint(ModelCheckpoint.capture(model, settings, 'detail'), path)
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
