"""Unit tests and regression for StageConfig classes."""
import pytest

from rerender_pi.network import RerenderNet
from rerender_pi.stage_configs import (CoarseStageConfig, DetailStageConfig, FinetuneStageConfig, make_stage_config)


def test_stages(small_settings):
    """Build all three stages and check which parameters each one trains.

    Parameters
    ----------
    small_settings : RunSettings
        Provided in conftest.py
    """
    configs = [CoarseStageConfig(), DetailStageConfig(), FinetuneStageConfig()]
    model = RerenderNet(small_settings.model_params)
    for config in configs:
        with pytest.raises(KeyError):
            config.build_stage(model)
        config.scan_dictionary({'lr': 1e-3, 'unused': 1})
        assert config.get('lr') == 1e-3
        with pytest.raises(KeyError):
            config.build_stage(model)
        config.scan_metadata(small_settings)
        assert not config.get_missing_keys()

    coarse, detail, finetune = (config.build_stage(model) for config in configs)
    assert coarse.trainable_names and all(name.startswith('coarse.') for name in coarse.trainable_names)
    assert all(name.startswith('detail.') for name in detail.trainable_names)
    assert set(coarse.trainable_names).isdisjoint(detail.trainable_names)
    assert all(name.startswith('detail.ref_encoder.') for name in finetune.frozen_names)
    assert finetune.frozen_names
    # the last stage built decides the flags
    for name, parameter in model.named_parameters():
        assert parameter.requires_grad == (name in finetune.trainable_names)
    assert coarse.settings['batch_size'] == 2


def test_stage_modes(small_settings):
    small_settings.set(mode='coarse_only')
    coarse_only = RerenderNet(small_settings.model_params)
    with pytest.raises(ValueError):
        make_stage_config('detail', small_settings).build_stage(coarse_only)
    plan = make_stage_config('finetune', small_settings).build_stage(coarse_only)
    assert all(name.startswith('coarse.') for name in plan.trainable_names)

    small_settings.set(mode='detail_only')
    detail_only = RerenderNet(small_settings.model_params)
    with pytest.raises(ValueError):
        make_stage_config('coarse', small_settings).build_stage(detail_only)

    with pytest.raises(ValueError):
        make_stage_config('production', small_settings)
