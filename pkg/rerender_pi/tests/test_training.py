"""Tests for the training stages and the pipeline driver."""
import json
import os

import numpy as np
import pytest

from rerender_pi import training
from rerender_pi.checkpoint import load_checkpoint
from rerender_pi.tests.conftest import make_small_settings
from rerender_pi.training import (MetricsLog, PipelineRun, Trainer, finetune, finetune_split, train_coarse_stage,
                                  train_detail_stage)


def test_metrics_log(tmpdir):
    path = '{}/metrics.csv'.format(tmpdir)
    log = MetricsLog(path)
    for step in (1, 2, 3):
        log.append({'step': step, 'stage': 'coarse', 'epoch': 0, 'loss_total': 0.5, 'l_c': 0.5})
    with pytest.raises(ValueError):
        log.append({'step': 5, 'stage': 'coarse', 'epoch': 0, 'loss_total': 0.5})
    assert [row['step'] for row in log.read()] == ['1', '2', '3']

    resumed = MetricsLog(path, resume_step=2)
    assert [row['step'] for row in resumed.read()] == ['1', '2']
    resumed.append({'step': 3, 'stage': 'coarse', 'epoch': 0, 'loss_total': 0.1})


def test_finetune_split():
    chosen, rest = finetune_split(30, 5, seed=0)
    assert len(chosen) == 5 and chosen == sorted(chosen)
    assert sorted(chosen + rest) == list(range(30))
    assert finetune_split(30, 5, seed=0) == (chosen, rest)
    with pytest.raises(ValueError):
        finetune_split(3, 5, seed=0)


def test_resolution_mismatch(tiny_dataset, tmpdir):
    with pytest.raises(ValueError):
        Trainer(make_small_settings(height=128, width=64), tiny_dataset, str(tmpdir))


def test_coarse_stage(tiny_dataset, tmpdir):
    out_dir = str(tmpdir)
    checkpoint = train_coarse_stage(make_small_settings(max_steps=2), tiny_dataset, out_dir)
    assert (checkpoint.stage, checkpoint.step) == ('coarse', 2)
    saved = load_checkpoint('{}/coarse/model.ckpt'.format(out_dir))
    assert saved.step == 2
    with open('{}/coarse/metrics.csv'.format(out_dir)) as handle:
        lines = handle.read().splitlines()
    assert lines[0].startswith('step,stage,epoch,loss_total,l_c')
    assert len(lines) == 3


def _read_bytes(path):
    with open(path, 'rb') as handle:
        return handle.read()


def _check_resume(data_dir, top_dir, steps):
    straight = train_coarse_stage(make_small_settings(max_steps=steps), data_dir, '{}/straight'.format(top_dir))

    interrupted = '{}/interrupted'.format(top_dir)
    half = steps // 2
    train_coarse_stage(make_small_settings(max_steps=half, checkpoint_every=half), data_dir, interrupted)
    resumed = train_coarse_stage(make_small_settings(max_steps=steps), data_dir, interrupted,
                                 resume='{}/coarse/model.ckpt'.format(interrupted))

    assert resumed.step == steps
    for name, array in straight.params.items():
        np.testing.assert_array_equal(resumed.params[name], array)
    resumed_trace = _read_bytes('{}/coarse/metrics.csv'.format(interrupted))
    assert resumed_trace == _read_bytes('{}/straight/coarse/metrics.csv'.format(top_dir))
    assert len(resumed_trace.splitlines()) == steps + 1


def test_resume_matches_uninterrupted_run(tiny_dataset, tmpdir):
    _check_resume(tiny_dataset, str(tmpdir), 4)


@pytest.mark.slow
def test_resume_matches_uninterrupted_run_20_steps(tiny_dataset, tmpdir):
    _check_resume(tiny_dataset, str(tmpdir), 20)


@pytest.mark.slow
def test_fixed_seed_runs_are_identical(tiny_dataset, tmpdir):
    for name in ('first', 'second'):
        train_coarse_stage(make_small_settings(max_steps=50, seed=7), tiny_dataset, '{}/{}'.format(tmpdir, name))
    first = _read_bytes('{}/first/coarse/metrics.csv'.format(tmpdir))
    assert len(first.splitlines()) == 51
    assert first == _read_bytes('{}/second/coarse/metrics.csv'.format(tmpdir))


def test_detail_stage(tiny_dataset, tmpdir):
    out_dir = str(tmpdir)
    with pytest.raises(ValueError):
        train_detail_stage(make_small_settings(max_steps=1), tiny_dataset, out_dir)

    coarse = train_coarse_stage(make_small_settings(max_steps=1), tiny_dataset, out_dir)
    detail = train_detail_stage(make_small_settings(max_steps=1), tiny_dataset, out_dir,
                                '{}/coarse/model.ckpt'.format(out_dir))
    # the coarse branch is frozen in the detail stage
    for name, array in coarse.params.items():
        if name.startswith('coarse.'):
            np.testing.assert_array_equal(detail.params[name], array)
    with open('{}/detail/metrics.csv'.format(out_dir)) as handle:
        header = handle.readline()
    assert 'lambda_r_img' in header

    detail_only = train_detail_stage(make_small_settings(max_steps=1, mode='detail_only'), tiny_dataset,
                                     '{}/detail_only'.format(tmpdir))
    assert (detail_only.stage, detail_only.step) == ('detail', 1)


def test_finetune(tiny_dataset, tiny_checkpoint, tmpdir):
    settings = make_small_settings(finetune_frames=1)
    checkpoint = finetune(settings, tiny_dataset, str(tmpdir), tiny_checkpoint, 'subj1')
    assert checkpoint.stage == 'finetune'
    assert checkpoint.step == 1
    before = load_checkpoint(tiny_checkpoint)
    for name, array in before.params.items():
        if name.startswith('detail.ref_encoder.'):
            np.testing.assert_array_equal(checkpoint.params[name], array)
    assert os.path.exists('{}/finetune/subj1/model.ckpt'.format(tmpdir))

    with pytest.raises(ValueError):
        finetune(make_small_settings(finetune_frames=7), tiny_dataset, str(tmpdir), tiny_checkpoint, 'subj1')
    with pytest.raises(ValueError):
        finetune(make_small_settings(finetune_ref_frames=3), tiny_dataset, str(tmpdir), tiny_checkpoint, 'subj1')


def test_pipeline_run(tiny_dataset, tmpdir):
    out_dir = str(tmpdir)
    settings = make_small_settings(max_steps=1, finetune_frames=1)
    run = PipelineRun(settings, tiny_dataset, out_dir)
    assert run.phase == 'coarse'
    run.run()
    assert run.phase == 'detail'

    # a new driver picks up the saved state
    run = PipelineRun(settings, tiny_dataset, out_dir)
    assert run.phase == 'detail'
    run.run()
    run.run()
    assert run.phase == 'done'
    run.run()
    with open('{}/state.json'.format(out_dir)) as handle:
        state = json.load(handle)
    assert state['phase'] == 'done'
    assert sorted(state['checkpoints']) == ['coarse', 'detail', 'finetune/subj1']


@pytest.mark.slow
def test_coarse_loss_decreases(tiny_dataset, tmpdir):
    settings = make_small_settings(max_steps=60, lr=1e-3, augment=False)
    train_coarse_stage(settings, tiny_dataset, str(tmpdir))
    log = MetricsLog('{}/coarse/metrics.csv'.format(tmpdir), resume_step=60)
    losses = [float(row['loss_total']) for row in log.read()]
    assert np.mean(losses[-6:]) < np.mean(losses[:6])


def test_pipeline_resumes_an_interrupted_stage(tiny_dataset, tmpdir, monkeypatch):
    out_dir = str(tmpdir)
    # an interrupted coarse stage left a checkpoint at step 2
    train_coarse_stage(make_small_settings(max_steps=2, checkpoint_every=2), tiny_dataset, out_dir)
    resumed_from = []

    def coarse_stage(settings, data_dir, out_dir, resume=None):
        resumed_from.append(resume)
        return train_coarse_stage(settings, data_dir, out_dir, resume)

    monkeypatch.setattr(training, 'train_coarse_stage', coarse_stage)
    run = PipelineRun(make_small_settings(max_steps=4), tiny_dataset, out_dir)
    run.run()
    assert resumed_from == ['{}/coarse/model.ckpt'.format(out_dir)]
    assert not os.path.exists('{}/coarse/model.ckpt.bak'.format(out_dir))
    assert load_checkpoint('{}/coarse/model.ckpt'.format(out_dir)).step == 4


def test_pipeline_skips_finetuned_subjects(tiny_dataset, tmpdir, monkeypatch):
    out_dir = str(tmpdir)
    settings = make_small_settings(max_steps=1, finetune_frames=1)
    run = PipelineRun(settings, tiny_dataset, out_dir, finetune_subjects=['subj0', 'subj1'])
    run.run()
    run.run()

    def fails_on_subj1(settings, data_dir, out_dir, full_ckpt, subject_id):
        if subject_id == 'subj1':
            raise RuntimeError('interrupted')
        return finetune(settings, data_dir, out_dir, full_ckpt, subject_id)

    monkeypatch.setattr(training, 'finetune', fails_on_subj1)
    with pytest.raises(RuntimeError):
        run.run()

    tuned = []

    def records_subjects(settings, data_dir, out_dir, full_ckpt, subject_id):
        tuned.append(subject_id)
        return finetune(settings, data_dir, out_dir, full_ckpt, subject_id)

    monkeypatch.setattr(training, 'finetune', records_subjects)
    run = PipelineRun(settings, tiny_dataset, out_dir)
    assert run.phase == 'finetune'
    assert list(run.state['checkpoints']) == ['coarse', 'detail', 'finetune/subj0']
    run.run()
    assert tuned == ['subj1']
    assert run.phase == 'done'
