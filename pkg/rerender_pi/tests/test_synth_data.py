"""Tests for the procedural performers and dataset generation."""
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from rerender_pi.dataset import load_manifest, load_sequence_frame
from rerender_pi.keypoints import KEYPOINT_NAMES
from rerender_pi.synth_data import (CANONICAL_POSES, T_POSE, PoseParams, SubjectSpec, augment, degrade,
                                    generate_dataset, joint_positions, motion_sequence, random_pose, reference_pose,
                                    render_figure, similarity_matrix)

NO_DEGRADE = {
    'hole_count': 0,
    'hole_radius_min': 0.,
    'hole_radius_max': 0.,
    'noise_sigma': 0.,
    'blur_sigma': 0.,
    'jitter': 0.,
    'color_shift': 0.
}


def test_subject_is_seeded():
    assert SubjectSpec.from_seed(4) == SubjectSpec.from_seed(4)
    assert SubjectSpec.from_seed(4).palette != SubjectSpec.from_seed(5).palette
    subject = SubjectSpec.from_seed(4)
    subject.lengths['thigh'] = 0.
    with pytest.raises(ValueError):
        subject.validate()
    with pytest.raises(ValueError):
        joint_positions(subject, T_POSE)


def test_pose_limits():
    T_POSE.validate()
    for pose in CANONICAL_POSES:
        pose.validate()
    with pytest.raises(ValueError):
        PoseParams(r_knee=-10.).validate()
    assert PoseParams.from_array(T_POSE.as_array()) == T_POSE
    assert reference_pose(0) == T_POSE
    assert reference_pose(4).r_shoulder == pytest.approx(100.)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_poses_are_valid(seed):
    random_pose(np.random.default_rng(seed)).validate()


def test_motion_sequence():
    poses = motion_sequence(np.random.default_rng(0), 17)
    assert len(poses) == 17
    for pose in poses:
        pose.validate()
    steps = np.abs(np.diff([pose.as_array() for pose in poses], axis=0))
    # eased motion between key poses has no jumps
    assert steps.max() < 60.


def test_render_figure():
    subject = SubjectSpec.from_seed(0)
    image, mask, keypoints = render_figure(subject, T_POSE, 0, 64, 32)
    assert image.shape == (3, 64, 32) and image.dtype == np.float32
    assert mask.shape == (1, 64, 32)
    assert set(np.unique(mask)) <= {0., 1.}
    assert 0. <= image.min() and image.max() <= 1.
    assert not image[:, mask[0] == 0].any()
    assert keypoints.count_visible() > 15

    r_shoulder, l_shoulder = KEYPOINT_NAMES.index('r_shoulder'), KEYPOINT_NAMES.index('l_shoulder')
    assert keypoints.points[r_shoulder, 0] < 0 < keypoints.points[l_shoulder, 0]
    _, _, turned = render_figure(subject, T_POSE, 4, 64, 32)
    assert turned.points[r_shoulder, 0] > 0
    assert_allclose(turned.points[r_shoulder], keypoints.points[r_shoulder] * [-1, 1], atol=1e-9)


def test_degrade(sample_frame):
    gt_image, gt_mask = sample_frame.gt_image, sample_frame.gt_mask
    before = gt_image.copy()
    degraded = degrade(gt_image, gt_mask, seed=3)
    assert degraded.shape == gt_image.shape and degraded.dtype == np.float32
    assert 0. <= degraded.min() and degraded.max() <= 1.
    assert_allclose(gt_image, before)
    assert_allclose(degrade(gt_image, gt_mask, seed=3), degraded)
    assert not np.allclose(degrade(gt_image, gt_mask, seed=4), degraded)
    assert_allclose(degrade(gt_image, gt_mask, NO_DEGRADE, seed=3), gt_image)


def test_holes_stay_on_the_body(sample_frame):
    cfg = dict(NO_DEGRADE, hole_count=6, hole_radius_min=0.2, hole_radius_max=0.3)
    degraded = degrade(sample_frame.gt_image, sample_frame.gt_mask, cfg, seed=0)
    background = sample_frame.gt_mask[0] == 0
    assert_allclose(degraded[:, background], sample_frame.gt_image[:, background])
    assert (degraded != sample_frame.gt_image).any()


def test_similarity_matrix():
    matrix, offset = similarity_matrix(0., 1., (0., 0.), 8, 4)
    assert_allclose(matrix, np.eye(2))
    assert_allclose(offset, 0., atol=1e-12)
    matrix, offset = similarity_matrix(0., 2., (1., 0.), 9, 5)
    assert_allclose(matrix @ [4., 2.] + offset, [5., 2.])


def test_augment(sample_frame):
    same = augment(sample_frame, seed=0, max_translate=0., max_rotate=0., scale_range=(1., 1.))
    assert_allclose(same.gt_image, sample_frame.gt_image)
    assert same.keypoints == sample_frame.keypoints
    assert same.keypoints is not sample_frame.keypoints

    moved = augment(sample_frame, seed=1, max_rotate=0., scale_range=(1., 1.))
    assert set(np.unique(moved.gt_mask)) <= {0., 1.}
    both = moved.keypoints.visible & sample_frame.keypoints.visible
    shift = moved.keypoints.points[both] - sample_frame.keypoints.points[both]
    # a pure translation moves every keypoint by the same amount
    assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-9)
    assert moved.subject_id == sample_frame.subject_id


def test_generated_dataset(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    assert [record.name for record in manifest.subjects('train')] == ['subj0']
    assert [record.name for record in manifest.subjects('heldout')] == ['subj1']
    assert manifest.info.get('height') == 64
    assert manifest.verify(tiny_dataset) == []
    assert len(manifest.frame_keys('train')) == 12
    frame = load_sequence_frame(tiny_dataset, 'subj1', 5, 1)
    assert frame.gt_image.shape == (3, 64, 32)
    assert (frame.subject_id, frame.frame_id, frame.view_id) == ('subj1', 5, 1)
    with open(os.path.join(tiny_dataset, 'subj0', 'seq', '0000_0.json')) as handle:
        assert 'pose' in json.load(handle)


def test_generation_is_reproducible(tmpdir):
    kwargs = dict(n_subjects=1, frames_per_seq=2, n_views=2, n_refs=1, height=32, width=16, seed=7)
    first = generate_dataset('{}/a'.format(tmpdir), **kwargs)
    second = generate_dataset('{}/b'.format(tmpdir), **kwargs)
    assert first['subj0'].get('checksums') == second['subj0'].get('checksums')
    assert first['subj0'].get('checksums') != generate_dataset('{}/c'.format(tmpdir),
                                                               **dict(kwargs, seed=8))['subj0'].get('checksums')


def test_verify_finds_changed_files(tmpdir):
    root = '{}/data'.format(tmpdir)
    manifest = generate_dataset(root, n_subjects=1, frames_per_seq=1, n_views=1, n_refs=1, height=32, width=16)
    os.remove(os.path.join(root, 'subj0', 'seq', '0000_0_gt.png'))
    with open(os.path.join(root, 'subj0', 'ref', '00_0.json'), 'a') as handle:
        handle.write(' ')
    assert manifest.verify(root) == ['subj0/ref/00_0.json', 'subj0/seq/0000_0_gt.png']
