"""Unit tests for reference selection."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rerender_pi.dataset import ImageFrame, load_manifest
from rerender_pi.keypoints import KeypointSet
from rerender_pi.reference_selection import (GRID_COLS, GRID_ROWS, ReferenceEntry, SelectionScore, count_matches,
                                             keypoint_distance, load_reference_set, patch_descriptors,
                                             score_reference, select_reference)
from rerender_pi.synth_data import SubjectSpec, random_pose, reference_pose, render_figure


def _keypoints(points, visible=None):
    return KeypointSet(points, np.ones(25, dtype=bool) if visible is None else visible)


def test_keypoint_distance(rng):
    points = rng.uniform(-0.5, 0.5, (25, 2))
    assert keypoint_distance(_keypoints(points), _keypoints(points)) == pytest.approx(0.)

    visible = np.ones(25, dtype=bool)
    visible[:3] = False
    penalized = keypoint_distance(_keypoints(points), _keypoints(points, visible), lambda_miss=0.2)
    assert penalized >= 3 * 0.2

    none = np.zeros(25, dtype=bool)
    assert math.isinf(keypoint_distance(_keypoints(points), _keypoints(points, none)))


@settings(max_examples=30, deadline=None)
@given(dx=st.floats(-0.3, 0.3), dy=st.floats(-0.3, 0.3))
def test_keypoint_distance_ignores_translation(dx, dy):
    points = np.random.default_rng(5).uniform(-0.5, 0.5, (25, 2))
    assert keypoint_distance(_keypoints(points), _keypoints(points + [dx, dy])) == pytest.approx(0., abs=1e-9)


def test_patch_descriptors():
    cells, descriptors = patch_descriptors(np.zeros((3, 64, 32)))
    assert len(cells) == 0 and descriptors.shape[0] == 0
    image = np.random.default_rng(0).uniform(0, 1, (3, 64, 32))
    cells, descriptors = patch_descriptors(image)
    assert len(cells) == GRID_ROWS * GRID_COLS
    np.testing.assert_allclose(np.linalg.norm(descriptors, axis=1), 1.)


def test_count_matches():
    image = np.random.default_rng(0).uniform(0, 1, (3, 64, 32))
    assert count_matches(image, image) == GRID_ROWS * GRID_COLS
    assert count_matches(image, np.zeros_like(image)) == 0
    with pytest.raises(ValueError):
        count_matches(image, np.zeros((3, 32, 32)))


def test_selection_score():
    score = SelectionScore(kp_distance=0.3, missing_penalty=0.4, match_count=64)
    assert score.value == pytest.approx(-0.7 + 0.5 * 64 / 128)


def test_select_reference(sample_frame):
    subject = SubjectSpec.from_seed(3)
    refs = []
    for pose_id in (1, 3, 0):
        image, _, keypoints = render_figure(subject, reference_pose(pose_id), 0, 64, 32)
        refs.append(ReferenceEntry(image, keypoints, name='pose{}'.format(pose_id)))
    # the clean T pose is reference pose 0
    clean = sample_frame.with_input(sample_frame.gt_image)
    assert select_reference(clean, refs) == 2
    assert select_reference(clean, [refs[2], refs[2]]) == 0
    with pytest.raises(ValueError):
        select_reference(sample_frame, [])

    score = score_reference(clean.rendered_input, clean.keypoints, refs[2])
    assert score.kp_distance == pytest.approx(0., abs=1e-9)
    assert score.match_count > 0


def test_load_reference_set(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    refs = load_reference_set(tiny_dataset, manifest, 'subj0')
    assert [entry.name for entry in refs] == ['subj0/ref/00_0', 'subj0/ref/00_1', 'subj0/ref/01_0', 'subj0/ref/01_1']
    assert len(load_reference_set(tiny_dataset, manifest, 'subj0', n_refs=3)) == 3
    assert refs[0].image.shape == (3, 64, 32)
    with pytest.raises(ValueError):
        load_reference_set(tiny_dataset, manifest, 'subj9')


def _cell_descriptors(image):
    gray = image.mean(axis=0)
    cell_h, cell_w = gray.shape[0] // GRID_ROWS, gray.shape[1] // GRID_COLS
    descriptors = []
    for row in range(GRID_ROWS):
        for col in range(GRID_COLS):
            patch = gray[row * cell_h:(row + 1) * cell_h, col * cell_w:(col + 1) * cell_w].ravel()
            patch = patch - patch.mean()
            if np.linalg.norm(patch) >= 1e-6:
                descriptors.append(patch / np.linalg.norm(patch))
    return descriptors


def _brute_force_matches(image_a, image_b):
    a, b = np.array(_cell_descriptors(image_a)), np.array(_cell_descriptors(image_b))
    if len(a) == 0 or len(b) == 0:
        return 0
    matches = 0
    for i, descriptor in enumerate(a):
        similarities = b @ descriptor
        j = int(np.argmax(similarities))
        if int(np.argmax(a @ b[j])) == i and similarities[j] > 0.8:
            matches += 1
    return matches


def _brute_force_score(frame, entry, lambda_miss=0.2, mu=0.5):
    ours, theirs = frame.keypoints, entry.keypoints
    both = [k for k in range(25) if ours.visible[k] and theirs.visible[k]]
    only_one = sum(1 for k in range(25) if ours.visible[k] != theirs.visible[k])
    if both:
        ours_centre = np.mean([ours.points[k] for k in range(25) if ours.visible[k]], axis=0)
        theirs_centre = np.mean([theirs.points[k] for k in range(25) if theirs.visible[k]], axis=0)
        distance = np.mean([np.linalg.norm((ours.points[k] - ours_centre) - (theirs.points[k] - theirs_centre))
                            for k in both])
    else:
        distance = np.inf
    return -(distance + lambda_miss * only_one) + mu * _brute_force_matches(frame.rendered_input,
                                                                              entry.image) / (GRID_ROWS * GRID_COLS)


def _random_instance(rng, n_refs=8):
    """An input frame and ``n_refs`` candidates: noisy copies of its image
    with jittered keypoints and randomly hidden joints."""
    image = rng.uniform(0, 1, (3, 64, 32))
    points = rng.uniform(-0.5, 0.5, (25, 2))
    frame = ImageFrame(gt_image=image, gt_mask=np.ones((1, 64, 32)), rendered_input=image,
                       keypoints=_keypoints(points, rng.uniform(size=25) > 0.1))
    refs = []
    for index in range(n_refs):
        noisy = np.clip(image + rng.normal(0, rng.uniform(0, 0.6), image.shape), 0, 1)
        jittered = points + rng.normal(0, rng.uniform(0.01, 0.2), points.shape)
        visible = rng.uniform(size=25) > 0.15
        refs.append(ReferenceEntry(noisy, _keypoints(jittered, visible), name='ref{}'.format(index)))
    return frame, refs


def test_count_matches_noise():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        image, noise = rng.uniform(0, 1, (2, 3, 64, 32))
        assert count_matches(image, noise) < 0.1 * GRID_ROWS * GRID_COLS


def test_count_matches_brute_force():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 1, (3, 64, 32))
        other = np.clip(image + rng.normal(0, 0.1 * (seed + 1), image.shape), 0, 1)
        assert count_matches(image, other) == _brute_force_matches(image, other)


def test_select_reference_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        frame, refs = _random_instance(rng)
        values = [_brute_force_score(frame, entry) for entry in refs]
        best = max(values)
        assert select_reference(frame, refs) == values.index(best)


def test_selection_ignores_candidate_order():
    rng = np.random.default_rng(7)
    for _ in range(20):
        frame, refs = _random_instance(rng)
        chosen = refs[select_reference(frame, refs)].name
        shuffled = [refs[i] for i in rng.permutation(len(refs))]
        assert shuffled[select_reference(frame, shuffled)].name == chosen


def test_dominated_reference_changes_nothing():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(20):
        frame, refs = _random_instance(rng)
        chosen = refs[select_reference(frame, refs)]
        best = score_reference(frame.rendered_input, frame.keypoints, chosen)
        far = _keypoints(rng.uniform(-0.5, 0.5, (25, 2)), rng.uniform(size=25) > 0.5)
        dominated = ReferenceEntry(np.zeros((3, 64, 32)), far, name='dominated')
        worse = score_reference(frame.rendered_input, frame.keypoints, dominated)
        if (worse.kp_distance + worse.missing_penalty <= best.kp_distance + best.missing_penalty
                or worse.match_count > best.match_count):
            continue
        checked += 1
        for position in (0, len(refs)):
            extended = refs[:position] + [dominated] + refs[position:]
            assert extended[select_reference(frame, extended)] is chosen
    assert checked > 10
