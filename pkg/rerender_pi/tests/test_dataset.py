import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rerender_pi.dataset import (DatasetManifest, frames_to_batch, load_manifest, load_png, load_reference, read_frame,
                                 save_png, write_frame)


def test_png_round_trip(tmpdir, rng):
    image = np.round(rng.uniform(0, 1, (3, 8, 4)) * 255) / 255
    save_png('{}/image.png'.format(tmpdir), image)
    assert_allclose(load_png('{}/image.png'.format(tmpdir)), image, atol=1e-6)
    mask = (rng.uniform(0, 1, (1, 8, 4)) > 0.5).astype(np.float32)
    save_png('{}/mask.png'.format(tmpdir), mask)
    assert_allclose(load_png('{}/mask.png'.format(tmpdir)), mask)
    with pytest.raises(FileNotFoundError):
        load_png('{}/missing.png'.format(tmpdir))


def test_frame_files(tmpdir, sample_frame):
    stem = '{}/subj0/seq/0000_0'.format(tmpdir)
    paths = write_frame(stem, sample_frame, {'pose': 'T'})
    assert sorted(os.path.basename(path) for path in paths) == ['0000_0.json', '0000_0.png', '0000_0_gt.png',
                                                                 '0000_0_mask.png']
    frame = read_frame(stem)
    assert frame.keypoints == sample_frame.keypoints
    assert_allclose(frame.gt_image, sample_frame.gt_image, atol=0.5 / 255 + 1e-6)
    assert (frame.subject_id, frame.frame_id, frame.view_id) == ('subj0', 0, 0)

    with pytest.raises(FileNotFoundError):
        read_frame('{}/subj0/seq/0001_0'.format(tmpdir))


def test_reference_without_ground_truth(tiny_dataset):
    frame = load_reference(tiny_dataset, 'subj0', 1, 0)
    assert frame.gt_image is frame.rendered_input
    assert not os.path.exists(os.path.join(tiny_dataset, 'subj0', 'ref', '01_0_gt.png'))


def test_manifest(tiny_dataset, tmpdir):
    manifest = load_manifest(tiny_dataset)
    assert manifest.frame_keys('heldout', views=[1])[:2] == [('subj1', 0, 1), ('subj1', 1, 1)]
    assert manifest.reference_keys('subj1') == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len(manifest.subjects()) == 2

    filename = '{}/manifest.json'.format(tmpdir)
    manifest.write_to_json(filename)
    copy = DatasetManifest()
    copy.read_from_json(filename)
    assert copy.info.get('global_seed') == 0
    assert copy['subj0'].get('checksums') == manifest['subj0'].get('checksums')

    with pytest.raises(FileNotFoundError):
        load_manifest(str(tmpdir.mkdir('empty')))


def test_frames_to_batch(sample_frame):
    batch = frames_to_batch([sample_frame, sample_frame])
    assert batch['rendered_input'].shape == (2, 3, 64, 32)
    assert batch['gt_mask'].shape == (2, 1, 64, 32)
    assert len(batch['keypoints']) == 2
