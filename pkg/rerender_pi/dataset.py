"""Frames, the dataset manifest and their on-disk formats.

Layout under the dataset root::

    manifest.json
    <subject>/seq/<frame>_<view>.png        rendered input
    <subject>/seq/<frame>_<view>_gt.png     ground truth
    <subject>/seq/<frame>_<view>_mask.png   foreground mask
    <subject>/seq/<frame>_<view>.json       keypoints and ids
    <subject>/ref/<pose>_<view>.png         clean reference render (+ _mask.png, .json)

Frames and poses are zero padded to 4 and 2 digits. Keypoints are stored as
25 ``[x, y, visible]`` entries in normalized coordinates.
"""
import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from rerender_pi.keypoints import KeypointSet
from rerender_pi.metadata import MetaData, MultiMetaData
from rerender_pi.tensor import Tensor

GENERATOR_VERSION = 1
INFO_RECORD = 'dataset'


@dataclass
class ImageFrame:
    """One view of one time step: arrays are (C, H, W) float32 in [0, 1]."""
    gt_image: np.ndarray
    gt_mask: np.ndarray
    rendered_input: np.ndarray
    keypoints: KeypointSet
    view_id: int = 0
    frame_id: int = 0
    subject_id: str = ''

    @property
    def size(self):
        return self.gt_image.shape[1:]

    def with_input(self, rendered_input):
        return replace(self, rendered_input=rendered_input)


def save_png(filename, array):
    """Writes a (C, H, W) array in [0, 1] as an 8-bit PNG (C is 1 or 3)."""
    data = np.clip(np.rint(np.asarray(array) * 255), 0, 255).astype(np.uint8)
    image = Image.fromarray(data[0]) if data.shape[0] == 1 else Image.fromarray(data.transpose(1, 2, 0))
    image.save(filename, format='PNG')


def load_png(filename):
    """Reads a PNG as a (C, H, W) float32 array in [0, 1].

    Raises
    ------
    FileNotFoundError
        if the file does not exist.
    """
    if not os.path.exists(filename):
        raise FileNotFoundError('No image at {}'.format(filename))
    with Image.open(filename) as image:
        data = np.asarray(image, dtype=np.float32) / 255.
    return data[None] if data.ndim == 2 else data.transpose(2, 0, 1)


def frame_stem(root, subject_id, frame_id, view_id):
    return os.path.join(root, subject_id, 'seq', '{:04d}_{}'.format(frame_id, view_id))


def reference_stem(root, subject_id, pose_id, view_id):
    return os.path.join(root, subject_id, 'ref', '{:02d}_{}'.format(pose_id, view_id))


def write_frame(stem, frame, extra=None, with_gt=True):
    """Writes the images and the keypoint sidecar of a frame. Without
    ``with_gt`` the ground truth is not written (clean reference renders).

    Returns
    -------
    list of str
        the paths written.
    """
    os.makedirs(os.path.dirname(stem), exist_ok=True)
    paths = ['{}.png'.format(stem), '{}_mask.png'.format(stem), '{}.json'.format(stem)]
    save_png(paths[0], frame.rendered_input)
    save_png(paths[1], frame.gt_mask)
    if with_gt:
        paths.append('{}_gt.png'.format(stem))
        save_png(paths[-1], frame.gt_image)
    sidecar = {
        'subject_id': frame.subject_id,
        'frame_id': frame.frame_id,
        'view_id': frame.view_id,
        'keypoints': frame.keypoints.to_list()
    }
    sidecar.update(extra or {})
    with open(paths[2], 'w', encoding='utf-8') as handle:
        json.dump(sidecar, handle, indent=1, sort_keys=True)
    return paths


def read_frame(stem):
    """Reads a frame written by ``write_frame``; a missing ground truth
    falls back to the image itself.

    Raises
    ------
    FileNotFoundError
        if an image or the sidecar is missing.
    """
    sidecar_path = '{}.json'.format(stem)
    if not os.path.exists(sidecar_path):
        raise FileNotFoundError('No keypoint sidecar at {}'.format(sidecar_path))
    with open(sidecar_path, 'r', encoding='utf-8') as handle:
        sidecar = json.load(handle)
    rendered_input = load_png('{}.png'.format(stem))
    gt_path = '{}_gt.png'.format(stem)
    gt_image = load_png(gt_path) if os.path.exists(gt_path) else rendered_input
    return ImageFrame(gt_image=gt_image, gt_mask=load_png('{}_mask.png'.format(stem)), rendered_input=rendered_input,
                      keypoints=KeypointSet.from_list(sidecar['keypoints']), view_id=sidecar['view_id'],
                      frame_id=sidecar['frame_id'], subject_id=sidecar['subject_id'])


def sha256(filename):
    digest = hashlib.sha256()
    with open(filename, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


class SubjectRecord(MetaData):
    """Manifest entry of one subject: its split, sequence size, reference
    poses and the checksum of every file it owns."""

    def __init__(self, name):
        super().__init__(name)
        self.set_requirements(['split', 'seed', 'frames', 'views', 'ref_poses', 'checksums'])


class DatasetInfo(MetaData):
    def __init__(self, name=INFO_RECORD):
        super().__init__(name)
        self.set_requirements(['generator_version', 'global_seed', 'height', 'width', 'degrade'])


class DatasetManifest(MultiMetaData):
    """The ``manifest.json`` of a dataset: one ``dataset`` record with the
    generator settings followed by one record per subject."""

    record_class = SubjectRecord

    def make_record(self, name):
        if name == INFO_RECORD:
            return DatasetInfo()
        return SubjectRecord(name)

    @property
    def info(self):
        return self[INFO_RECORD]

    def subjects(self, split=None):
        """Subject records in manifest order, optionally of one split."""
        return [record for record in self
                if record.name != INFO_RECORD and (split is None or record.get('split') == split)]

    def frame_keys(self, split=None, views=None):
        """(subject, frame, view) triples in manifest order."""
        keys = []
        for record in self.subjects(split):
            for frame in range(record.get('frames')):
                for view in range(record.get('views')):
                    if views is None or view in views:
                        keys.append((record.name, frame, view))
        return keys

    def reference_keys(self, subject_id):
        record = self[subject_id]
        return [(pose, view) for pose in range(record.get('ref_poses')) for view in range(record.get('views'))]

    def verify(self, root):
        """Recomputes every checksum.

        Returns
        -------
        list of str
            relative paths that are missing or whose content changed.
        """
        bad = []
        for record in self.subjects():
            for relative, checksum in sorted(record.get('checksums').items()):
                path = os.path.join(root, relative)
                if not os.path.exists(path) or sha256(path) != checksum:
                    bad.append(relative)
        return bad


def manifest_path(root):
    return os.path.join(root, 'manifest.json')


def load_manifest(root):
    """Reads ``<root>/manifest.json``.

    Raises
    ------
    FileNotFoundError
        if the dataset has no manifest.
    """
    path = manifest_path(root)
    if not os.path.exists(path):
        raise FileNotFoundError('No dataset manifest at {}'.format(path))
    manifest = DatasetManifest()
    manifest.read_from_json(path)
    return manifest


def load_sequence_frame(root, subject_id, frame_id, view_id):
    return read_frame(frame_stem(root, subject_id, frame_id, view_id))


def load_reference(root, subject_id, pose_id, view_id):
    return read_frame(reference_stem(root, subject_id, pose_id, view_id))


def frames_to_batch(frames):
    """Stacks frames into tensors.

    Returns
    -------
    dict
        ``rendered_input``, ``gt_image`` and ``gt_mask`` tensors of shape
        (N, C, H, W) and the list of keypoint sets under ``keypoints``.
    """
    return {
        'rendered_input': Tensor(np.stack([frame.rendered_input for frame in frames])),
        'gt_image': Tensor(np.stack([frame.gt_image for frame in frames])),
        'gt_mask': Tensor(np.stack([frame.gt_mask for frame in frames])),
        'keypoints': [frame.keypoints for frame in frames]
    }
