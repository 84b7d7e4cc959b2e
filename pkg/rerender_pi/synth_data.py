"""Procedural performers: an articulated 2-d figure rendered from several
views, degraded like a real-time reconstruction, and written out as a dataset.

Body coordinates are (x, y, z) with y pointing down and z pointing away from
the camera; one body unit is half the image height. The vertical axis of
view rotation passes through the mid hip.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from rerender_pi.dataset import (GENERATOR_VERSION, DatasetInfo, DatasetManifest, ImageFrame, SubjectRecord,
                                 frame_stem, manifest_path, reference_stem, sha256, write_frame)
from rerender_pi.keypoints import KEYPOINT_NAMES, KeypointSet
from rerender_pi.params import DegradeParams, thread_count

logger = logging.getLogger(__name__)

BACKGROUND = 0.
OCCLUSION_DEPTH = 0.02
MID_HIP_HEIGHT = 0.1

PARTS = ('torso', 'head', 'r_upper_arm', 'r_forearm', 'l_upper_arm', 'l_forearm', 'r_thigh', 'r_shin', 'l_thigh',
         'l_shin')
PART_JOINTS = {
    'torso': ('neck', 'mid_hip'),
    'head': ('head_top', 'head_bottom'),
    'r_upper_arm': ('r_shoulder', 'r_elbow'),
    'r_forearm': ('r_elbow', 'r_wrist'),
    'l_upper_arm': ('l_shoulder', 'l_elbow'),
    'l_forearm': ('l_elbow', 'l_wrist'),
    'r_thigh': ('r_hip', 'r_knee'),
    'r_shin': ('r_knee', 'r_ankle'),
    'l_thigh': ('l_hip', 'l_knee'),
    'l_shin': ('l_knee', 'l_ankle')
}
PART_PALETTE = {
    'torso': 'shirt',
    'head': 'skin',
    'r_upper_arm': 'shirt',
    'l_upper_arm': 'shirt',
    'r_forearm': 'skin',
    'l_forearm': 'skin',
    'r_thigh': 'pants',
    'l_thigh': 'pants',
    'r_shin': 'pants',
    'l_shin': 'pants'
}
BASE_LENGTHS = {
    'torso': 0.55,
    'head': 0.13,
    'shoulder': 0.11,
    'upper_arm': 0.17,
    'forearm': 0.16,
    'hip': 0.07,
    'thigh': 0.27,
    'shin': 0.27
}
BASE_RADII = {
    'torso': 0.09,
    'head': 0.085,
    'r_upper_arm': 0.04,
    'l_upper_arm': 0.04,
    'r_forearm': 0.035,
    'l_forearm': 0.035,
    'r_thigh': 0.055,
    'l_thigh': 0.055,
    'r_shin': 0.045,
    'l_shin': 0.045
}
# offsets from the head centre and the ankles, right side; left mirrors x
FACE_OFFSETS = {
    'nose': (0., 0.015, -0.08),
    'r_eye': (-0.03, -0.02, -0.07),
    'r_ear': (-0.075, -0.005, 0.)
}
FOOT_OFFSETS = {
    'big_toe': (-0.02, 0.03, -0.05),
    'small_toe': (-0.04, 0.03, -0.035),
    'heel': (0., 0.025, 0.035)
}


@dataclass
class SubjectSpec:
    """Body proportions and clothing of one procedural performer.

    ``textures`` maps every part to its base colour, pattern kind
    ('stripe' or 'checker'), frequency in cycles per body unit, phase and
    amplitude.
    """
    seed: int
    lengths: dict
    radii: dict
    palette: dict
    textures: dict

    @classmethod
    def from_seed(cls, seed):
        rng = np.random.default_rng(seed)
        scale = rng.uniform(0.92, 1.06)
        lengths = {key: value * scale * rng.uniform(0.95, 1.05) for key, value in BASE_LENGTHS.items()}
        radii = {key: value * scale for key, value in BASE_RADII.items()}
        palette = {name: tuple(rng.uniform(0.25, 0.95, 3)) for name in ('shirt', 'skin', 'pants')}
        textures = {}
        for part in PARTS:
            textures[part] = {
                'color': palette[PART_PALETTE[part]],
                'pattern': 'stripe' if rng.random() < 0.5 else 'checker',
                'frequency': rng.uniform(12., 30.),
                'phase': rng.uniform(0., 1.),
                'amplitude': rng.uniform(0.3, 0.6)
            }
        return cls(seed=seed, lengths=lengths, radii=radii, palette=palette, textures=textures)

    def validate(self):
        """Raises ValueError for a non-positive limb length or radius."""
        for key, value in list(self.lengths.items()) + list(self.radii.items()):
            if not value > 0:
                raise ValueError('Degenerate limb length: {} = {}'.format(key, value))


POSE_LIMITS = {
    'r_shoulder': (0., 170.),
    'l_shoulder': (0., 170.),
    'r_elbow': (0., 150.),
    'l_elbow': (0., 150.),
    'r_hip': (-30., 45.),
    'l_hip': (-30., 45.),
    'r_knee': (0., 120.),
    'l_knee': (0., 120.)
}


@dataclass
class PoseParams:
    """Joint angles in degrees. Shoulder and hip angles are measured from
    hanging straight down, positive away from the body; elbows bend in the
    image plane, knees fold backwards."""
    r_shoulder: float = 90.
    l_shoulder: float = 90.
    r_elbow: float = 0.
    l_elbow: float = 0.
    r_hip: float = 0.
    l_hip: float = 0.
    r_knee: float = 0.
    l_knee: float = 0.

    def validate(self):
        for key, (low, high) in POSE_LIMITS.items():
            value = getattr(self, key)
            if not low <= value <= high:
                raise ValueError('{} = {} is outside the joint limits [{}, {}]'.format(key, value, low, high))

    def as_array(self):
        return np.array([getattr(self, key) for key in POSE_LIMITS])

    @classmethod
    def from_array(cls, values):
        return cls(**{key: float(value) for key, value in zip(POSE_LIMITS, values)})


T_POSE = PoseParams()
CANONICAL_POSES = (T_POSE, PoseParams(40., 40., 0., 0., 8., 8., 0., 0.), PoseParams(10., 10., 5., 5., 3., 3., 0., 0.),
                   PoseParams(150., 150., 10., 10., 12., 12., 0., 0.))


def reference_pose(index):
    """Canonical pose ``index``; indices past the canonical set add a
    growing shoulder offset."""
    base = CANONICAL_POSES[index % len(CANONICAL_POSES)].as_array()
    base[:2] = np.clip(base[:2] + 10. * (index // len(CANONICAL_POSES)), 0., 170.)
    return PoseParams.from_array(base)


def random_pose(rng):
    return PoseParams(r_shoulder=rng.uniform(0., 160.), l_shoulder=rng.uniform(0., 160.),
                      r_elbow=rng.uniform(0., 120.), l_elbow=rng.uniform(0., 120.), r_hip=rng.uniform(-10., 35.),
                      l_hip=rng.uniform(-10., 35.), r_knee=rng.uniform(0., 90.), l_knee=rng.uniform(0., 90.))


def motion_sequence(rng, n_frames):
    """Smooth motion through random key poses with cosine easing."""
    n_keys = max(2, n_frames // 8 + 2)
    keys = np.stack([random_pose(rng).as_array() for _ in range(n_keys)])
    poses = []
    for frame in range(n_frames):
        position = frame / (n_frames - 1) * (n_keys - 1) if n_frames > 1 else 0.
        index = min(int(np.floor(position)), n_keys - 2)
        eased = (1 - np.cos(np.pi * (position - index))) / 2
        poses.append(PoseParams.from_array(keys[index] * (1 - eased) + keys[index + 1] * eased))
    return poses


def _direction(angle_deg, side, bend_deg=0.):
    angle = np.radians(angle_deg)
    bend = np.radians(bend_deg)
    return np.array([side * np.sin(angle) * np.cos(bend), np.cos(angle) * np.cos(bend), np.sin(bend)])


def joint_positions(subject, pose):
    """Body-unit positions of the joints and the 25 keypoints, before view
    rotation.

    Returns
    -------
    dict
        name -> (x, y, z) array
    """
    subject.validate()
    pose.validate()
    lengths = subject.lengths
    joints = {'mid_hip': np.array([0., MID_HIP_HEIGHT, 0.])}
    joints['neck'] = joints['mid_hip'] - [0., lengths['torso'], 0.]
    head = joints['neck'] - [0., lengths['head'], 0.]
    joints['head_top'] = head - [0., 0.02, 0.]
    joints['head_bottom'] = head + [0., 0.02, 0.]
    for prefix, side in (('r', -1.), ('l', 1.)):
        shoulder = joints['neck'] + [side * lengths['shoulder'], 0., 0.]
        shoulder_angle = getattr(pose, prefix + '_shoulder')
        elbow = shoulder + lengths['upper_arm'] * _direction(shoulder_angle, side)
        wrist = elbow + lengths['forearm'] * _direction(shoulder_angle + getattr(pose, prefix + '_elbow'), side)
        hip = joints['mid_hip'] + [side * lengths['hip'], 0., 0.]
        hip_angle = getattr(pose, prefix + '_hip')
        knee = hip + lengths['thigh'] * _direction(hip_angle, side)
        ankle = knee + lengths['shin'] * _direction(hip_angle, side, getattr(pose, prefix + '_knee'))
        joints.update({
            prefix + '_shoulder': shoulder,
            prefix + '_elbow': elbow,
            prefix + '_wrist': wrist,
            prefix + '_hip': hip,
            prefix + '_knee': knee,
            prefix + '_ankle': ankle
        })
        mirror = np.array([-side, 1., 1.])
        for name, offset in FOOT_OFFSETS.items():
            joints['{}_{}'.format(prefix, name)] = ankle + np.array(offset) * mirror
    joints['nose'] = head + FACE_OFFSETS['nose']
    for prefix, side in (('r', -1.), ('l', 1.)):
        mirror = np.array([-side, 1., 1.])
        joints[prefix + '_eye'] = head + np.array(FACE_OFFSETS['r_eye']) * mirror
        joints[prefix + '_ear'] = head + np.array(FACE_OFFSETS['r_ear']) * mirror
    return joints


def rotate_view(point, angle):
    x, y, z = point
    return np.array([x * np.cos(angle) + z * np.sin(angle), y, -x * np.sin(angle) + z * np.cos(angle)])


def _capsule(rows, cols, a, b, radius):
    """Inside mask, position along the axis in [0, 1] and signed offset
    across it, all in pixels."""
    axis = b - a
    length_sq = float(axis @ axis)
    dc, dr = cols - a[0], rows - a[1]
    if length_sq > 0:
        t = np.clip((dc * axis[0] + dr * axis[1]) / length_sq, 0., 1.)
        across = (dc * axis[1] - dr * axis[0]) / np.sqrt(length_sq)
    else:
        t = np.zeros_like(dc)
        across = dc
    distance = np.hypot(cols - (a[0] + t * axis[0]), rows - (a[1] + t * axis[1]))
    return distance <= radius, t * np.sqrt(length_sq), across


def _texture(texture, along, across):
    phase, frequency = texture['phase'], texture['frequency']
    stripes = np.mod(frequency * along + phase, 1.) < 0.5
    if texture['pattern'] == 'checker':
        stripes = stripes ^ (np.mod(frequency * across + phase, 1.) < 0.5)
    return 1. - texture['amplitude'] * stripes


def render_figure(subject, pose, view, h, w, n_views=8):
    """Rasterizes the figure seen from ``view``.

    The figure turns by ``view * 360 / n_views`` degrees about its vertical
    axis; parts are painted far to near. A keypoint is invisible when it
    leaves the frame, or when it lies behind the body (depth above
    ``OCCLUSION_DEPTH``) inside the torso or head silhouette.

    Returns
    -------
    gt_image : numpy.ndarray
        (3, h, w) float32
    gt_mask : numpy.ndarray
        (1, h, w) float32 in {0, 1}
    keypoints : KeypointSet
    """
    joints = joint_positions(subject, pose)
    angle = 2 * np.pi * view / n_views
    rotated = {name: rotate_view(point, angle) for name, point in joints.items()}
    scale = h / 2.

    def to_pixel(point):
        return np.array([w / 2. - 0.5 + point[0] * scale, h / 2. - 0.5 + point[1] * scale])

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.full((3, h, w), BACKGROUND)
    mask = np.zeros((h, w), dtype=bool)
    body = np.zeros((h, w), dtype=bool)
    depth = {part: np.mean([rotated[j][2] for j in PART_JOINTS[part]]) for part in PARTS}
    for part in sorted(PARTS, key=lambda name: -depth[name]):
        start, end = (to_pixel(rotated[j]) for j in PART_JOINTS[part])
        inside, along, across = _capsule(rows, cols, start, end, subject.radii[part] * scale)
        shade = _texture(subject.textures[part], along / scale, across / scale)
        color = np.asarray(subject.textures[part]['color'])[:, None, None] * shade
        image[:, inside] = color[:, inside]
        mask |= inside
        if part in ('torso', 'head'):
            body |= inside

    points = np.zeros((len(KEYPOINT_NAMES), 2))
    visible = np.zeros(len(KEYPOINT_NAMES), dtype=bool)
    for k, name in enumerate(KEYPOINT_NAMES):
        point = rotated[name]
        points[k] = point[0] * h / w, point[1]
        col, row = to_pixel(point)
        in_frame = np.all(np.abs(points[k]) <= 1.)
        if in_frame:
            pixel = int(np.clip(np.rint(row), 0, h - 1)), int(np.clip(np.rint(col), 0, w - 1))
            visible[k] = not (point[2] > OCCLUSION_DEPTH and body[pixel])
    return image.astype(np.float32), mask[None].astype(np.float32), KeypointSet(points, visible)


def _magnitudes(cfg):
    if cfg is None:
        cfg = DegradeParams()
        cfg.set_to_defaults()
    return cfg.get_as_dictionary() if hasattr(cfg, 'get_as_dictionary') else dict(cfg)


def similarity_matrix(angle_deg, scale, translation, h, w):
    """Forward similarity in (row, col) pixel coordinates about the image
    centre: ``p' = scale * R (p - c) + c + translation``.

    Returns
    -------
    matrix : numpy.ndarray
        2x2 linear part
    offset : numpy.ndarray
        translation part
    """
    angle = np.radians(angle_deg)
    matrix = scale * np.array([[np.cos(angle), np.sin(angle)], [-np.sin(angle), np.cos(angle)]])
    centre = np.array([(h - 1) / 2., (w - 1) / 2.])
    return matrix, centre + np.asarray(translation, dtype=np.float64) - matrix @ centre


def warp_channels(array, matrix, offset, order=1):
    """Applies the forward transform (``matrix``, ``offset``) to every
    channel of a (C, H, W) array, reading zeros outside."""
    inverse = np.linalg.inv(matrix)
    channels = [
        ndimage.affine_transform(channel, inverse, offset=-inverse @ offset, order=order, mode='constant',
                                 cval=BACKGROUND) for channel in np.asarray(array, dtype=np.float64)
    ]
    return np.stack(channels)


def degrade(gt_image, gt_mask, cfg=None, seed=0):
    """Simulates a low-quality rendered input from a ground-truth view.

    Steps, each skipped when its magnitude is zero: affine jitter
    (calibration error), Gaussian blur, elliptical holes inside the mask
    filled with the background colour (hole radii are fractions of the image
    width), additive Gaussian noise and a per-channel colour shift.

    Parameters
    ----------
    gt_image : numpy.ndarray
        (3, H, W); not modified.
    gt_mask : numpy.ndarray
        (1, H, W); not modified.
    cfg : DegradeParams or dict, optional
        magnitudes, defaults when omitted.
    seed : int

    Returns
    -------
    numpy.ndarray
        (3, H, W) float32 in [0, 1]
    """
    magnitudes = _magnitudes(cfg)
    rng = np.random.default_rng(seed)
    _, h, w = gt_image.shape
    image = np.array(gt_image, dtype=np.float64)

    jitter = magnitudes['jitter']
    if jitter > 0:
        angle = rng.uniform(-1., 1.) * jitter * 180.
        scale = 1. + rng.uniform(-jitter, jitter)
        translation = rng.uniform(-jitter, jitter, 2) * np.array([h, w])
        image = warp_channels(image, *similarity_matrix(angle, scale, translation, h, w))
    if magnitudes['blur_sigma'] > 0:
        image = ndimage.gaussian_filter(image, sigma=(0, magnitudes['blur_sigma'], magnitudes['blur_sigma']))
    foreground = np.flatnonzero(np.asarray(gt_mask)[0] > 0.5)
    if magnitudes['hole_count'] > 0 and magnitudes['hole_radius_max'] > 0 and foreground.size:
        rows, cols = np.mgrid[0:h, 0:w]
        for _ in range(int(magnitudes['hole_count'])):
            centre_row, centre_col = np.unravel_index(foreground[rng.integers(foreground.size)], (h, w))
            radius_row, radius_col = rng.uniform(magnitudes['hole_radius_min'], magnitudes['hole_radius_max'], 2) * w
            ellipse = (((rows - centre_row) / max(radius_row, 1e-6))**2 +
                       ((cols - centre_col) / max(radius_col, 1e-6))**2)
            hole = (ellipse <= 1.) & (np.asarray(gt_mask)[0] > 0.5)
            image[:, hole] = BACKGROUND
    if magnitudes['noise_sigma'] > 0:
        image = np.clip(image + rng.normal(0., magnitudes['noise_sigma'], image.shape), 0., 1.)
    if magnitudes['color_shift'] > 0:
        shift = 1. + rng.uniform(-magnitudes['color_shift'], magnitudes['color_shift'], (3, 1, 1))
        image = np.clip(image * shift, 0., 1.)
    return image.astype(np.float32)


def augment(frame, seed, max_translate=0.05, max_rotate=10., scale_range=(0.9, 1.1)):
    """Applies one random similarity transform to all images and keypoints
    of a frame: translation up to ``max_translate`` of the width, rotation up
    to ``max_rotate`` degrees and a scale drawn from ``scale_range``.

    Returns
    -------
    ImageFrame
        a new frame; the mask is re-thresholded to {0, 1} and keypoints that
        leave the image become invisible.
    """
    rng = np.random.default_rng(seed)
    _, h, w = frame.gt_image.shape
    translation = rng.uniform(-max_translate, max_translate, 2) * w
    angle = rng.uniform(-max_rotate, max_rotate)
    scale = rng.uniform(*scale_range)
    if not translation.any() and angle == 0 and scale == 1:
        return ImageFrame(gt_image=frame.gt_image.copy(), gt_mask=frame.gt_mask.copy(),
                          rendered_input=frame.rendered_input.copy(), keypoints=frame.keypoints.copy(),
                          view_id=frame.view_id, frame_id=frame.frame_id, subject_id=frame.subject_id)
    matrix, offset = similarity_matrix(angle, scale, translation, h, w)

    pixels = frame.keypoints.to_pixels(h, w)
    moved = (matrix @ pixels[:, ::-1].T).T + offset
    rows, cols = moved[:, 0], moved[:, 1]
    points = np.stack([(2 * cols + 1) / w - 1, (2 * rows + 1) / h - 1], axis=1)
    visible = frame.keypoints.visible & np.all(np.abs(points) <= 1., axis=1)

    mask = warp_channels(frame.gt_mask, matrix, offset) > 0.5
    return ImageFrame(gt_image=np.clip(warp_channels(frame.gt_image, matrix, offset), 0, 1).astype(np.float32),
                      gt_mask=mask.astype(np.float32),
                      rendered_input=np.clip(warp_channels(frame.rendered_input, matrix, offset), 0,
                                             1).astype(np.float32),
                      keypoints=KeypointSet(points, visible), view_id=frame.view_id, frame_id=frame.frame_id,
                      subject_id=frame.subject_id)


def _subject_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _frame_seed(seed, index, frame_id, view):
    return int(np.random.SeedSequence([seed, index, frame_id, view]).generate_state(1)[0])


def _write_checked(root, stem, frame, extra, with_gt=True):
    try:
        paths = write_frame(stem, frame, extra, with_gt=with_gt)
    except OSError as err:
        raise OSError('Could not write {}: {}'.format(stem, err))
    return {os.path.relpath(path, root).replace(os.sep, '/'): sha256(path) for path in paths}


def generate_dataset(out_dir, n_subjects, frames_per_seq, n_views=8, n_refs=4, height=128, width=64, degrade_cfg=None,
                     seed=0, n_heldout=0):
    """Renders sequences and reference sets and writes them with a manifest.

    Parameters
    ----------
    out_dir : str
        dataset root
    n_subjects : int
        training subjects
    frames_per_seq : int
    n_views : int, optional
        by default 8
    n_refs : int, optional
        canonical reference poses per subject, each rendered from every view,
        by default 4
    height, width : int, optional
        working resolution, by default 128x64
    degrade_cfg : DegradeParams or dict, optional
    seed : int, optional
    n_heldout : int, optional
        extra subjects marked ``heldout``, by default 0

    Returns
    -------
    DatasetManifest
    """
    magnitudes = _magnitudes(degrade_cfg)
    os.makedirs(out_dir, exist_ok=True)
    manifest = DatasetManifest()
    info = DatasetInfo()
    info.set(generator_version=GENERATOR_VERSION, global_seed=seed, height=height, width=width, degrade=magnitudes)
    manifest.add_metadata(info)

    def render_frame(task):
        index, subject_id, subject, frame_id, view, pose = task
        gt_image, gt_mask, keypoints = render_figure(subject, pose, view, height, width, n_views)
        rendered = degrade(gt_image, gt_mask, magnitudes, _frame_seed(seed, index, frame_id, view))
        frame = ImageFrame(gt_image=gt_image, gt_mask=gt_mask, rendered_input=rendered, keypoints=keypoints,
                           view_id=view, frame_id=frame_id, subject_id=subject_id)
        return _write_checked(out_dir, frame_stem(out_dir, subject_id, frame_id, view), frame, {'pose': asdict(pose)})

    def render_reference(task):
        index, subject_id, subject, pose_id, view, pose = task
        gt_image, gt_mask, keypoints = render_figure(subject, pose, view, height, width, n_views)
        frame = ImageFrame(gt_image=gt_image, gt_mask=gt_mask, rendered_input=gt_image, keypoints=keypoints,
                           view_id=view, frame_id=pose_id, subject_id=subject_id)
        return _write_checked(out_dir, reference_stem(out_dir, subject_id, pose_id, view), frame,
                              {'pose': asdict(pose)}, with_gt=False)

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        for index in range(n_subjects + n_heldout):
            subject_id = 'subj{}'.format(index)
            subject_seed = _subject_seed(seed, index)
            subject = SubjectSpec.from_seed(subject_seed)
            poses = motion_sequence(np.random.default_rng([seed, index, 1]), frames_per_seq)
            frame_tasks = [(index, subject_id, subject, frame_id, view, poses[frame_id])
                           for frame_id in range(frames_per_seq) for view in range(n_views)]
            ref_tasks = [(index, subject_id, subject, pose_id, view, reference_pose(pose_id))
                         for pose_id in range(n_refs) for view in range(n_views)]
            checksums = {}
            for result in pool.map(render_frame, frame_tasks):
                checksums.update(result)
            for result in pool.map(render_reference, ref_tasks):
                checksums.update(result)
            record = SubjectRecord(subject_id)
            record.set(split='train' if index < n_subjects else 'heldout', seed=subject_seed, frames=frames_per_seq,
                       views=n_views, ref_poses=n_refs, checksums=dict(sorted(checksums.items())))
            manifest.add_metadata(record)
            logger.info('Generated {} ({} frames x {} views, {} reference poses)'.format(
                subject_id, frames_per_seq, n_views, n_refs))

    manifest.write_to_json(manifest_path(out_dir))
    logger.info('Wrote dataset manifest to {}'.format(manifest_path(out_dir)))
    return manifest
