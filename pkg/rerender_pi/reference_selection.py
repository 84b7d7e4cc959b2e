"""Chooses the single reference image that best matches an input frame.

Two criteria are combined into one score: the distance between the roughly
aligned poses, with a penalty for keypoints seen in only one of them, and the
number of corresponding patches between the two images.
"""
from dataclasses import dataclass

import numpy as np

from rerender_pi.dataset import load_reference

GRID_ROWS = 16
GRID_COLS = 8
MATCH_THRESHOLD = 0.8
DEGENERATE_NORM = 1e-6


def _as_image(image):
    """(3, H, W) float64 array from a tensor, a batch of one, or an array."""
    data = getattr(image, 'data', image)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 4:
        data = data[0]
    return data


def patch_descriptors(image):
    """Mean-subtracted, l2-normalized grayscale patch per grid cell.

    Returns
    -------
    cells : numpy.ndarray
        indices of the non-degenerate cells (constant cells are dropped).
    descriptors : numpy.ndarray
        (len(cells), patch_size) unit vectors.
    """
    gray = _as_image(image).mean(axis=0)
    cell_h, cell_w = gray.shape[0] // GRID_ROWS, gray.shape[1] // GRID_COLS
    gray = gray[:cell_h * GRID_ROWS, :cell_w * GRID_COLS]
    patches = gray.reshape(GRID_ROWS, cell_h, GRID_COLS, cell_w).transpose(0, 2, 1, 3)
    patches = patches.reshape(GRID_ROWS * GRID_COLS, cell_h * cell_w)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    cells = np.flatnonzero(norms >= DEGENERATE_NORM)
    return cells, patches[cells] / norms[cells, None]


def _mutual_matches(descriptors_a, descriptors_b):
    if len(descriptors_a) == 0 or len(descriptors_b) == 0:
        return 0
    similarity = descriptors_a @ descriptors_b.T
    best_b = similarity.argmax(axis=1)
    best_a = similarity.argmax(axis=0)
    rows = np.arange(len(descriptors_a))
    mutual = (best_a[best_b] == rows) & (similarity[rows, best_b] > MATCH_THRESHOLD)
    return int(mutual.sum())


def count_matches(input_image, reference_image):
    """Number of mutual-nearest-neighbour cell pairs with cosine similarity
    above 0.8.

    Parameters
    ----------
    input_image, reference_image : Tensor or numpy.ndarray
        same resolution, 3 channels.

    Returns
    -------
    int
    """
    if _as_image(input_image).shape != _as_image(reference_image).shape:
        raise ValueError('count_matches needs images of the same size')
    return _mutual_matches(patch_descriptors(input_image)[1], patch_descriptors(reference_image)[1])


def keypoint_distance(input_keypoints, reference_keypoints, lambda_miss=0.2):
    """Mean distance between jointly visible keypoints after moving each
    set's visible centroid to the origin, plus ``lambda_miss`` for every
    keypoint visible in exactly one set.

    Returns
    -------
    float
        ``inf`` when no keypoint is visible in both sets.
    """
    mean_distance, penalty = _distance_parts(input_keypoints, reference_keypoints, lambda_miss)
    return mean_distance + penalty


def _distance_parts(input_keypoints, reference_keypoints, lambda_miss):
    joint = input_keypoints.visible & reference_keypoints.visible
    penalty = lambda_miss * int(np.sum(input_keypoints.visible ^ reference_keypoints.visible))
    if not joint.any():
        return float('inf'), penalty
    aligned_in = input_keypoints.points[joint] - input_keypoints.centroid()
    aligned_ref = reference_keypoints.points[joint] - reference_keypoints.centroid()
    return float(np.linalg.norm(aligned_in - aligned_ref, axis=1).mean()), penalty


@dataclass
class SelectionScore:
    kp_distance: float
    missing_penalty: float
    match_count: int
    cell_count: int = GRID_ROWS * GRID_COLS
    match_weight: float = 0.5

    @property
    def value(self):
        return -(self.kp_distance + self.missing_penalty) + self.match_weight * self.match_count / self.cell_count


class ReferenceEntry:
    """A candidate reference: its image, keypoints and patch descriptors.

    Parameters
    ----------
    image : Tensor or numpy.ndarray
        the clean reference render, (3, H, W) or (1, 3, H, W).
    keypoints : KeypointSet
    name : str, optional
    """

    def __init__(self, image, keypoints, name=None):
        self.image = _as_image(image)
        self.keypoints = keypoints
        self.name = name
        self.cells, self.descriptors = patch_descriptors(self.image)

    def __repr__(self):
        return 'ReferenceEntry({})'.format(self.name)


def score_reference(input_image, input_keypoints, entry, lambda_miss=0.2, match_weight=0.5):
    """Computes every field of the selection score of one candidate.

    Returns
    -------
    SelectionScore
    """
    mean_distance, penalty = _distance_parts(input_keypoints, entry.keypoints, lambda_miss)
    matches = _mutual_matches(patch_descriptors(input_image)[1], entry.descriptors)
    return SelectionScore(kp_distance=mean_distance, missing_penalty=penalty, match_count=matches,
                          match_weight=match_weight)


def select_reference(frame, refs, lambda_miss=0.2, match_weight=0.5):
    """Index of the best scoring reference; the lowest index wins ties.

    Parameters
    ----------
    frame : ImageFrame
        its rendered input and keypoints are scored.
    refs : list of ReferenceEntry

    Returns
    -------
    int

    Raises
    ------
    ValueError
        if ``refs`` is empty.
    """
    if not refs:
        raise ValueError('Cannot select from an empty reference set')
    input_keypoints = frame.keypoints
    _, input_descriptors = patch_descriptors(frame.rendered_input)
    best_index, best_value = 0, -np.inf
    for index, entry in enumerate(refs):
        mean_distance, penalty = _distance_parts(input_keypoints, entry.keypoints, lambda_miss)
        matches = _mutual_matches(input_descriptors, entry.descriptors)
        value = SelectionScore(mean_distance, penalty, matches, match_weight=match_weight).value
        if value > best_value:
            best_index, best_value = index, value
    return best_index


def load_reference_set(root, manifest, subject_id, n_refs=None):
    """Candidate references of a subject: the first ``n_refs`` clean renders
    in manifest order (pose-major, then view).

    Raises
    ------
    ValueError
        if the subject has no reference set.
    """
    if subject_id not in manifest.names:
        raise ValueError('No reference set for subject {}'.format(subject_id))
    keys = manifest.reference_keys(subject_id)[:n_refs]
    if not keys:
        raise ValueError('No reference set for subject {}'.format(subject_id))
    entries = []
    for pose, view in keys:
        frame = load_reference(root, subject_id, pose, view)
        entries.append(ReferenceEntry(frame.rendered_input, frame.keypoints,
                                      name='{}/ref/{:02d}_{}'.format(subject_id, pose, view)))
    return entries
