"""25-point body keypoints in normalized image coordinates.

x and y both span [-1, 1] from the left/top edge to the right/bottom edge.
Invisible keypoints carry the sentinel coordinate ``INVISIBLE`` and are ignored
by every distance and field computation.
"""
import numpy as np

NUM_KEYPOINTS = 25
INVISIBLE = -2.0

KEYPOINT_NAMES = ('nose', 'neck', 'r_shoulder', 'r_elbow', 'r_wrist', 'l_shoulder', 'l_elbow', 'l_wrist', 'mid_hip',
                  'r_hip', 'r_knee', 'r_ankle', 'l_hip', 'l_knee', 'l_ankle', 'r_eye', 'l_eye', 'r_ear', 'l_ear',
                  'l_big_toe', 'l_small_toe', 'l_heel', 'r_big_toe', 'r_small_toe', 'r_heel')


class KeypointSet:
    """Positions and visibility flags of the 25 body keypoints.

    Parameters
    ----------
    points : array_like
        (25, 2) normalized (x, y) coordinates.
    visible : array_like
        (25,) flags.

    Raises
    ------
    ValueError
        if there are not exactly 25 entries.
    """

    def __init__(self, points, visible):
        points = np.array(points, dtype=np.float64).reshape(-1, 2)
        visible = np.array(visible, dtype=bool).reshape(-1)
        if points.shape[0] != NUM_KEYPOINTS or visible.shape[0] != NUM_KEYPOINTS:
            raise ValueError('A keypoint set has exactly {} entries, got {} points and {} flags'.format(
                NUM_KEYPOINTS, points.shape[0], visible.shape[0]))
        points[~visible] = INVISIBLE
        self.points = points
        self.visible = visible

    @classmethod
    def hidden(cls):
        """A set with every keypoint invisible."""
        return cls(np.full((NUM_KEYPOINTS, 2), INVISIBLE), np.zeros(NUM_KEYPOINTS, dtype=bool))

    @classmethod
    def from_list(cls, entries):
        """Builds a set from ``[[x, y, visible], ...]``, the sidecar format."""
        entries = np.asarray(entries, dtype=np.float64).reshape(-1, 3)
        return cls(entries[:, :2], entries[:, 2] > 0.5)

    def to_list(self):
        return [[float(x), float(y), int(flag)] for (x, y), flag in zip(self.points, self.visible)]

    def count_visible(self):
        return int(self.visible.sum())

    def centroid(self):
        """Mean of the visible points, or the origin when none is visible."""
        if not self.visible.any():
            return np.zeros(2)
        return self.points[self.visible].mean(axis=0)

    def to_pixels(self, h, w):
        """Pixel centres (column, row) of the points on an ``h`` x ``w`` grid."""
        cols = ((self.points[:, 0] + 1) * w - 1) / 2
        rows = ((self.points[:, 1] + 1) * h - 1) / 2
        return np.stack([cols, rows], axis=1)

    def copy(self):
        return KeypointSet(self.points.copy(), self.visible.copy())

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return bool(np.array_equal(self.visible, other.visible) and np.array_equal(self.points, other.points))

    def __repr__(self):
        return 'KeypointSet(visible={}/{})'.format(self.count_visible(), NUM_KEYPOINTS)
