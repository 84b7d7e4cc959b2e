"""Image quality metrics and the reports that collect them."""
import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b):
    a = np.asarray(getattr(a, 'data', a), dtype=np.float64)
    b = np.asarray(getattr(b, 'data', b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError('Cannot compare images of shape {} and {}'.format(a.shape, b.shape))
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b)**2))


def psnr_from_mse(value):
    return math.inf if value == 0 else 10. * math.log10(1. / value)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` for
    identical images."""
    return psnr_from_mse(mse(a, b))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    offsets = np.arange(size) - (size - 1) / 2.
    window = np.exp(-offsets**2 / (2 * sigma**2))
    return window / window.sum()


def _gray(image):
    """Channel mean of a (C, H, W) or (N, C, H, W) image; 2-d input passes
    through."""
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError('ssim compares single images, got a batch of {}'.format(image.shape[0]))
        image = image[0]
    return image.mean(axis=0) if image.ndim == 3 else image


def _filter(image, window):
    half = len(window) // 2
    filtered = correlate1d(correlate1d(image, window, axis=0, mode='constant'), window, axis=1, mode='constant')
    return filtered[half:image.shape[0] - half, half:image.shape[1] - half]


def ssim_map(a, b):
    """Local SSIM of the grayscale images over every full 11x11 Gaussian
    window position.

    Raises
    ------
    ValueError
        if the images differ in shape or are smaller than the window.
    """
    a, b = _pair(a, b)
    a, b = _gray(a), _gray(b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError('ssim needs images of at least {0}x{0}, got {1}'.format(SSIM_WINDOW, a.shape))
    window = gaussian_window()
    mu_a = _filter(a, window)
    mu_b = _filter(b, window)
    sigma_a2 = _filter(a * a, window) - mu_a * mu_a
    sigma_b2 = _filter(b * b, window) - mu_b * mu_b
    sigma_ab = _filter(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sigma_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sigma_a2 + sigma_b2 + SSIM_C2)
    return num / den


def ssim(a, b):
    return float(np.mean(ssim_map(a, b)))


def report_psnr(value):
    return min(value, PSNR_CAP)


@dataclass
class MetricReport:
    """Per-frame PSNR (capped at 99 dB), SSIM and MSE of one configuration,
    with aggregates that are plain means over the frames."""
    name: str
    frames: list = field(default_factory=list)

    def add(self, frame_id, output, target):
        """Scores one output image against its target.

        Returns
        -------
        dict
            the frame's row.
        """
        error = mse(output, target)
        row = {
            'frame': frame_id,
            'psnr': report_psnr(psnr_from_mse(error)),
            'ssim': ssim(output, target),
            'mse': error
        }
        self.frames.append(row)
        return row

    @property
    def count(self):
        return len(self.frames)

    def aggregate(self):
        """Mean of every metric over the frames.

        Raises
        ------
        IndexError
            if no frame has been added.
        """
        if not self.frames:
            raise IndexError('Must add frames before aggregating {}'.format(self.name))
        return {key: float(np.mean([row[key] for row in self.frames])) for key in ('psnr', 'ssim', 'mse')}

    def as_dictionary(self):
        return {'name': self.name, 'count': self.count, 'aggregate': self.aggregate(), 'frames': self.frames}

    def write_json(self, filename):
        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filename, 'w', encoding='utf-8') as handle:
            json.dump(self.as_dictionary(), handle, indent=1, sort_keys=True)

    def write_csv(self, filename):
        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filename, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=['frame', 'psnr', 'ssim', 'mse'])
            writer.writeheader()
            writer.writerows(self.frames)
