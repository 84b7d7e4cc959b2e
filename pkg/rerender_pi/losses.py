"""Training losses and the warp-loss curriculum."""
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from rerender_pi import ops
from rerender_pi.detail_branch import warp_image
from rerender_pi.nn import Conv2d, Module
from rerender_pi.tensor import Tensor

PERCEPTUAL_CHANNELS = (16, 32, 64, 128, 256)
PERCEPTUAL_SCALES = (1., .5, .25)


@dataclass(frozen=True)
class LossWeights:
    lambda_r_vgg: float = 0.9
    lambda_r_img: float = 0.1
    lambda_w_img: float = 1.0
    lambda_w_reg: float = 1.0
    lambda_c: float = 0.5
    lambda_d: float = 1.0

    def __post_init__(self):
        for key, value in vars(self).items():
            if value < 0:
                raise ValueError('{} must be non-negative, got {}'.format(key, value))


@dataclass(frozen=True)
class WarpSchedule:
    """Epoch-dependent weights (lambda_c_img, lambda_r_img, lambda_reg) of
    the warp loss.

    Before ``ramp_start`` only the coarse warp is supervised; from
    ``ramp_start`` the refined warp weight starts at 0.5 and grows by 0.05 per
    epoch; from ``curriculum_end`` on only the refined warp is supervised and
    the residual regularizer is off.
    """
    ramp_start: int = 5
    curriculum_end: int = 15

    def weights(self, epoch):
        """Returns the exact weights for ``epoch`` as floats."""
        if epoch >= self.curriculum_end:
            return 0., 1., 0.
        if epoch < self.ramp_start:
            return 1., 0., 1.
        lambda_r = min(Fraction(1, 2) + Fraction(1, 20) * (epoch - self.ramp_start), Fraction(1))
        return float(1 - lambda_r), float(lambda_r), 1.

    def is_early(self, epoch):
        return epoch < self.curriculum_end


class PerceptualExtractor(Module):
    """Five stride-2 conv + ReLU stages with frozen weights drawn from
    ``seed``; stands in for a pretrained classification network."""

    def __init__(self, seed=1234):
        rng = np.random.default_rng(seed)
        self.seed = seed
        channels = (3, ) + PERCEPTUAL_CHANNELS
        self.stages = [Conv2d(c_in, c_out, 3, rng, stride=2) for c_in, c_out in zip(channels, channels[1:])]
        self.assign_names('perceptual.')
        self.set_trainable(False)

    def forward(self, x):
        features = []
        for stage in self.stages:
            x = ops.relu(stage(x))
            features.append(x)
        return features


def _check_shapes(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError('Loss operands differ in shape: {} and {}'.format(a.shape, b.shape))


def l1(a, b):
    _check_shapes((a, b))
    return (a - b).abs().mean()


def coarse_loss(coarse_image, coarse_mask, target_image, target_mask):
    """``L_c = mean|I_c - I_gt| + mean|M_c - M_gt|``."""
    _check_shapes((coarse_image, target_image), (coarse_mask, target_mask))
    return l1(coarse_image, target_image) + l1(coarse_mask, target_mask)


def rescale(image, scale):
    if scale == 1.:
        return image
    return ops.bilinear_resize(image, max(1, int(image.shape[2] * scale)), max(1, int(image.shape[3] * scale)))


def reconstruction_loss(enhanced, target, extractor):
    """Perceptual and pixel reconstruction terms.

    Returns
    -------
    tuple of Tensor
        ``(L_r_vgg, L_r_img)``: the perceptual term sums the mean absolute
        feature difference over every extractor stage at scales 1, 1/2 and
        1/4; the pixel term is the mean absolute difference.
    """
    _check_shapes((enhanced, target))
    perceptual = None
    for scale in PERCEPTUAL_SCALES:
        for ours, theirs in zip(extractor(rescale(enhanced, scale)), extractor(rescale(target, scale))):
            term = l1(ours, theirs)
            perceptual = term if perceptual is None else perceptual + term
    return perceptual, l1(enhanced, target)


@dataclass
class WarpLossParts:
    image: Tensor
    reg: Tensor
    lambda_c_img: float
    lambda_r_img: float
    lambda_reg: float

    @property
    def total(self):
        return self.image + self.reg * self.lambda_reg


def warp_loss_parts(reference_image, target, warp, schedule, epoch):
    """Image and regularization parts of the warp loss at ``epoch``.

    ``image = lambda_c * mean|f_wc(I_r) - I_gt| + lambda_r * mean|f_w(I_r) - I_gt|``
    and ``reg = mean|W_r|``; the fields are resized to the image size before
    warping. Terms with zero weight are not evaluated.

    Returns
    -------
    WarpLossParts
    """
    lambda_c, lambda_r, lambda_reg = schedule.weights(epoch)
    image = None
    if lambda_c > 0:
        image = l1(warp_image(reference_image, warp.coarse), target) * lambda_c
    if lambda_r > 0:
        term = l1(warp_image(reference_image, warp.total), target) * lambda_r
        image = term if image is None else image + term
    return WarpLossParts(image=image, reg=warp.refine.abs().mean(), lambda_c_img=lambda_c, lambda_r_img=lambda_r,
                         lambda_reg=lambda_reg)


def warp_loss(reference_image, target, warp, schedule, epoch):
    """Scalar warp loss, image part plus the scheduled regularizer."""
    return warp_loss_parts(reference_image, target, warp, schedule, epoch).total


def total_detail_loss(r_vgg, r_img, w_img, w_reg, lambda_reg=1.0, weights=LossWeights()):
    """``L_d = 0.9 L_r_vgg + 0.1 L_r_img + 1.0 L_w_img + 1.0 lambda_reg L_w_reg``.

    ``lambda_reg`` is 1 in the early phase of the curriculum and 0 after it.
    Parts may be tensors or floats.
    """
    return (r_vgg * weights.lambda_r_vgg + r_img * weights.lambda_r_img + w_img * weights.lambda_w_img +
            w_reg * (weights.lambda_w_reg * lambda_reg))


def finetune_loss(coarse, detail, weights=LossWeights()):
    """``L_f = 0.5 L_c + 1.0 L_d``."""
    return coarse * weights.lambda_c + detail * weights.lambda_d
