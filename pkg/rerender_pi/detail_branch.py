"""The detail branch: reference encoder, keypoint-driven warp module, feature
blending and the SPADE-conditioned detail decoder.

Warp fields live at a quarter of the working resolution and hold
displacements in normalized image coordinates (see ``ops.grid_sample``); a
field sampled at an output position points to where the reference is read.
"""
from dataclasses import dataclass

import numpy as np

from rerender_pi import ops
from rerender_pi.coarse_branch import FeaturePyramid, check_image
from rerender_pi.keypoints import KeypointSet
from rerender_pi.nn import Conv2d, ConvNormReLU, Down, Module, Up
from rerender_pi.tensor import Tensor

DEFAULT_ALPHA = 0.1


@dataclass
class Heatmap:
    """(N, 25, h, w) Gaussian bumps, one channel per keypoint."""
    tensor: Tensor
    sigma: float

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class WarpField:
    """Coarse part W_c and refine part W_r of a warp, both (N, 2, h, w)."""
    coarse: Tensor
    refine: Tensor

    @property
    def total(self):
        return self.coarse + self.refine

    def is_finite(self):
        return bool(np.all(np.isfinite(self.coarse.data)) and np.all(np.isfinite(self.refine.data)))


class BlendRatio:
    """Weight of the guidance features against the warped reference
    features.

    Raises
    ------
    ValueError
        if ``alpha`` lies outside [0, 1].
    """

    def __init__(self, alpha=DEFAULT_ALPHA):
        alpha = float(alpha)
        if not 0. <= alpha <= 1.:
            raise ValueError('alpha must lie in [0, 1], got {}'.format(alpha))
        self.alpha = alpha

    def __float__(self):
        return self.alpha

    def __repr__(self):
        return 'BlendRatio({})'.format(self.alpha)


def _as_list(keypoints):
    return [keypoints] if isinstance(keypoints, KeypointSet) else list(keypoints)


def quarter_size(height, width):
    return height // 4, width // 4


def keypoints_to_heatmaps(keypoints, h, w, sigma):
    """Renders one Gaussian bump per visible keypoint.

    Parameters
    ----------
    keypoints : KeypointSet or list of KeypointSet
        one set per batch entry.
    h, w : int
        heatmap size, a quarter of the working resolution.
    sigma : float
        standard deviation in pixels.

    Returns
    -------
    Heatmap
        channel k is exp(-d^2 / (2 sigma^2)) around keypoint k, zero when the
        keypoint is invisible.
    """
    sets = _as_list(keypoints)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    maps = np.zeros((len(sets), len(sets[0].visible), h, w))
    for n, keypoint_set in enumerate(sets):
        pixels = keypoint_set.to_pixels(h, w)
        for k in np.flatnonzero(keypoint_set.visible):
            col, row = pixels[k]
            maps[n, k] = np.exp(-((rows - row)**2 + (cols - col)**2) / (2 * sigma**2))
    return Heatmap(Tensor(maps), sigma)


def coarse_field(input_keypoints, reference_keypoints, reference_heatmap, background_weight=0.1):
    """Part-based rigid motion W_c.

    Every keypoint visible in both sets contributes its displacement
    ``p_ref - p_in``, weighted by its reference heatmap channel; a background
    channel of constant weight contributes zero displacement.

    Returns
    -------
    Tensor
        (N, 2, h, w) field outside the differentiation graph.
    """
    inputs = _as_list(input_keypoints)
    references = _as_list(reference_keypoints)
    maps = reference_heatmap.tensor.data.astype(np.float64)
    fields = np.zeros((len(inputs), 2) + maps.shape[2:])
    for n, (p_in, p_ref) in enumerate(zip(inputs, references)):
        joint = p_in.visible & p_ref.visible
        weights = maps[n] * joint[:, None, None]
        displacement = np.where(joint[:, None], p_ref.points - p_in.points, 0.)
        norm = weights.sum(axis=0) + background_weight
        fields[n] = np.tensordot(displacement.T, weights, axes=([1], [0])) / norm
    return Tensor(fields, dtype=reference_heatmap.tensor.dtype)


class RefEncoder(Module):
    """E_r: a 7x7 stem at full resolution followed by three Down blocks."""

    def __init__(self, base_channels, rng):
        b = base_channels
        self.base_channels = b
        self.blocks = [
            ConvNormReLU(3, b, 7, rng),
            Down(b, 2 * b, rng),
            Down(2 * b, 4 * b, rng),
            Down(4 * b, 8 * b, rng)
        ]

    def forward(self, x):
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return FeaturePyramid(levels, self.base_channels)


class RefineNet(Module):
    """Predicts the non-rigid residual W_r from the quarter-resolution
    reference, its coarse warp and both heatmaps (56 input channels)."""

    IN_CHANNELS = 3 + 3 + 25 + 25

    def __init__(self, rng):
        self.down = [Down(self.IN_CHANNELS, 32, rng), Down(32, 64, rng), Down(64, 128, rng)]
        self.up = [Up(128, 64, rng), Up(128, 32, rng)]
        self.out = Conv2d(64, 2, 3, rng, zero_init=True)

    def forward(self, x):
        d1 = self.down[0](x)
        d2 = self.down[1](d1)
        d3 = self.down[2](d2)
        y = ops.concat(ops.relu(self.up[0](d3)), d2)
        y = ops.concat(ops.relu(self.up[1](y)), d1)
        return self.out(ops.upsample2(y))


class SPADE(Module):
    """Parameter-free instance norm modulated by a per-pixel scale and shift
    predicted from a conditioning map."""

    def __init__(self, norm_channels, cond_channels, hidden, rng):
        self.shared = Conv2d(cond_channels, hidden, 3, rng)
        self.gamma = Conv2d(hidden, norm_channels, 3, rng)
        self.beta = Conv2d(hidden, norm_channels, 3, rng)

    def forward(self, x, cond):
        if cond.shape[2:] != x.shape[2:]:
            cond = ops.bilinear_resize(cond, *x.shape[2:])
        actv = ops.relu(self.shared(cond))
        return ops.instance_norm(x) * (self.gamma(actv) + 1.0) + self.beta(actv)


class DetailDecoder(Module):
    """D_d: the deepest blended level feeds the trunk, the shallower three
    condition one SPADE layer each. The output layer starts at zero."""

    def __init__(self, base_channels, spade_hidden, rng):
        b = base_channels
        self.up = [Up(8 * b, 4 * b, rng), Up(4 * b, 2 * b, rng), Up(2 * b, b, rng)]
        self.spade = [SPADE(4 * b, 4 * b, spade_hidden, rng), SPADE(2 * b, 2 * b, spade_hidden, rng),
                      SPADE(b, b, spade_hidden, rng)]
        self.out = Conv2d(b, 3, 3, rng, zero_init=True)

    def forward(self, blended):
        if len(blended) != 4:
            raise ValueError('The detail decoder needs 4 pyramid levels, got {}'.format(len(blended)))
        y = blended[3]
        for up, spade, cond in zip(self.up, self.spade, (blended[2], blended[1], blended[0])):
            y = ops.relu(spade(up(y), cond))
        return self.out(y)


class DetailModel(Module):
    def __init__(self, base_channels, spade_hidden, rng):
        self.ref_encoder = RefEncoder(base_channels, rng)
        self.refine = RefineNet(rng)
        self.decoder = DetailDecoder(base_channels, spade_hidden, rng)


def build_detail_branch(params, rng=None):
    """Builds E_r, the refine net and D_d.

    Raises
    ------
    ValueError
        if the working resolution is not divisible by 32.
    """
    height, width = params.get('height'), params.get('width')
    if height % 32 or width % 32:
        raise ValueError('The detail branch needs a resolution divisible by 32, got {}x{}'.format(height, width))
    if rng is None:
        rng = np.random.default_rng(params.get('init_seed') + 1)
    model = DetailModel(params.get('base_channels'), params.get('spade_hidden'), rng)
    model.assign_names('detail.')
    return model


def encode_reference(ref_encoder, reference_image):
    """Feature pyramid F_r of a reference image.

    Raises
    ------
    ValueError
        unless the image has 3 channels in [0, 1].
    """
    check_image(reference_image, 'reference image')
    return ref_encoder(reference_image)


def refine_field(refine_net, reference_quarter, coarse_warped_ref, input_heatmap, reference_heatmap):
    """Residual field W_r, all inputs at quarter resolution.

    Raises
    ------
    ValueError
        if the inputs differ in spatial size.
    """
    inputs = (reference_quarter, coarse_warped_ref, input_heatmap.tensor, reference_heatmap.tensor)
    sizes = {tensor.shape[2:] for tensor in inputs}
    if len(sizes) != 1:
        raise ValueError('refine_field inputs differ in size: {}'.format(sorted(sizes)))
    return refine_net(ops.concat(*inputs))


def warp_image(image, field):
    """Warps an image with a (possibly smaller) field resized to its size."""
    return ops.grid_sample(image, ops.bilinear_resize(field, *image.shape[2:]))


def warp_pyramid(reference_pyramid, field):
    """Warps every level with the field resized to that level; displacement
    values are kept as they are normalized coordinates.

    Parameters
    ----------
    reference_pyramid : FeaturePyramid
    field : Tensor or WarpField
        the total field when a WarpField is given.

    Returns
    -------
    FeaturePyramid
    """
    if isinstance(field, WarpField):
        field = field.total
    return FeaturePyramid([warp_image(level, field) for level in reference_pyramid],
                          reference_pyramid.base_channels)


def blend_features(guidance, warped, alpha=DEFAULT_ALPHA):
    """``F_b = alpha * F_g + (1 - alpha) * F_w`` per level, after resizing the
    guidance levels to the warped sizes.

    Raises
    ------
    ValueError
        on a channel mismatch or alpha outside [0, 1].
    """
    alpha = float(BlendRatio(alpha))
    if guidance.channels != warped.channels:
        raise ValueError('Cannot blend channels {} with {}'.format(guidance.channels, warped.channels))
    levels = []
    for g, f in zip(guidance, warped):
        levels.append(ops.bilinear_resize(g, *f.shape[2:]) * alpha + f * (1. - alpha))
    return FeaturePyramid(levels, warped.base_channels)


def detail_decode(decoder, blended):
    return decoder(blended)


def compose_output(coarse_image, detail_image):
    """``I_e = clamp(I_c + I_d, 0, 1)``.

    Raises
    ------
    ValueError
        on a shape mismatch.
    """
    if coarse_image.shape != detail_image.shape:
        raise ValueError('Cannot compose {} with {}'.format(coarse_image.shape, detail_image.shape))
    return (coarse_image + detail_image).clamp(0., 1.)
