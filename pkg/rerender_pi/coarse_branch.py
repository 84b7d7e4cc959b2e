"""The coarse branch: a small U-Net that repairs the rendered input at half
resolution, predicts a foreground mask and exposes its encoder activations as
guidance features.
"""
from dataclasses import dataclass

import numpy as np

from rerender_pi import ops
from rerender_pi.nn import Conv2d, ConvNormReLU, Down, Module, Up
from rerender_pi.tensor import Tensor


class FeaturePyramid:
    """Four feature maps from shallow to deep. Channels double and the
    spatial size halves from one level to the next.

    Parameters
    ----------
    levels : list of Tensor
    base_channels : int, optional
        channels of level 0, by default 32

    Raises
    ------
    ValueError
        if the level count, channel sequence or halving chain is wrong.
    """

    def __init__(self, levels, base_channels=32):
        levels = list(levels)
        if len(levels) != 4:
            raise ValueError('A feature pyramid has 4 levels, got {}'.format(len(levels)))
        expected = tuple(base_channels * 2**i for i in range(4))
        channels = tuple(level.shape[1] for level in levels)
        if channels != expected:
            raise ValueError('Pyramid channels {} differ from {}'.format(channels, expected))
        for shallow, deep in zip(levels, levels[1:]):
            if (shallow.shape[2] // 2, shallow.shape[3] // 2) != deep.shape[2:] or shallow.shape[2] % 2:
                raise ValueError('Pyramid levels {} and {} do not halve'.format(shallow.shape, deep.shape))
        self.levels = levels
        self.base_channels = base_channels

    def __getitem__(self, index):
        return self.levels[index]

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @property
    def channels(self):
        return tuple(level.shape[1] for level in self.levels)

    @property
    def sizes(self):
        return [level.shape[2:] for level in self.levels]

    def detach(self):
        return FeaturePyramid([level.detach() for level in self.levels], self.base_channels)


@dataclass
class CoarseOutput:
    coarse_image: Tensor
    mask: Tensor
    guidance: FeaturePyramid


class CoarseModel(Module):
    """Encoder E_c and decoder D_c with channel-concat skip connections."""

    def __init__(self, base_channels, rng):
        b = base_channels
        self.base_channels = b
        self.enc = [ConvNormReLU(3, b, 3, rng), Down(b, 2 * b, rng), Down(2 * b, 4 * b, rng), Down(4 * b, 8 * b, rng)]
        self.up = [Up(8 * b, 4 * b, rng), Up(4 * b, 2 * b, rng), Up(2 * b, b, rng)]
        self.fuse = [
            ConvNormReLU(8 * b, 4 * b, 3, rng),
            ConvNormReLU(4 * b, 2 * b, 3, rng),
            ConvNormReLU(2 * b, b, 3, rng)
        ]
        self.head = Conv2d(b, 4, 3, rng)

    def encode(self, x):
        levels = []
        for block in self.enc:
            x = block(x)
            levels.append(x)
        return FeaturePyramid(levels, self.base_channels)

    def forward(self, x):
        guidance = self.encode(x)
        y = guidance[3]
        for up, fuse, skip in zip(self.up, self.fuse, (guidance[2], guidance[1], guidance[0])):
            y = fuse(ops.concat(up(y), skip))
        return ops.sigmoid(self.head(y)), guidance


def build_coarse_branch(params, rng=None):
    """Builds E_c and D_c.

    Parameters
    ----------
    params : ModelParams
    rng : numpy.random.Generator, optional
        weight initialisation; seeded from ``init_seed`` by default.

    Returns
    -------
    CoarseModel

    Raises
    ------
    ValueError
        if the working resolution is not divisible by 16.
    """
    height, width = params.get('height'), params.get('width')
    if height % 16 or width % 16:
        raise ValueError('The coarse branch needs a resolution divisible by 16, got {}x{}'.format(height, width))
    if rng is None:
        rng = np.random.default_rng(params.get('init_seed'))
    model = CoarseModel(params.get('base_channels'), rng)
    model.assign_names('coarse.')
    return model


def check_image(image, name='image'):
    """Raises ValueError unless ``image`` is a 3-channel tensor in [0, 1]."""
    if image.shape[1] != 3:
        raise ValueError('{} must have 3 channels, got {}'.format(name, image.shape[1]))
    if image.data.min() < 0 or image.data.max() > 1:
        raise ValueError('{} values must lie in [0, 1], got [{}, {}]'.format(name, image.data.min(), image.data.max()))


def coarse_forward(model, rendered_input):
    """Runs the coarse branch on the ``rendered_input`` image I_i.

    The input is halved before encoding; the 4-channel sigmoid output is
    split into image and mask and resized back to the working resolution.

    Returns
    -------
    CoarseOutput

    Raises
    ------
    ValueError
        for a wrong channel count or values outside [0, 1].
    """
    check_image(rendered_input, 'rendered input')
    height, width = rendered_input.shape[2:]
    output, guidance = model(ops.downsample2(rendered_input))
    output = ops.bilinear_resize(output, height, width)
    return CoarseOutput(coarse_image=output.channels(0, 3), mask=output.channels(3, 4), guidance=guidance)


def binarize_mask(mask, threshold=0.5):
    """{0, 1} mask of the entries strictly above ``threshold``."""
    return Tensor((mask.data > threshold).astype(mask.dtype), dtype=mask.dtype)
