"""The full two-branch network and its single forward pass."""
import contextlib
import time
from dataclasses import dataclass
from typing import Optional

from rerender_pi import ops
from rerender_pi.coarse_branch import CoarseOutput, FeaturePyramid, build_coarse_branch, check_image, coarse_forward
from rerender_pi.detail_branch import (WarpField, blend_features, build_detail_branch,
                                       coarse_field, compose_output, detail_decode, encode_reference,
                                       keypoints_to_heatmaps, quarter_size, refine_field, warp_pyramid)
from rerender_pi.nn import Module
from rerender_pi.tensor import Tensor

BENCH_STAGES = ('coarse', 'reference_encoding', 'warping', 'detail_decoding')


@dataclass
class RenderOutput:
    enhanced: Tensor
    coarse: Optional[CoarseOutput] = None
    detail_image: Optional[Tensor] = None
    warp: Optional[WarpField] = None
    reference_pyramid: Optional[FeaturePyramid] = None


@contextlib.contextmanager
def _timed(timings, stage):
    start = time.perf_counter()
    try:
        yield
    finally:
        if timings is not None:
            timings[stage] = timings.get(stage, 0.) + time.perf_counter() - start


class RerenderNet(Module):
    """Coarse branch plus detail branch.

    ``mode`` selects the configuration: ``full``, ``coarse_only`` (the
    enhanced image is I_c) or ``detail_only`` (no guidance; the decoder sees
    the warped reference features alone and I_e = clamp(I_d, 0, 1)).

    Parameters
    ----------
    params : ModelParams
    """

    def __init__(self, params):
        params.validate()
        self.params = params
        self.mode = params.get('mode')
        self.alpha = params.get('alpha')
        self.coarse = build_coarse_branch(params)
        self.detail = build_detail_branch(params)

    def parameters_with_prefix(self, prefix):
        return [parameter for name, parameter in self.named_parameters() if name.startswith(prefix)]

    def encode_reference(self, reference_image):
        return encode_reference(self.detail.ref_encoder, reference_image)

    def warp(self, input_keypoints, reference_image, reference_keypoints):
        """Coarse and refine fields at quarter resolution.

        Returns
        -------
        WarpField
        """
        height, width = reference_image.shape[2:]
        h, w = quarter_size(height, width)
        sigma = self.params.get('heatmap_sigma') * h
        input_heatmap = keypoints_to_heatmaps(input_keypoints, h, w, sigma)
        reference_heatmap = keypoints_to_heatmaps(reference_keypoints, h, w, sigma)
        field = coarse_field(input_keypoints, reference_keypoints, reference_heatmap,
                             self.params.get('background_weight'))
        reference_quarter = ops.bilinear_resize(reference_image, h, w)
        coarse_warped = ops.grid_sample(reference_quarter, field)
        residual = refine_field(self.detail.refine, reference_quarter, coarse_warped, input_heatmap,
                                reference_heatmap)
        return WarpField(coarse=field, refine=residual)

    def forward(self, rendered_input, input_keypoints=None, reference_image=None, reference_keypoints=None,
                reference_pyramid=None, alpha=None, timings=None):
        """One pass of the network.

        Parameters
        ----------
        rendered_input : Tensor
            I_i, (N, 3, H, W) in [0, 1]
        input_keypoints, reference_keypoints : KeypointSet or list of KeypointSet
        reference_image : Tensor
            I_r, same size as the input
        reference_pyramid : FeaturePyramid, optional
            precomputed F_r; encoded from ``reference_image`` when absent.
        alpha : float, optional
            blend ratio, the model's value by default.
        timings : dict, optional
            receives wall time per stage (see ``BENCH_STAGES``).

        Returns
        -------
        RenderOutput
        """
        coarse = None
        if self.mode != 'detail_only':
            with _timed(timings, 'coarse'):
                coarse = coarse_forward(self.coarse, rendered_input)
            if self.mode == 'coarse_only':
                return RenderOutput(enhanced=coarse.coarse_image, coarse=coarse)
        else:
            check_image(rendered_input, 'rendered input')
        if reference_image is None or input_keypoints is None or reference_keypoints is None:
            raise ValueError('The {} model needs a reference image and both keypoint sets'.format(self.mode))
        if reference_image.shape != rendered_input.shape:
            raise ValueError('Reference {} and input {} differ in shape'.format(reference_image.shape,
                                                                                rendered_input.shape))

        with _timed(timings, 'reference_encoding'):
            if reference_pyramid is None:
                reference_pyramid = self.encode_reference(reference_image)
        with _timed(timings, 'warping'):
            warp = self.warp(input_keypoints, reference_image, reference_keypoints)
            warped = warp_pyramid(reference_pyramid, warp.total)
        with _timed(timings, 'detail_decoding'):
            if self.mode == 'full':
                blended = blend_features(coarse.guidance, warped, self.alpha if alpha is None else alpha)
                detail_image = detail_decode(self.detail.decoder, blended)
                enhanced = compose_output(coarse.coarse_image, detail_image)
            else:
                detail_image = detail_decode(self.detail.decoder, warped)
                enhanced = detail_image.clamp(0., 1.)
        return RenderOutput(enhanced=enhanced, coarse=coarse, detail_image=detail_image, warp=warp,
                            reference_pyramid=reference_pyramid)
