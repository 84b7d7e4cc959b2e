"""Unit tests for the coarse and detail branches."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from rerender_pi import detail_branch as db
from rerender_pi.coarse_branch import (FeaturePyramid, binarize_mask, build_coarse_branch, check_image,
                                       coarse_forward)
from rerender_pi.keypoints import KeypointSet
from rerender_pi.params import ModelParams
from rerender_pi.tensor import Tensor


def _model_params(**kwargs):
    params = ModelParams()
    params.set_to_defaults()
    params.set(height=64, width=32, base_channels=4, spade_hidden=8)
    params.set(**kwargs)
    return params


def _pyramid(base, height, width, batch=1):
    return FeaturePyramid([Tensor(np.ones((batch, base * 2**i, height // 2**i, width // 2**i))) for i in range(4)],
                          base)


def test_feature_pyramid():
    pyramid = _pyramid(4, 32, 16)
    assert pyramid.channels == (4, 8, 16, 32)
    assert pyramid.sizes == [(32, 16), (16, 8), (8, 4), (4, 2)]
    with pytest.raises(ValueError):
        FeaturePyramid(pyramid.levels[:3], 4)
    with pytest.raises(ValueError):
        FeaturePyramid(pyramid.levels, 8)
    with pytest.raises(ValueError):
        FeaturePyramid([pyramid[0], pyramid[1], pyramid[1], pyramid[3]], 4)


def test_coarse_forward(rng):
    model = build_coarse_branch(_model_params())
    output = coarse_forward(model, Tensor(rng.uniform(0, 1, (2, 3, 64, 32))))
    assert output.coarse_image.shape == (2, 3, 64, 32)
    assert output.mask.shape == (2, 1, 64, 32)
    assert 0. <= output.coarse_image.data.min() and output.coarse_image.data.max() <= 1.
    assert output.guidance.channels == (4, 8, 16, 32)
    assert output.guidance.sizes[0] == (32, 16)


def test_coarse_branch_errors(rng):
    with pytest.raises(ValueError):
        build_coarse_branch(_model_params(height=72))
    model = build_coarse_branch(_model_params())
    with pytest.raises(ValueError):
        coarse_forward(model, Tensor(rng.uniform(0, 1, (1, 4, 64, 32))))
    with pytest.raises(ValueError):
        check_image(Tensor(np.full((1, 3, 4, 4), 1.5)))


def test_binarize_mask():
    mask = Tensor(np.array([0.2, 0.5, 0.7]).reshape(1, 1, 1, 3))
    assert_allclose(binarize_mask(mask).data.ravel(), [0., 0., 1.])


def _keypoints(points):
    return KeypointSet(points, np.ones(25, dtype=bool))


def test_heatmaps_peak_at_keypoints(rng):
    points = rng.uniform(-0.8, 0.8, (25, 2))
    visible = np.ones(25, dtype=bool)
    visible[4] = False
    keypoints = KeypointSet(points, visible)
    heatmap = db.keypoints_to_heatmaps(keypoints, 16, 8, sigma=0.8)
    assert heatmap.shape == (1, 25, 16, 8)
    assert not heatmap.tensor.data[0, 4].any()
    col, row = keypoints.to_pixels(16, 8)[0]
    peak = np.unravel_index(np.argmax(heatmap.tensor.data[0, 0]), (16, 8))
    assert abs(peak[0] - row) <= 0.5 + 1e-9 and abs(peak[1] - col) <= 0.5 + 1e-9


def test_coarse_field(rng):
    points = rng.uniform(-0.6, 0.6, (25, 2))
    same = _keypoints(points)
    heatmap = db.keypoints_to_heatmaps(same, 16, 8, sigma=0.8)
    assert not db.coarse_field(same, same, heatmap).data.any()

    shifted = _keypoints(points + [0.1, -0.05])
    field = db.coarse_field(same, shifted, db.keypoints_to_heatmaps(shifted, 16, 8, sigma=0.8)).data
    assert field.shape == (1, 2, 16, 8)
    # a convex combination of the shift and the zero background motion
    assert np.all(field[0, 0] >= 0) and np.all(field[0, 0] <= 0.1 + 1e-6)
    assert np.all(field[0, 1] <= 0) and np.all(field[0, 1] >= -0.05 - 1e-6)
    assert_allclose(field[0, 0] * -0.5, field[0, 1], atol=1e-6)


def test_blend_ratio():
    assert float(db.BlendRatio(0.25)) == 0.25
    with pytest.raises(ValueError):
        db.BlendRatio(-0.1)
    with pytest.raises(ValueError):
        db.blend_features(_pyramid(4, 32, 16), _pyramid(4, 64, 32), alpha=2.)


def test_blend_features():
    guidance = _pyramid(4, 32, 16)
    warped = FeaturePyramid([level * 3. for level in _pyramid(4, 64, 32)], 4)
    blended = db.blend_features(guidance, warped, alpha=0.25)
    assert blended.sizes == warped.sizes
    assert_allclose(blended[0].data, 0.25 + 0.75 * 3., rtol=1e-6)
    assert_allclose(db.blend_features(guidance, warped, alpha=1.)[2].data, 1., rtol=1e-6)
    np.testing.assert_array_equal(db.blend_features(guidance, warped, alpha=0.)[1].data, warped[1].data)
    with pytest.raises(ValueError):
        db.blend_features(_pyramid(8, 32, 16), warped)


def test_compose_output():
    coarse = Tensor(np.full((1, 3, 4, 4), 0.8))
    detail = Tensor(np.full((1, 3, 4, 4), 0.5))
    assert_allclose(db.compose_output(coarse, detail).data, 1.)
    assert_allclose(db.compose_output(coarse, detail * -1.).data, 0.3, rtol=1e-6)
    with pytest.raises(ValueError):
        db.compose_output(coarse, Tensor(np.zeros((1, 3, 4, 2))))


def test_detail_branch(rng):
    params = _model_params()
    model = db.build_detail_branch(params)
    reference = Tensor(rng.uniform(0, 1, (1, 3, 64, 32)))
    pyramid = db.encode_reference(model.ref_encoder, reference)
    assert pyramid.channels == (4, 8, 16, 32)
    assert pyramid.sizes == [(64, 32), (32, 16), (16, 8), (8, 4)]
    # the output layer starts at zero, so the residual image does too
    assert not db.detail_decode(model.decoder, pyramid).data.any()

    field = Tensor(np.zeros((1, 2, 16, 8)))
    warped = db.warp_pyramid(pyramid, field)
    assert_allclose(warped[1].data, pyramid[1].data, rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        db.build_detail_branch(_model_params(height=80))


def test_refine_field(rng):
    refine = db.RefineNet(rng)
    quarter = Tensor(rng.uniform(0, 1, (1, 3, 16, 8)))
    heatmap = db.keypoints_to_heatmaps(_keypoints(rng.uniform(-0.5, 0.5, (25, 2))), 16, 8, 0.8)
    residual = db.refine_field(refine, quarter, quarter, heatmap, heatmap)
    assert residual.shape == (1, 2, 16, 8)
    assert not residual.data.any()
    with pytest.raises(ValueError):
        db.refine_field(refine, Tensor(np.zeros((1, 3, 8, 8))), quarter, heatmap, heatmap)


def _random_pyramid(rng, base, height, width):
    shapes = [(1, base * 2**i, height // 2**i, width // 2**i) for i in range(4)]
    return FeaturePyramid([Tensor(rng.standard_normal(shape), dtype=np.float64) for shape in shapes], base)


def test_blend_is_linear_in_alpha(rng):
    guidance = _random_pyramid(rng, 4, 32, 16)
    warped = _random_pyramid(rng, 4, 64, 32)
    for a1, a2 in ((0.1, 0.3), (0.25, 0.75), (0.05, 0.6)):
        left = [x.data + y.data for x, y in zip(db.blend_features(guidance, warped, a1),
                                                db.blend_features(guidance, warped, a2))]
        right = [x.data + y.data for x, y in zip(db.blend_features(guidance, warped, a1 + a2),
                                                 db.blend_features(guidance, warped, 0.))]
        for a, b in zip(left, right):
            assert_allclose(a, b, atol=1e-6)


def test_swapped_keypoints_negate_coarse_field(rng):
    pose = rng.uniform(-0.5, 0.5, (25, 2))
    offset = rng.uniform(-0.05, 0.05, (25, 2))
    forward, backward = _keypoints(pose + offset), _keypoints(pose - offset)
    heatmap = db.keypoints_to_heatmaps(_keypoints(pose), 16, 8, sigma=0.8)
    field = db.coarse_field(forward, backward, heatmap).data
    assert np.abs(field).max() > 0
    assert_allclose(field, -db.coarse_field(backward, forward, heatmap).data, atol=1e-7)


def test_warp_pyramid_constant_shift(rng):
    pyramid = _random_pyramid(rng, 4, 32, 16)
    # two columns right and one row down at the finest level
    field = np.zeros((1, 2, 8, 4))
    field[0, 0], field[0, 1] = 2 * 2. / 16, 2 * 1. / 32
    warped = db.warp_pyramid(pyramid, Tensor(field))
    assert warped.sizes == pyramid.sizes and warped.channels == pyramid.channels

    level = pyramid[0].data[0]
    expected = np.empty_like(level)
    for y in range(32):
        for x in range(16):
            expected[:, y, x] = level[:, min(y + 1, 31), min(x + 2, 15)]
    assert_allclose(warped[0].data[0], expected, atol=1e-5)


def test_decoder_conditions_on_every_blended_level(rng):
    decoder = db.DetailDecoder(4, 8, rng)
    decoder.out.weight.data = rng.normal(0, 0.1, decoder.out.weight.shape).astype(decoder.out.weight.dtype)
    blended = _random_pyramid(rng, 4, 64, 32)
    output = db.detail_decode(decoder, blended).data
    assert output.shape == (1, 3, 64, 32)
    for index in range(4):
        levels = list(blended)
        levels[index] = Tensor(levels[index].data + rng.standard_normal(levels[index].shape), dtype=np.float64)
        changed = db.detail_decode(decoder, FeaturePyramid(levels, 4)).data
        assert np.abs(changed - output).max() > 1e-4
