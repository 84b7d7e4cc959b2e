"""Central finite differences against the analytic gradients of every
differentiable operation, in 64-bit precision."""
import logging
from dataclasses import dataclass

import numpy as np

from rerender_pi import losses, ops
from rerender_pi.detail_branch import WarpField
from rerender_pi.tensor import Tensor, backward, float64_mode, no_grad

TOLERANCE = 1e-3
EPSILON = 1e-4
KINK_MARGIN = 2e-4

logger = logging.getLogger(__name__)


@dataclass
class GradCheckResult:
    name: str
    seed: int
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return self.error < self.tolerance


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|)`` in the l2 norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_error(fn, inputs, rng, eps=EPSILON, max_entries=48):
    """Largest relative error between analytic and numeric gradients of
    ``sum(fn(*inputs) * direction)`` over the inputs, for a random direction.

    At most ``max_entries`` randomly chosen entries of each input are
    perturbed.

    Parameters
    ----------
    fn : callable
        maps the input tensors to one tensor.
    inputs : list of Tensor
        float64 tensors with ``requires_grad`` set; perturbed in place and
        restored.
    rng : numpy.random.Generator

    Returns
    -------
    float
    """
    with float64_mode():
        with no_grad():
            direction = Tensor(rng.standard_normal(fn(*inputs).shape))

        def value():
            with no_grad():
                return (fn(*inputs) * direction).sum().item()

        for tensor in inputs:
            tensor.zero_grad()
        backward((fn(*inputs) * direction).sum())

        worst = 0.
        for tensor in inputs:
            analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad
            flat = tensor.data.reshape(-1)
            entries = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
            numeric = np.empty(len(entries))
            for position, entry in enumerate(entries):
                original = flat[entry]
                flat[entry] = original + eps
                plus = value()
                flat[entry] = original - eps
                minus = value()
                flat[entry] = original
                numeric[position] = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(analytic.reshape(-1)[entries], numeric))
    return worst


def _leaf(array):
    return Tensor(array, requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, low=0.05, high=1.):
    return rng.uniform(low, high, shape) * rng.choice([-1., 1.], shape)


def _conv_case(rng, stride, padding):
    x = _leaf(rng.standard_normal((2, 3, 7, 6)))
    weight = _leaf(rng.standard_normal((4, 3, 3, 3)))
    bias = _leaf(rng.standard_normal((1, 4, 1, 1)))
    return lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=padding), [x, weight, bias]


def _between_pixels(rng, size, shape):
    """Sample coordinates inside an axis of ``size`` pixels, at least 0.2
    pixels from any integer position."""
    return rng.integers(0, size - 1, shape) + rng.uniform(0.2, 0.8, shape)


def _grid_sample_case(rng):
    n, h, w, h_out, w_out = 2, 8, 6, 5, 4
    image = _leaf(rng.uniform(0, 1, (n, 3, h, w)))
    base_x = (np.arange(w_out) + 0.5) * (w / w_out) - 0.5
    base_y = (np.arange(h_out) + 0.5) * (h / h_out) - 0.5
    flow_x = (_between_pixels(rng, w, (n, h_out, w_out)) - base_x[None, None, :]) / (w / 2)
    flow_y = (_between_pixels(rng, h, (n, h_out, w_out)) - base_y[None, :, None]) / (h / 2)
    return ops.grid_sample, [image, _leaf(np.stack([flow_x, flow_y], axis=1))]


def _warp_loss_case(rng):
    reference = _leaf(rng.uniform(0, 1, (1, 3, 16, 8)))
    target = Tensor(rng.uniform(0, 1, (1, 3, 16, 8)), dtype=np.float64)
    coarse = Tensor(rng.uniform(-0.1, 0.1, (1, 2, 4, 2)), dtype=np.float64)
    refine = _leaf(_away_from_zero(rng, (1, 2, 4, 2), 0.02, 0.1))
    schedule = losses.WarpSchedule()

    def fn(reference, refine):
        return losses.warp_loss(reference, target, WarpField(coarse=coarse, refine=refine), schedule, 7)

    return fn, [reference, refine]


def _kink_distance(enhanced, target, extractor):
    """Smallest distance of any ReLU pre-activation or absolute-difference
    argument of the reconstruction loss from its kink at 0."""
    distances = [np.abs(enhanced - target).min()]
    with no_grad():
        for scale in losses.PERCEPTUAL_SCALES:
            ours = losses.rescale(Tensor(enhanced), scale)
            theirs = losses.rescale(Tensor(target), scale)
            for stage in extractor.stages:
                before = stage(ours).data
                ours, theirs = ops.relu(Tensor(before)), ops.relu(stage(theirs))
                distances.append(np.abs(before).min())
                active = (ours.data > 0) | (theirs.data > 0)
                if active.any():
                    distances.append(np.abs(ours.data - theirs.data)[active].min())
    return min(distances)


def _reconstruction_case(rng, attempts=200):
    for _ in range(attempts):
        extractor = losses.PerceptualExtractor(seed=int(rng.integers(1 << 16)))
        enhanced = rng.uniform(0, 1, (1, 3, 8, 8))
        target = rng.uniform(0, 1, (1, 3, 8, 8))
        if _kink_distance(enhanced, target, extractor) > KINK_MARGIN:
            break
    else:
        raise RuntimeError('No reconstruction case clear of ReLU and L1 kinks in {} attempts'.format(attempts))
    enhanced = _leaf(enhanced)
    target = Tensor(target, dtype=np.float64)

    def fn(enhanced):
        vgg, img = losses.reconstruction_loss(enhanced, target, extractor)
        return vgg * 0.9 + img * 0.1

    return fn, [enhanced]


def _coarse_loss_case(rng):
    image = rng.uniform(0.2, 0.8, (2, 3, 6, 4))
    mask = rng.uniform(0.2, 0.8, (2, 1, 6, 4))
    target_image = Tensor(image + _away_from_zero(rng, image.shape, 0.05, 0.15), dtype=np.float64)
    target_mask = Tensor(mask + _away_from_zero(rng, mask.shape, 0.05, 0.15), dtype=np.float64)
    return (lambda i, m: losses.coarse_loss(i, m, target_image, target_mask)), [_leaf(image), _leaf(mask)]


GRAD_CASES = {
    'conv2d': lambda rng: _conv_case(rng, 1, 1),
    'conv2d_stride2': lambda rng: _conv_case(rng, 2, 1),
    'avg_pool2': lambda rng: (ops.avg_pool2, [_leaf(rng.standard_normal((2, 3, 6, 4)))]),
    'bilinear_resize_up': lambda rng: (lambda x: ops.bilinear_resize(x, 9, 7), [_leaf(rng.standard_normal(
        (1, 2, 4, 3)))]),
    'bilinear_resize_down': lambda rng: (lambda x: ops.bilinear_resize(x, 3, 2), [_leaf(rng.standard_normal(
        (1, 2, 8, 6)))]),
    'grid_sample': _grid_sample_case,
    'instance_norm': lambda rng: (ops.instance_norm, [_leaf(rng.standard_normal((2, 3, 5, 4)))]),
    'relu': lambda rng: (ops.relu, [_leaf(_away_from_zero(rng, (2, 3, 4, 4)))]),
    'sigmoid': lambda rng: (ops.sigmoid, [_leaf(rng.standard_normal((2, 3, 4, 4)))]),
    'concat': lambda rng: (ops.concat, [_leaf(rng.standard_normal((1, 2, 3, 3))),
                                        _leaf(rng.standard_normal((1, 3, 3, 3)))]),
    'coarse_loss': _coarse_loss_case,
    'warp_loss': _warp_loss_case,
    'reconstruction_loss': _reconstruction_case,
}


def run_grad_check(seeds=range(5), names=None, tolerance=TOLERANCE):
    """Checks every case (or those in ``names``) for every seed.

    Returns
    -------
    list of GradCheckResult
    """
    results = []
    for name in names or GRAD_CASES:
        if name not in GRAD_CASES:
            raise ValueError('{} is not a gradient check; choose from {}'.format(name, sorted(GRAD_CASES)))
        for seed in seeds:
            rng = np.random.default_rng(seed)
            with float64_mode():
                fn, inputs = GRAD_CASES[name](rng)
            result = GradCheckResult(name=name, seed=seed, error=gradient_error(fn, inputs, rng),
                                     tolerance=tolerance)
            results.append(result)
            log = logger.info if result.passed else logger.error
            log('{} (seed {}): relative error {:.3e}'.format(name, seed, result.error))
    return results
