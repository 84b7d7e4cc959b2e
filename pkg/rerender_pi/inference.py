"""Re-rendering of single frames and sequences with a trained checkpoint."""
import logging
import os
from dataclasses import dataclass

import numpy as np

from rerender_pi.checkpoint import load_checkpoint
from rerender_pi.dataset import load_manifest, load_sequence_frame, read_frame, save_png
from rerender_pi.network import RerenderNet
from rerender_pi.params import RunSettings
from rerender_pi.reference_selection import load_reference_set, select_reference
from rerender_pi.tensor import Tensor, no_grad

PRECISIONS = ('f32', 'f16')
OUTPUT_SUFFIXES = ('coarse', 'detail', 'enhanced', 'mask')

logger = logging.getLogger(__name__)


def load_model(ckpt_path, mode=None, precision='f32', resolution=None):
    """Builds the network a checkpoint describes and loads its weights.

    Parameters
    ----------
    ckpt_path : str
    mode : str, optional
        overrides the checkpoint's model mode.
    precision : str, optional
        'f16' stores the weights at half precision; they are widened back to
        float32 for computation.
    resolution : tuple, optional
        (height, width) to run at instead of the trained resolution.

    Returns
    -------
    RerenderNet
    """
    if precision not in PRECISIONS:
        raise ValueError('{} is not a precision; choose one of {}'.format(precision, PRECISIONS))
    checkpoint = load_checkpoint(ckpt_path)
    settings = RunSettings()
    settings.set(**checkpoint.model)
    if mode is not None:
        settings.set(mode=mode)
    if resolution is not None:
        settings.set(height=resolution[0], width=resolution[1])
    model = RerenderNet(settings.model_params)
    checkpoint.restore(model)
    if precision == 'f16':
        cast_weights(model, np.float16)
    return model


def cast_weights(model, dtype):
    """Rounds every weight through ``dtype`` and back to its own type."""
    for parameter in model.parameters():
        parameter.data = parameter.data.astype(dtype).astype(parameter.dtype)


class ReferenceCache:
    """Feature pyramids of reference images, encoded once per model and
    reused for every later frame."""

    def __init__(self, model):
        self.model = model
        self._pyramids = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._pyramids)

    def pyramid(self, entry):
        key = entry.name if entry.name is not None else id(entry)
        if key in self._pyramids:
            self.hits += 1
            logger.info('Reference cache hit for {}'.format(key))
            return self._pyramids[key]
        self.misses += 1
        logger.info('Reference cache miss for {}: encoding'.format(key))
        with no_grad():
            pyramid = self.model.encode_reference(Tensor(entry.image[None]))
        self._pyramids[key] = pyramid
        return pyramid


@dataclass
class InferenceResult:
    """Outputs for one frame, each (C, H, W) float32. ``detail_image`` is the
    unbounded residual I_d; parts a mode does not produce are zero."""
    coarse_image: np.ndarray
    detail_image: np.ndarray
    enhanced: np.ndarray
    mask: np.ndarray
    reference_index: int = -1


def infer_pipeline(model, frame, refs, cache=None, alpha=None, timings=None):
    """Full forward pass for one frame.

    Selects the best reference, takes its feature pyramid from the cache,
    then runs the coarse branch, the warp, the blend and the decoder.

    Parameters
    ----------
    model : RerenderNet
    frame : ImageFrame
    refs : list of ReferenceEntry
        candidate references of the frame's subject.
    cache : ReferenceCache, optional
    alpha : float, optional
        blend ratio, the checkpoint's value by default.
    timings : dict, optional

    Returns
    -------
    InferenceResult

    Raises
    ------
    ValueError
        if there are no candidate references.
    """
    height, width = frame.size
    zeros3 = np.zeros((3, height, width), dtype=np.float32)
    zeros1 = np.zeros((1, height, width), dtype=np.float32)
    rendered_input = Tensor(frame.rendered_input[None])
    with no_grad():
        if model.mode == 'coarse_only':
            output = model(rendered_input, timings=timings)
            coarse = output.coarse
            return InferenceResult(coarse_image=coarse.coarse_image.data[0], detail_image=zeros3,
                                   enhanced=output.enhanced.data[0], mask=coarse.mask.data[0])
        if not refs:
            raise ValueError('No reference set for subject {}'.format(frame.subject_id))
        index = select_reference(frame, refs, model.params.get('lambda_miss'), model.params.get('match_weight'))
        entry = refs[index]
        cache = cache if cache is not None else ReferenceCache(model)
        pyramid = cache.pyramid(entry)
        output = model(rendered_input, frame.keypoints, Tensor(entry.image[None]), entry.keypoints,
                       reference_pyramid=pyramid, alpha=alpha, timings=timings)
    coarse = output.coarse
    return InferenceResult(coarse_image=coarse.coarse_image.data[0] if coarse else zeros3,
                           detail_image=output.detail_image.data[0], enhanced=output.enhanced.data[0],
                           mask=coarse.mask.data[0] if coarse else zeros1, reference_index=index)


def save_outputs(result, stem):
    """Writes ``<stem>_coarse.png``, ``<stem>_detail.png`` (the residual mapped
    through ``(I_d + 1) / 2``), ``<stem>_enhanced.png`` and ``<stem>_mask.png``.

    Returns
    -------
    list of str
    """
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    images = (result.coarse_image, np.clip((result.detail_image + 1.) / 2., 0., 1.), result.enhanced, result.mask)
    paths = []
    for suffix, image in zip(OUTPUT_SUFFIXES, images):
        paths.append('{}_{}.png'.format(stem, suffix))
        save_png(paths[-1], image)
    return paths


def dataset_root_of(stem):
    """``<root>`` of a ``<root>/<subject>/seq/<frame>_<view>`` stem."""
    return os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(stem))))


def infer_frame_file(model, frame_png, out_dir, alpha=None):
    """Re-renders one frame of a dataset given the path of its input PNG.

    Returns
    -------
    list of str
        the four images written.
    """
    stem = frame_png[:-len('.png')] if frame_png.endswith('.png') else frame_png
    frame = read_frame(stem)
    root = dataset_root_of(stem)
    refs = []
    if model.mode != 'coarse_only':
        refs = load_reference_set(root, load_manifest(root), frame.subject_id, model.params.get('n_refs'))
    result = infer_pipeline(model, frame, refs, alpha=alpha)
    return save_outputs(result, os.path.join(out_dir, os.path.basename(stem)))


def infer_sequence(model, data_dir, subject_id, out_dir, frames=None, views=None, alpha=None):
    """Re-renders frames of one subject, encoding each reference at most
    once.

    Returns
    -------
    list of str
        four images per frame.
    """
    manifest = load_manifest(data_dir)
    record = manifest[subject_id]
    frames = range(record.get('frames')) if frames is None else frames
    views = range(record.get('views')) if views is None else views
    refs = []
    if model.mode != 'coarse_only':
        refs = load_reference_set(data_dir, manifest, subject_id, model.params.get('n_refs'))
    cache = ReferenceCache(model)
    paths = []
    for frame_id in frames:
        for view in views:
            frame = load_sequence_frame(data_dir, subject_id, frame_id, view)
            result = infer_pipeline(model, frame, refs, cache, alpha)
            stem = os.path.join(out_dir, subject_id, '{:04d}_{}'.format(frame_id, view))
            paths.extend(save_outputs(result, stem))
    logger.info('Re-rendered {} frames of {}: {} reference cache hits, {} misses'.format(
        len(paths) // len(OUTPUT_SUFFIXES), subject_id, cache.hits, cache.misses))
    return paths
