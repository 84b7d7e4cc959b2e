"""Held-out evaluation, the ablation table, the blend-ratio and
reference-count sweeps, and the inference benchmark."""
import copy
import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rerender_pi.dataset import ImageFrame, load_manifest, load_sequence_frame, save_png
from rerender_pi.inference import ReferenceCache, infer_pipeline, load_model
from rerender_pi.metrics import MetricReport
from rerender_pi.network import BENCH_STAGES
from rerender_pi.params import thread_count
from rerender_pi.reference_selection import ReferenceEntry, load_reference_set
from rerender_pi.synth_data import SubjectSpec, T_POSE, degrade, reference_pose, render_figure
from rerender_pi.tensor import Tensor, no_grad
from rerender_pi.training import finetune, finetune_split

DEFAULT_ALPHAS = (0., 0.05, 0.1, 0.15, 0.5, 1.)
# name in reports -> model mode
ABLATION_CONFIGS = {'without_detail': 'coarse_only', 'without_coarse': 'detail_only', 'full': 'full'}

logger = logging.getLogger(__name__)


def _write_rows(filename, rows, columns):
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filename, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def heldout_keys(manifest, subject_id, finetune_frames=5, seed=0, views=None):
    """(subject, frame, view) keys of a subject minus the frames fine-tuning
    uses."""
    record = manifest[subject_id]
    _, frames = finetune_split(record.get('frames'), finetune_frames, seed)
    views = range(record.get('views')) if views is None else views
    return [(subject_id, frame, view) for frame in frames for view in views]


def evaluate_frames(model, data_dir, keys, name='model', alpha=None, n_refs=None):
    """Re-renders every frame in ``keys`` and scores I_e against the ground
    truth; metrics are computed in a thread pool, in key order.

    Returns
    -------
    MetricReport
    """
    manifest = load_manifest(data_dir)
    n_refs = model.params.get('n_refs') if n_refs is None else n_refs
    cache = ReferenceCache(model)
    references = {}
    outputs = []
    for subject_id, frame_id, view in keys:
        if model.mode != 'coarse_only' and subject_id not in references:
            references[subject_id] = load_reference_set(data_dir, manifest, subject_id, n_refs)
        frame = load_sequence_frame(data_dir, subject_id, frame_id, view)
        result = infer_pipeline(model, frame, references.get(subject_id, []), cache, alpha)
        outputs.append(('{}/{:04d}_{}'.format(subject_id, frame_id, view), result.enhanced, frame.gt_image))

    report = MetricReport(name)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        scored = list(pool.map(lambda item: MetricReport(name).add(*item), outputs))
    report.frames.extend(scored)
    logger.info('Evaluated {} on {} frames: {}'.format(name, report.count, report.aggregate()))
    return report


def _checkpoint_for(ckpts, subject_id):
    return ckpts[subject_id] if isinstance(ckpts, dict) else ckpts


def _grid_row(frame, images):
    return np.concatenate([frame.rendered_input] + list(images) + [frame.gt_image], axis=2)


def run_ablation(data_dir, ckpts, out_dir, subjects=None, views=None, finetune_frames=5, seed=0):
    """Scores the full model against its two ablations on held-out subjects.

    Parameters
    ----------
    data_dir : str
    ckpts : dict
        configuration name (see ``ABLATION_CONFIGS``) -> checkpoint path, or
        -> {subject: checkpoint path} for per-subject fine-tuned models.
    out_dir : str
        receives ``ablation.csv``, ``ablation.json`` and ``ablation_grid.png``.
    subjects : list of str, optional
        the held-out split by default.

    Returns
    -------
    list of dict
        one row per configuration and subject.

    Raises
    ------
    KeyError
        if a configuration has no checkpoint.
    """
    missing = [config for config in ABLATION_CONFIGS if config not in ckpts]
    if missing:
        raise KeyError('Must define {}'.format(missing))
    manifest = load_manifest(data_dir)
    subjects = subjects or [record.name for record in manifest.subjects('heldout')]
    rows, reports, grid = [], {}, []
    for subject_id in subjects:
        keys = heldout_keys(manifest, subject_id, finetune_frames, seed, views)
        sample = load_sequence_frame(data_dir, *keys[0])
        images = []
        for config, mode in ABLATION_CONFIGS.items():
            model = load_model(_checkpoint_for(ckpts[config], subject_id), mode=mode)
            report = evaluate_frames(model, data_dir, keys, name='{}/{}'.format(config, subject_id))
            reports[report.name] = report.as_dictionary()
            rows.append(dict(report.aggregate(), config=config, subject=subject_id, count=report.count))
            refs = [] if mode == 'coarse_only' else load_reference_set(data_dir, manifest, subject_id,
                                                                        model.params.get('n_refs'))
            images.append(infer_pipeline(model, sample, refs).enhanced)
        grid.append(_grid_row(sample, images))

    os.makedirs(out_dir, exist_ok=True)
    _write_rows(os.path.join(out_dir, 'ablation.csv'), rows, ['config', 'subject', 'count', 'psnr', 'ssim', 'mse'])
    with open(os.path.join(out_dir, 'ablation.json'), 'w', encoding='utf-8') as handle:
        json.dump(reports, handle, indent=1, sort_keys=True)
    save_png(os.path.join(out_dir, 'ablation_grid.png'), np.concatenate(grid, axis=1))
    return rows


def plot_alpha_sweep(rows, filename):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ax.plot([row['alpha'] for row in rows], [row['psnr'] for row in rows], marker='o')
    ax.set_xlabel('alpha')
    ax.set_ylabel('PSNR (dB)')
    ax.grid(alpha=0.3)
    fig.savefig(filename, dpi=150)
    plt.close(fig)


def sweep_alpha(data_dir, ckpts, out_dir, alphas=DEFAULT_ALPHAS, subjects=None, views=None, finetune_frames=5, seed=0,
                refinetune=False, settings=None):
    """Held-out quality as a function of the blend ratio.

    By default the blend ratio only changes at inference; with
    ``refinetune`` every ratio first gets its own fine-tune from ``ckpts``
    (which then must be one checkpoint) using ``settings``.

    Returns
    -------
    list of dict
        (alpha, mse, psnr, ssim) rows, also written to ``sweep_alpha.csv``
        and plotted to ``sweep_alpha.png``.

    Raises
    ------
    ValueError
        for an empty list of ratios.
    """
    if len(alphas) == 0:
        raise ValueError('sweep_alpha needs at least one alpha')
    if refinetune and (settings is None or isinstance(ckpts, dict)):
        raise ValueError('Re-fine-tuning per alpha needs the run settings and a single checkpoint')
    manifest = load_manifest(data_dir)
    subjects = subjects or [record.name for record in manifest.subjects('heldout')]
    rows = []
    for alpha in alphas:
        report = MetricReport('alpha={}'.format(alpha))
        for subject_id in subjects:
            keys = heldout_keys(manifest, subject_id, finetune_frames, seed, views)
            if refinetune:
                alpha_settings = copy.deepcopy(settings)
                alpha_settings.set(alpha=float(alpha))
                alpha_dir = os.path.join(out_dir, 'alpha_{}'.format(alpha))
                finetune(alpha_settings, data_dir, alpha_dir, ckpts, subject_id)
                model = load_model(os.path.join(alpha_dir, 'finetune', subject_id, 'model.ckpt'))
            else:
                model = load_model(_checkpoint_for(ckpts, subject_id))
            report.frames.extend(evaluate_frames(model, data_dir, keys, report.name, alpha=float(alpha)).frames)
        rows.append(dict(report.aggregate(), alpha=float(alpha)))
        logger.info('alpha {}: {}'.format(alpha, rows[-1]))
    os.makedirs(out_dir, exist_ok=True)
    _write_rows(os.path.join(out_dir, 'sweep_alpha.csv'), rows, ['alpha', 'mse', 'psnr', 'ssim'])
    plot_alpha_sweep(rows, os.path.join(out_dir, 'sweep_alpha.png'))
    return rows


def sweep_n_refs(data_dir, ckpts, out_dir, counts=(1, 2, 4, 8), subjects=None, views=None, finetune_frames=5,
                 seed=0):
    """Held-out quality as the candidate reference set grows; the first
    ``n`` references of each subject are candidates.

    Returns
    -------
    list of dict
        (n_refs, mse, psnr, ssim) rows, also written to ``sweep_n_refs.csv``.
    """
    if len(counts) == 0:
        raise ValueError('sweep_n_refs needs at least one reference count')
    manifest = load_manifest(data_dir)
    subjects = subjects or [record.name for record in manifest.subjects('heldout')]
    rows = []
    for count in counts:
        report = MetricReport('n_refs={}'.format(count))
        for subject_id in subjects:
            keys = heldout_keys(manifest, subject_id, finetune_frames, seed, views)
            model = load_model(_checkpoint_for(ckpts, subject_id))
            report.frames.extend(evaluate_frames(model, data_dir, keys, report.name, n_refs=int(count)).frames)
        rows.append(dict(report.aggregate(), n_refs=int(count)))
    _write_rows(os.path.join(out_dir, 'sweep_n_refs.csv'), rows, ['n_refs', 'mse', 'psnr', 'ssim'])
    return rows


@dataclass
class BenchReport:
    """Mean wall time per stage in milliseconds.

    ``online_total_ms`` leaves out reference encoding, which runs once per
    person; ``fps`` follows from it.
    """
    precision: str
    height: int
    width: int
    iterations: int
    stage_ms: dict = field(default_factory=dict)

    @property
    def total_ms(self):
        return float(sum(self.stage_ms[stage] for stage in BENCH_STAGES))

    @property
    def online_total_ms(self):
        return self.total_ms - self.stage_ms['reference_encoding']

    @property
    def fps(self):
        return 1000. / self.online_total_ms if self.online_total_ms > 0 else float('inf')

    def as_dictionary(self):
        return {
            'precision': self.precision,
            'height': self.height,
            'width': self.width,
            'iterations': self.iterations,
            'stage_ms': dict(self.stage_ms),
            'total_ms': self.total_ms,
            'online_total_ms': self.online_total_ms,
            'fps': self.fps
        }

    def write_json(self, filename):
        directory = os.path.dirname(filename)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filename, 'w', encoding='utf-8') as handle:
            json.dump(self.as_dictionary(), handle, indent=1, sort_keys=True)


def synthetic_pair(height, width, seed=0, view=0):
    """A degraded input frame and a clean reference of one procedural
    subject, for timing and precision checks."""
    subject = SubjectSpec.from_seed(seed)
    gt_image, gt_mask, keypoints = render_figure(subject, T_POSE, view, height, width)
    frame = ImageFrame(gt_image=gt_image, gt_mask=gt_mask, rendered_input=degrade(gt_image, gt_mask, seed=seed),
                       keypoints=keypoints, view_id=view, subject_id='bench')
    reference_image, _, reference_keypoints = render_figure(subject, reference_pose(1), view, height, width)
    return frame, ReferenceEntry(reference_image, reference_keypoints, name='bench/ref')


def bench_inference(ckpt, resolution=None, precision='f32', iterations=50, warmup=5, seed=0):
    """Times the coarse branch, reference encoding, warping and detail
    decoding separately.

    Every timed iteration encodes the reference again so that its cost is
    measured; the online total leaves it out.

    Raises
    ------
    ValueError
        for fewer than 10 timed iterations.
    """
    if iterations < 10:
        raise ValueError('bench_inference needs at least 10 iterations, got {}'.format(iterations))
    model = load_model(ckpt, mode='full', precision=precision, resolution=resolution)
    height, width = model.params.get('height'), model.params.get('width')
    frame, reference = synthetic_pair(height, width, seed)
    totals = {stage: 0. for stage in BENCH_STAGES}
    rendered_input = Tensor(frame.rendered_input[None])
    reference_image = Tensor(reference.image[None])
    for iteration in range(warmup + iterations):
        timings = {}
        with no_grad():
            model(rendered_input, frame.keypoints, reference_image, reference.keypoints, timings=timings)
        if iteration >= warmup:
            for stage in BENCH_STAGES:
                totals[stage] += timings[stage]
    report = BenchReport(precision=precision, height=height, width=width, iterations=iterations,
                         stage_ms={stage: 1000. * totals[stage] / iterations for stage in BENCH_STAGES})
    logger.info('Benchmark ({}, {}x{}): {} ms per stage, {:.2f} ms online, {:.1f} fps'.format(
        precision, height, width, report.stage_ms, report.online_total_ms, report.fps))
    return report


def precision_gap(ckpt, frames=10, seed=0):
    """Largest absolute pixel difference of I_e between float32 weights and
    weights stored at half precision, over ``frames`` synthetic views."""
    full = load_model(ckpt, mode='full')
    half = load_model(ckpt, mode='full', precision='f16')
    height, width = full.params.get('height'), full.params.get('width')
    gap = 0.
    for index in range(frames):
        frame, reference = synthetic_pair(height, width, seed + index, view=index % 8)
        gap = max(gap, float(np.max(np.abs(infer_pipeline(full, frame, [reference]).enhanced -
                                           infer_pipeline(half, frame, [reference]).enhanced))))
    return gap
