"""Command-line entry point: ``rerender-pi <subcommand> [options]``.

Every subcommand reads an optional flat JSON ``--config``, applies its flag
overrides on top, echoes the effective settings to
``<out>/config.resolved.json`` and logs to ``<out>/rerender_pi.log``.
Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
"""
import argparse
import json
import logging
import os
import sys

from rerender_pi import __version__
from rerender_pi.evaluation import (DEFAULT_ALPHAS, bench_inference, evaluate_frames, heldout_keys, precision_gap,
                                    run_ablation, sweep_alpha, sweep_n_refs)
from rerender_pi.gradcheck import run_grad_check
from rerender_pi.inference import PRECISIONS, infer_frame_file, infer_sequence, load_model
from rerender_pi.dataset import load_manifest
from rerender_pi.params import MODES, RunSettings
from rerender_pi.synth_data import generate_dataset
from rerender_pi.training import configure_logging, finetune, train_coarse_stage, train_detail_stage

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad command line: unknown subcommand, missing or malformed option."""


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError('{}: {}'.format(self.prog, message))


def _int_list(text):
    try:
        return [int(item) for item in text.split(',') if item]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma-separated integers, got {}'.format(text))


def _float_list(text):
    try:
        return [float(item) for item in text.split(',') if item]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma-separated numbers, got {}'.format(text))


def _str_list(text):
    return [item for item in text.split(',') if item]


def build_parser():
    parser = _Parser(prog='rerender-pi', description='Two-branch neural re-rendering of desk-scale captures.')
    parser.add_argument('--version', action='version', version=__version__)
    common = _Parser(add_help=False)
    common.add_argument('--config', help='flat JSON settings file')
    common.add_argument('--seed', type=int, help='seed for every random choice of the run')
    common.add_argument('--out', default='.', help='output directory')
    sub = parser.add_subparsers(dest='command', metavar='subcommand')
    sub.required = True

    gen = sub.add_parser('gen-data', parents=[common], help='render a synthetic dataset')
    gen.add_argument('--subjects', type=int, dest='n_subjects')
    gen.add_argument('--heldout', type=int, dest='n_heldout')
    gen.add_argument('--frames', type=int, dest='frames_per_seq')
    gen.add_argument('--views', type=int, dest='n_views')
    gen.add_argument('--refs', type=int, dest='ref_poses', help='reference poses per subject')

    for name, text in (('train-coarse', 'train the coarse branch'), ('train-detail', 'train the detail branch')):
        stage = sub.add_parser(name, parents=[common], help=text)
        stage.add_argument('--data', required=True)
        stage.add_argument('--ckpt', help='checkpoint to start from or resume')
        stage.add_argument('--steps', type=int, dest='max_steps')
        stage.add_argument('--epochs', type=int)
        stage.add_argument('--mode', choices=MODES)

    tune = sub.add_parser('finetune', parents=[common], help='fine-tune a trained model on one subject')
    tune.add_argument('--data', required=True)
    tune.add_argument('--ckpt', required=True)
    tune.add_argument('--subject', required=True)
    tune.add_argument('--frames', type=int, dest='finetune_frames')
    tune.add_argument('--ref-frames', type=int, dest='finetune_ref_frames')
    tune.add_argument('--epochs', type=int, dest='finetune_epochs')

    infer = sub.add_parser('infer', parents=[common], help='re-render one frame or a sequence')
    infer.add_argument('--ckpt', required=True)
    target = infer.add_mutually_exclusive_group(required=True)
    target.add_argument('--frame', help='input PNG of a dataset frame')
    target.add_argument('--subject', help='re-render every frame of this subject')
    infer.add_argument('--data', help='dataset root, needed with --subject')
    infer.add_argument('--alpha', type=float)

    evaluate = sub.add_parser('eval', parents=[common], help='score a checkpoint on held-out frames')
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--ckpt', required=True)
    evaluate.add_argument('--subjects', type=_str_list)
    evaluate.add_argument('--views', type=_int_list)
    evaluate.add_argument('--alpha', type=float)

    ablate = sub.add_parser('ablate', parents=[common], help='compare the full model with its ablations')
    ablate.add_argument('--data', required=True)
    ablate.add_argument('--full', required=True, help='checkpoint of the full model')
    ablate.add_argument('--without-detail', required=True, help='checkpoint of the coarse_only model')
    ablate.add_argument('--without-coarse', required=True, help='checkpoint of the detail_only model')
    ablate.add_argument('--subjects', type=_str_list)
    ablate.add_argument('--views', type=_int_list)

    alpha = sub.add_parser('sweep-alpha', parents=[common], help='held-out quality against the blend ratio')
    alpha.add_argument('--data', required=True)
    alpha.add_argument('--ckpt', required=True)
    alpha.add_argument('--alphas', type=_float_list, default=list(DEFAULT_ALPHAS))
    alpha.add_argument('--subjects', type=_str_list)
    alpha.add_argument('--views', type=_int_list)
    alpha.add_argument('--refinetune', action='store_true', help='fine-tune again for every ratio')

    refs = sub.add_parser('sweep-refs', parents=[common], help='held-out quality against the reference count')
    refs.add_argument('--data', required=True)
    refs.add_argument('--ckpt', required=True)
    refs.add_argument('--counts', type=_int_list, default=[1, 2, 4, 8])
    refs.add_argument('--subjects', type=_str_list)
    refs.add_argument('--views', type=_int_list)

    bench = sub.add_parser('bench', parents=[common], help='time the inference stages')
    bench.add_argument('--ckpt', required=True)
    bench.add_argument('--precision', choices=PRECISIONS, default='f32')
    bench.add_argument('--iterations', type=int, default=50)
    bench.add_argument('--warmup', type=int, default=5)
    bench.add_argument('--resolution', type=_int_list, help='HEIGHT,WIDTH')
    bench.add_argument('--precision-gap', action='store_true', help='also report the f16 output difference')

    grad = sub.add_parser('grad-check', parents=[common], help='finite-difference check of every gradient')
    grad.add_argument('--seeds', type=int, default=5)
    return parser


SETTING_FLAGS = ('n_subjects', 'n_heldout', 'frames_per_seq', 'n_views', 'ref_poses', 'max_steps', 'epochs', 'mode',
                 'finetune_frames', 'finetune_ref_frames', 'finetune_epochs')


def resolve_settings(args):
    """Settings of a run: defaults, then the ``--config`` file, then flags.

    Returns
    -------
    RunSettings
    """
    settings = RunSettings()
    if args.config:
        settings.load_config(args.config)
    overrides = {key: getattr(args, key) for key in SETTING_FLAGS if getattr(args, key, None) is not None}
    if args.seed is not None:
        overrides.update(seed=args.seed, data_seed=args.seed, init_seed=args.seed)
    settings.set(**overrides)
    settings.validate()
    return settings


def _views(args):
    return getattr(args, 'views', None) or None


def _gen_data(args, settings):
    manifest = generate_dataset(args.out, settings.get('n_subjects'), settings.get('frames_per_seq'),
                                n_views=settings.get('n_views'), n_refs=settings.get('ref_poses'),
                                height=settings.get('height'), width=settings.get('width'),
                                degrade_cfg=settings.degrade_params, seed=settings.get('data_seed'),
                                n_heldout=settings.get('n_heldout'))
    logger.info('Wrote {} subjects to {}'.format(len(manifest.subjects()), args.out))


def _train_coarse(args, settings):
    train_coarse_stage(settings, args.data, args.out, resume=args.ckpt)


def _train_detail(args, settings):
    train_detail_stage(settings, args.data, args.out, coarse_ckpt=args.ckpt)


def _finetune(args, settings):
    finetune(settings, args.data, args.out, args.ckpt, args.subject)


def _infer(args, settings):
    model = load_model(args.ckpt)
    if args.frame:
        paths = infer_frame_file(model, args.frame, args.out, alpha=args.alpha)
    else:
        if not args.data:
            raise UsageError('infer --subject needs --data')
        paths = infer_sequence(model, args.data, args.subject, args.out, alpha=args.alpha)
    logger.info('Wrote {} images to {}'.format(len(paths), args.out))


def _eval(args, settings):
    manifest = load_manifest(args.data)
    subjects = args.subjects or [record.name for record in manifest.subjects('heldout')]
    model = load_model(args.ckpt)
    keys = []
    for subject_id in subjects:
        keys.extend(heldout_keys(manifest, subject_id, settings.get('finetune_frames'), settings.get('seed'),
                                 _views(args)))
    report = evaluate_frames(model, args.data, keys, name='eval', alpha=args.alpha)
    report.write_json(os.path.join(args.out, 'eval.json'))
    report.write_csv(os.path.join(args.out, 'eval.csv'))


def _ablate(args, settings):
    ckpts = {'full': args.full, 'without_detail': args.without_detail, 'without_coarse': args.without_coarse}
    run_ablation(args.data, ckpts, args.out, args.subjects, _views(args), settings.get('finetune_frames'),
                 settings.get('seed'))


def _sweep_alpha(args, settings):
    sweep_alpha(args.data, args.ckpt, args.out, args.alphas, args.subjects, _views(args),
                settings.get('finetune_frames'), settings.get('seed'), refinetune=args.refinetune, settings=settings)


def _sweep_refs(args, settings):
    sweep_n_refs(args.data, args.ckpt, args.out, args.counts, args.subjects, _views(args),
                 settings.get('finetune_frames'), settings.get('seed'))


def _bench(args, settings):
    if args.resolution is not None and len(args.resolution) != 2:
        raise UsageError('--resolution takes HEIGHT,WIDTH, got {}'.format(args.resolution))
    report = bench_inference(args.ckpt, args.resolution, args.precision, args.iterations, args.warmup,
                             settings.get('seed'))
    summary = report.as_dictionary()
    if args.precision_gap:
        summary['precision_gap'] = precision_gap(args.ckpt, seed=settings.get('seed'))
        logger.info('Largest f16 output difference: {:.2e}'.format(summary['precision_gap']))
    with open(os.path.join(args.out, 'bench.json'), 'w', encoding='utf-8') as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)


def _grad_check(args, settings):
    seed = settings.get('seed')
    results = run_grad_check(seeds=range(seed, seed + args.seeds))
    failed = [result for result in results if not result.passed]
    with open(os.path.join(args.out, 'grad_check.json'), 'w', encoding='utf-8') as handle:
        json.dump([{'name': result.name, 'seed': result.seed, 'error': result.error, 'passed': result.passed}
                   for result in results], handle, indent=2)
    if failed:
        raise RuntimeError('{} of {} gradient checks exceed a relative error of {}: {}'.format(
            len(failed), len(results), failed[0].tolerance, sorted({result.name for result in failed})))
    logger.info('All {} gradient checks passed'.format(len(results)))


COMMANDS = {
    'gen-data': _gen_data,
    'train-coarse': _train_coarse,
    'train-detail': _train_detail,
    'finetune': _finetune,
    'infer': _infer,
    'eval': _eval,
    'ablate': _ablate,
    'sweep-alpha': _sweep_alpha,
    'sweep-refs': _sweep_refs,
    'bench': _bench,
    'grad-check': _grad_check,
}


def main(argv=None):
    """Runs one subcommand.

    Parameters
    ----------
    argv : list of str, optional
        arguments after the program name, ``sys.argv[1:]`` by default.

    Returns
    -------
    int
        the exit code.
    """
    try:
        args = build_parser().parse_args(argv)
        settings = resolve_settings(args)
    except UsageError as error:
        print(error, file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as error:
        print('rerender-pi: {}'.format(error), file=sys.stderr)
        return 1

    configure_logging(args.out)
    settings.save_config(os.path.join(args.out, 'config.resolved.json'))
    logger.info('{} with settings {}'.format(args.command, settings.as_dictionary()))
    try:
        COMMANDS[args.command](args, settings)
    except UsageError as error:
        logger.error(str(error))
        return 1
    except Exception as error:
        logger.exception('{} failed: {}'.format(args.command, error))
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
