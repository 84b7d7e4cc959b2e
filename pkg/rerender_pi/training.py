"""Staged training: the coarse stage, the detail stage with the coarse branch
frozen, and per-subject fine-tuning with the reference encoder frozen.
``PipelineRun`` drives the stages in order and keeps its progress in
``state.json``.
"""
import csv
import hashlib
import json
import logging
import math
import os
import shutil

import numpy as np

from rerender_pi import losses
from rerender_pi.checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from rerender_pi.coarse_branch import coarse_forward
from rerender_pi.dataset import frames_to_batch, load_manifest, load_sequence_frame
from rerender_pi.directory_helper import DirectoryHelper
from rerender_pi.network import RerenderNet
from rerender_pi.optim import Adam, clip_grad_norm
from rerender_pi.params import STAGES
from rerender_pi.reference_selection import load_reference_set, select_reference
from rerender_pi.stage_configs import make_stage_config
from rerender_pi.synth_data import augment
from rerender_pi.tensor import NonFiniteError, Tensor, backward

LOG_FORMAT = '%(asctime)s:%(name)s:%(levelname)s - %(message)s'
METRIC_COLUMNS = ['step', 'stage', 'epoch', 'loss_total', 'l_c', 'r_vgg', 'r_img', 'w_img', 'w_reg', 'lambda_c_img',
                  'lambda_r_img', 'lambda_reg']
# taken from a checkpoint over the run settings
CHECKPOINT_KEYS = ('height', 'width', 'base_channels', 'spade_hidden', 'heatmap_sigma', 'background_weight',
                   'extractor_seed', 'mode')

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised by the watchdog when a loss or a warp field stops being
    finite."""


def configure_logging(out_dir):
    """Sets up the package logger: DEBUG to ``<out_dir>/rerender_pi.log`` and
    INFO to the console.

    Returns
    -------
    logging.Logger
    """
    package_logger = logging.getLogger('rerender_pi')
    package_logger.setLevel(logging.DEBUG)
    os.makedirs(out_dir, exist_ok=True)
    filename = os.path.abspath(os.path.join(out_dir, 'rerender_pi.log'))
    formatter = logging.Formatter(LOG_FORMAT)
    for handler in list(package_logger.handlers):
        if isinstance(handler, logging.FileHandler) and handler.baseFilename != filename:
            package_logger.removeHandler(handler)
            handler.close()
    if not any(isinstance(handler, logging.FileHandler) for handler in package_logger.handlers):
        # create file handler which logs even debug messages
        fh = logging.FileHandler(filename)
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(formatter)
        package_logger.addHandler(fh)
    if not any(type(handler) is logging.StreamHandler for handler in package_logger.handlers):
        ch = logging.StreamHandler()
        ch.setLevel(logging.INFO)
        ch.setFormatter(formatter)
        package_logger.addHandler(ch)
    return package_logger


def parameter_hash(parameters):
    """SHA-256 over the names and raw bytes of ``parameters``."""
    digest = hashlib.sha256()
    for parameter in sorted(parameters, key=lambda p: p.name):
        digest.update(parameter.name.encode('utf-8'))
        digest.update(np.ascontiguousarray(parameter.data).tobytes())
    return digest.hexdigest()


class MetricsLog:
    """Per-step loss records of one stage as CSV.

    Steps start at 1 and must follow each other without gaps. When resuming
    from ``resume_step`` the rows after it are dropped.
    """

    def __init__(self, path, resume_step=0):
        self.path = path
        rows = []
        if resume_step > 0 and os.path.exists(path):
            with open(path, 'r', newline='', encoding='utf-8') as handle:
                rows = [row for row in csv.DictReader(handle) if int(row['step']) <= resume_step]
        self.last_step = resume_step
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)

    def append(self, row):
        if row['step'] != self.last_step + 1:
            raise ValueError('Metrics step {} does not follow step {}'.format(row['step'], self.last_step))
        with open(self.path, 'a', newline='', encoding='utf-8') as handle:
            csv.DictWriter(handle, fieldnames=METRIC_COLUMNS, restval='').writerow(row)
        self.last_step = row['step']

    def read(self):
        with open(self.path, 'r', newline='', encoding='utf-8') as handle:
            return list(csv.DictReader(handle))


class TrainingSet:
    """Frames held in memory, each with the reference selected for it from
    its subject's candidate set.

    Parameters
    ----------
    root : str
        dataset root
    manifest : DatasetManifest
    keys : list of tuple
        (subject, frame, view)
    n_refs : int, optional
        candidate references per subject; no references are loaded when None.
    """

    def __init__(self, root, manifest, keys, n_refs=None, lambda_miss=0.2, match_weight=0.5):
        if not keys:
            raise ValueError('A training set needs at least one frame')
        self.keys = list(keys)
        self.frames = [load_sequence_frame(root, *key) for key in self.keys]
        self.references = {}
        self.choices = []
        if n_refs is not None:
            for (subject_id, _, _), frame in zip(self.keys, self.frames):
                if subject_id not in self.references:
                    self.references[subject_id] = load_reference_set(root, manifest, subject_id, n_refs)
                self.choices.append(select_reference(frame, self.references[subject_id], lambda_miss, match_weight))

    def __len__(self):
        return len(self.frames)

    def reference(self, index):
        return self.references[self.keys[index][0]][self.choices[index]]


def adopt_checkpoint_settings(settings, checkpoint):
    """Overrides the architecture settings with those a checkpoint was
    trained with, warning about every change."""
    for key in CHECKPOINT_KEYS:
        if key in checkpoint.model and settings.get(key) != checkpoint.model[key]:
            logger.warning('{} is {} in the checkpoint and {} in the settings: using the checkpoint value'.format(
                key, checkpoint.model[key], settings.get(key)))
            settings.set(**{key: checkpoint.model[key]})


class Trainer:
    """Owns the model, the frozen perceptual extractor and the loss
    configuration of a run.

    Parameters
    ----------
    settings : RunSettings
    data_dir : str
        dataset root holding ``manifest.json``
    out_dir : str
        run directory
    checkpoint : ModelCheckpoint, optional
        weights to start from; its architecture settings win over
        ``settings``.
    """

    def __init__(self, settings, data_dir, out_dir, checkpoint=None):
        if checkpoint is not None:
            adopt_checkpoint_settings(settings, checkpoint)
        settings.validate()
        self.settings = settings
        self.data_dir = data_dir
        self.out_dir = out_dir
        self.manifest = load_manifest(data_dir)
        info = self.manifest.info
        if (info.get('height'), info.get('width')) != (settings.get('height'), settings.get('width')):
            raise ValueError('The dataset is {}x{} but the model works at {}x{}'.format(
                info.get('height'), info.get('width'), settings.get('height'), settings.get('width')))
        self.model = RerenderNet(settings.model_params)
        if checkpoint is not None:
            checkpoint.restore(self.model)
        self.checkpoint = checkpoint
        self.extractor = losses.PerceptualExtractor(settings.get('extractor_seed'))
        self.schedule = losses.WarpSchedule()
        self.weights = losses.LossWeights()

    def training_set(self, keys, with_references=True, n_refs=None):
        if not with_references:
            return TrainingSet(self.data_dir, self.manifest, keys)
        return TrainingSet(self.data_dir, self.manifest, keys, n_refs or self.settings.get('n_refs'),
                           self.settings.get('lambda_miss'), self.settings.get('match_weight'))

    def _reference_batch(self, entries):
        return Tensor(np.stack([entry.image for entry in entries])), [entry.keypoints for entry in entries]

    def _detail_loss(self, batch, references, warp_epoch):
        reference_image, reference_keypoints = self._reference_batch(references)
        output = self.model(batch['rendered_input'], batch['keypoints'], reference_image, reference_keypoints)
        r_vgg, r_img = losses.reconstruction_loss(output.enhanced, batch['gt_image'], self.extractor)
        warp = losses.warp_loss_parts(reference_image, batch['gt_image'], output.warp, self.schedule, warp_epoch)
        l_d = losses.total_detail_loss(r_vgg, r_img, warp.image, warp.reg, warp.lambda_reg, self.weights)
        parts = {
            'r_vgg': r_vgg.item(),
            'r_img': r_img.item(),
            'w_img': warp.image.item(),
            'w_reg': warp.reg.item(),
            'lambda_c_img': warp.lambda_c_img,
            'lambda_r_img': warp.lambda_r_img,
            'lambda_reg': warp.lambda_reg
        }
        return l_d, parts, output

    def stage_loss(self, stage, batch, references, warp_epoch):
        """Loss of one batch.

        Returns
        -------
        loss : Tensor
        parts : dict
            float value of every loss part, keyed like the metrics columns.
        warp : WarpField or None
        """
        mode = self.model.mode
        if stage == 'coarse' or (stage == 'finetune' and mode == 'coarse_only'):
            coarse = coarse_forward(self.model.coarse, batch['rendered_input'])
            loss = losses.coarse_loss(coarse.coarse_image, coarse.mask, batch['gt_image'], batch['gt_mask'])
            return loss, {'l_c': loss.item()}, None
        loss, parts, output = self._detail_loss(batch, references, warp_epoch)
        if stage == 'finetune' and mode == 'full':
            l_c = losses.coarse_loss(output.coarse.coarse_image, output.coarse.mask, batch['gt_image'],
                                     batch['gt_mask'])
            parts['l_c'] = l_c.item()
            loss = losses.finetune_loss(l_c, loss, self.weights)
        return loss, parts, output.warp

    def _watchdog(self, loss, parts, warp, step, epoch):
        if not np.isfinite(loss.item()) or (warp is not None and not warp.is_finite()):
            raise TrainingDivergedError('Training diverged at step {} (epoch {}): loss {}, parts {}'.format(
                step, epoch, loss.item(), parts))

    def run_stage(self, stage, training_set, epochs, max_steps=0, subject=None):
        """Trains one stage.

        An epoch is one pass over ``training_set`` in an order drawn from
        ``(seed, stage, epoch)``; with ``max_steps`` set the stage runs for
        exactly that many steps instead. A checkpoint of the same stage passed
        to the trainer resumes at its step.

        Returns
        -------
        ModelCheckpoint

        Raises
        ------
        TrainingDivergedError
            on a non-finite loss or warp field.
        RuntimeError
            if a frozen parameter changed.
        """
        config = make_stage_config(stage, self.settings)
        plan = config.build_stage(self.model)
        options = plan.settings
        stage_index = STAGES.index(stage)
        param_dict = {'stage': stage}
        if subject is not None:
            param_dict['subject'] = subject
        helper = DirectoryHelper(self.out_dir, param_dict)
        helper.build_working_dir()

        optimizer = Adam(plan.trainable, lr=options['lr'], weight_decay=options['weight_decay'])
        rng = np.random.default_rng([options['seed'], stage_index])
        start_step = 0
        if self.checkpoint is not None and self.checkpoint.stage == stage:
            self.checkpoint.restore(self.model, optimizer, rng)
            start_step = self.checkpoint.step
            logger.info('Resuming the {} stage at step {}'.format(stage, start_step))
        elif os.path.exists(helper.checkpoint_path()):
            logger.warning('There is a checkpoint in {}, but the {} stage starts over: it will be backed up'.format(
                helper.working_dir(), stage))
            shutil.move(helper.checkpoint_path(), '{}.bak'.format(helper.checkpoint_path()))

        frozen_hash = parameter_hash(plan.frozen)
        logger.info('Starting the {} stage: {} trainable and {} frozen parameters, frozen hash {}'.format(
            stage, len(plan.trainable), len(plan.frozen), frozen_hash))

        metrics = MetricsLog(helper.metrics_path(), start_step)
        batch_size = options['batch_size']
        steps_per_epoch = math.ceil(len(training_set) / batch_size)
        total_steps = max_steps if max_steps > 0 else epochs * steps_per_epoch
        step = start_step
        epoch = start_step // steps_per_epoch
        while step < total_steps:
            epoch, position = divmod(step, steps_per_epoch)
            warp_epoch = self.schedule.curriculum_end if stage == 'finetune' else epoch
            if position == 0 or step == start_step:
                if stage != 'coarse':
                    lambda_c, lambda_r, lambda_reg = self.schedule.weights(warp_epoch)
                    logger.info('Epoch {}: lambda_c_img = {}, lambda_r_img = {}, lambda_reg = {}'.format(
                        epoch, lambda_c, lambda_r, lambda_reg))
                order = np.random.default_rng([options['seed'], stage_index, epoch]).permutation(len(training_set))
            indices = order[position * batch_size:(position + 1) * batch_size]

            frames = [training_set.frames[index] for index in indices]
            seeds = rng.integers(0, 2**32, size=len(frames))
            if options['augment']:
                frames = [augment(frame, int(seed)) for frame, seed in zip(frames, seeds)]
            references = [training_set.reference(index) for index in indices] if training_set.references else []
            batch = frames_to_batch(frames)

            optimizer.zero_grad()
            try:
                loss, parts, warp = self.stage_loss(stage, batch, references, warp_epoch)
            except NonFiniteError as err:
                raise TrainingDivergedError('Training diverged at step {} (epoch {}): {}'.format(
                    step + 1, epoch, err))
            self._watchdog(loss, parts, warp, step + 1, epoch)
            backward(loss)
            clip_grad_norm(plan.trainable, options['clip_norm'])
            optimizer.step()

            step += 1
            metrics.append(dict(parts, step=step, stage=stage, epoch=epoch, loss_total=loss.item()))
            logger.debug('{} step {}: {}'.format(stage, step, loss.item()))
            if options['checkpoint_every'] and step % options['checkpoint_every'] == 0:
                save_checkpoint(ModelCheckpoint.capture(self.model, self.settings, stage, epoch, step, optimizer, rng),
                                helper.checkpoint_path())

        final_hash = parameter_hash(plan.frozen)
        logger.info('Finished the {} stage after {} steps, frozen hash {}'.format(stage, step, final_hash))
        if final_hash != frozen_hash:
            raise RuntimeError('Frozen parameters changed during the {} stage'.format(stage))
        checkpoint = ModelCheckpoint.capture(self.model, self.settings, stage, epoch, step, optimizer, rng)
        save_checkpoint(checkpoint, helper.checkpoint_path())
        self.checkpoint = checkpoint
        return checkpoint


def _load(path):
    return load_checkpoint(path) if path is not None else None


def train_coarse_stage(settings, data_dir, out_dir, resume=None):
    """Trains the coarse branch on the training split against L_c.

    Parameters
    ----------
    resume : str, optional
        a coarse checkpoint to continue from.

    Returns
    -------
    ModelCheckpoint
    """
    trainer = Trainer(settings, data_dir, out_dir, _load(resume))
    training_set = trainer.training_set(trainer.manifest.frame_keys('train'), with_references=False)
    return trainer.run_stage('coarse', training_set, settings.get('epochs'), settings.get('max_steps'))


def train_detail_stage(settings, data_dir, out_dir, coarse_ckpt=None):
    """Trains the detail branch against L_d with the warp curriculum while the
    coarse branch stays fixed.

    Parameters
    ----------
    coarse_ckpt : str, optional
        coarse checkpoint to start from, or a detail checkpoint to resume;
        only a ``detail_only`` model may start without one.

    Returns
    -------
    ModelCheckpoint
    """
    checkpoint = _load(coarse_ckpt)
    if checkpoint is None and settings.get('mode') != 'detail_only':
        raise ValueError('The detail stage of a {} model needs a coarse checkpoint'.format(settings.get('mode')))
    trainer = Trainer(settings, data_dir, out_dir, checkpoint)
    training_set = trainer.training_set(trainer.manifest.frame_keys('train'))
    return trainer.run_stage('detail', training_set, settings.get('epochs'), settings.get('max_steps'))


def finetune_split(n_frames, n_select, seed):
    """Frames used for fine-tuning and the remaining frames kept for
    evaluation, both sorted.

    Raises
    ------
    ValueError
        if there are fewer than ``n_select`` frames.
    """
    if n_frames < n_select:
        raise ValueError('Fine-tuning needs {} frames, the subject has {}'.format(n_select, n_frames))
    chosen = np.sort(np.random.default_rng([seed, n_frames]).choice(n_frames, n_select, replace=False))
    rest = np.setdiff1d(np.arange(n_frames), chosen)
    return [int(frame) for frame in chosen], [int(frame) for frame in rest]


def finetune(settings, data_dir, out_dir, full_ckpt, subject_id):
    """Adapts a trained model to one novel subject with the late-phase warp
    loss and ``L_f = 0.5 L_c + 1.0 L_d``; the reference encoder is frozen.

    Uses ``finetune_frames`` randomly chosen frames (all views) and the first
    ``finetune_ref_frames`` reference poses (all views) as candidates.

    Returns
    -------
    ModelCheckpoint

    Raises
    ------
    ValueError
        if the subject has too few frames or reference poses.
    """
    trainer = Trainer(settings, data_dir, out_dir, _load(full_ckpt))
    record = trainer.manifest[subject_id]
    frames, _ = finetune_split(record.get('frames'), settings.get('finetune_frames'), settings.get('seed'))
    if record.get('ref_poses') < settings.get('finetune_ref_frames'):
        raise ValueError('Fine-tuning needs {} reference poses, {} has {}'.format(
            settings.get('finetune_ref_frames'), subject_id, record.get('ref_poses')))
    keys = [(subject_id, frame, view) for frame in frames for view in range(record.get('views'))]
    n_refs = settings.get('finetune_ref_frames') * record.get('views')
    training_set = trainer.training_set(keys, with_references=settings.get('mode') != 'coarse_only', n_refs=n_refs)
    logger.info('Fine-tuning on {} frames of {} with {} candidate references'.format(len(frames), subject_id, n_refs))
    return trainer.run_stage('finetune', training_set, settings.get('finetune_epochs'), subject=subject_id)


class PipelineRun:
    """Runs coarse, detail and fine-tuning stages in order, one phase per
    call, and keeps the current phase and the checkpoint paths in
    ``state.json`` so an interrupted run picks up where it stopped.

    Parameters
    ----------
    settings : RunSettings
    data_dir : str
    out_dir : str
    finetune_subjects : list of str, optional
        subjects to fine-tune on, the held-out split by default.
    """

    PHASES = STAGES + ('done', )

    def __init__(self, settings, data_dir, out_dir, finetune_subjects=None):
        self.settings = settings
        self.data_dir = data_dir
        self.out_dir = out_dir
        self._logger = configure_logging(out_dir)
        self.state_json = DirectoryHelper(out_dir, {'stage': STAGES[0]}).state_path()
        # If we're in the middle of a run, continue from the saved state.
        if os.path.exists(self.state_json):
            with open(self.state_json, 'r', encoding='utf-8') as handle:
                self.state = json.load(handle)
        else:
            self.state = {'phase': STAGES[0], 'checkpoints': {}, 'finetune_subjects': finetune_subjects}
            self._save_state()
        self._logger.info('Initialized the run configuration: {}'.format(settings.as_dictionary()))

    @property
    def phase(self):
        return self.state['phase']

    def _save_state(self):
        with open(self.state_json, 'w', encoding='utf-8') as handle:
            json.dump(self.state, handle, indent=2, sort_keys=True)

    def _stage_checkpoint(self, stage, subject=None):
        param_dict = {'stage': stage}
        if subject is not None:
            param_dict['subject'] = subject
        return DirectoryHelper(self.out_dir, param_dict).checkpoint_path()

    def _partial(self, stage, subject=None):
        """Checkpoint an interrupted stage left behind, if any."""
        path = self._stage_checkpoint(stage, subject)
        if os.path.exists(path):
            self._logger.info('Resuming from {}'.format(path))
            return path
        return None

    def run(self, set_next_phase=True):
        """Runs the current phase.

        Parameters
        ----------
        set_next_phase : bool, optional
            advance to the next phase afterwards, by default True.
        """
        phase = self.phase
        mode = self.settings.get('mode')
        checkpoints = self.state['checkpoints']
        if phase == 'coarse':
            if mode == 'detail_only':
                self._logger.info('A detail_only model has no coarse stage: skipping')
            else:
                train_coarse_stage(self.settings, self.data_dir, self.out_dir, self._partial('coarse'))
                checkpoints['coarse'] = self._stage_checkpoint('coarse')
        elif phase == 'detail':
            if mode == 'coarse_only':
                self._logger.info('A coarse_only model has no detail stage: skipping')
            else:
                start = self._partial('detail') or checkpoints.get('coarse')
                train_detail_stage(self.settings, self.data_dir, self.out_dir, start)
                checkpoints['detail'] = self._stage_checkpoint('detail')
        elif phase == 'finetune':
            source = checkpoints.get('detail', checkpoints.get('coarse'))
            subjects = self.state['finetune_subjects']
            if subjects is None:
                subjects = [record.name for record in load_manifest(self.data_dir).subjects('heldout')]
            for subject_id in subjects:
                key = 'finetune/{}'.format(subject_id)
                if key in checkpoints:
                    self._logger.info('{} is already fine-tuned: skipping'.format(subject_id))
                    continue
                finetune(self.settings, self.data_dir, self.out_dir, self._partial('finetune', subject_id) or source,
                         subject_id)
                checkpoints[key] = self._stage_checkpoint('finetune', subject_id)
                self._save_state()
        else:
            self._logger.info('The run is complete: checkpoints {}'.format(checkpoints))
            return

        if set_next_phase:
            self.state['phase'] = self.PHASES[self.PHASES.index(phase) + 1]
        self._save_state()
