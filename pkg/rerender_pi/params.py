"""Parameter groups for a re-rendering run and the flat settings layer that
routes keys to them.
"""
import json
import os

from rerender_pi.metadata import MetaData

STAGES = ('coarse', 'detail', 'finetune')
MODES = ('full', 'coarse_only', 'detail_only')


class ModelParams(MetaData):
    """Architecture and inference hyperparameters shared by both branches.

    ``alpha`` is the guidance/warped blend ratio; ``n_refs`` caps the number
    of candidate references per subject (8 at desk scale, 32 in the full-size
    setting).
    """

    def __init__(self):
        super().__init__('model')
        self.set_requirements(list(self.get_defaults()))

    def set_to_defaults(self):
        self.set_from_dictionary(self.get_defaults())

    def get_defaults(self):
        return {
            'height': 128,
            'width': 64,
            'base_channels': 32,
            'alpha': 0.1,
            'heatmap_sigma': 0.05,
            'background_weight': 0.1,
            'spade_hidden': 32,
            'mode': 'full',
            'n_refs': 8,
            'lambda_miss': 0.2,
            'match_weight': 0.5,
            'extractor_seed': 1234,
            'init_seed': 0
        }

    def validate(self):
        """Checks the architecture constraints.

        Raises
        ------
        ValueError
            if the resolution is not divisible by 32, alpha is outside [0, 1]
            or the mode is unknown.
        """
        for key in ('height', 'width'):
            if self.get(key) <= 0 or self.get(key) % 32:
                raise ValueError('{} must be a positive multiple of 32, got {}'.format(key, self.get(key)))
        if not 0. <= self.get('alpha') <= 1.:
            raise ValueError('alpha must lie in [0, 1], got {}'.format(self.get('alpha')))
        if self.get('mode') not in MODES:
            raise ValueError('{} is not a valid model mode; choose one of {}'.format(self.get('mode'), MODES))
        if self.get('n_refs') < 1:
            raise ValueError('n_refs must be positive, got {}'.format(self.get('n_refs')))


class TrainParams(MetaData):
    """Optimizer and schedule settings of the training stages."""

    def __init__(self):
        super().__init__('train')
        self.set_requirements(list(self.get_defaults()))

    def set_to_defaults(self):
        self.set_from_dictionary(self.get_defaults())

    def get_defaults(self):
        return {
            'stage': 'coarse',
            'lr': 5e-5,
            'weight_decay': 3e-6,
            'batch_size': 4,
            'epochs': 20,
            'max_steps': 0,
            'seed': 0,
            'clip_norm': 10.0,
            'augment': True,
            'finetune_epochs': 20,
            'finetune_frames': 5,
            'finetune_ref_frames': 4,
            'checkpoint_every': 0
        }

    def validate(self):
        """Checks the training settings.

        Raises
        ------
        ValueError
            for a non-positive learning rate or batch size, negative counters
            or an unknown stage.
        """
        if self.get('stage') not in STAGES:
            raise ValueError('{} is not a valid stage; choose one of {}'.format(self.get('stage'), STAGES))
        if self.get('lr') <= 0:
            raise ValueError('lr must be positive, got {}'.format(self.get('lr')))
        if self.get('batch_size') <= 0:
            raise ValueError('batch_size must be positive, got {}'.format(self.get('batch_size')))
        for key in ('weight_decay', 'epochs', 'max_steps', 'finetune_epochs', 'checkpoint_every'):
            if self.get(key) < 0:
                raise ValueError('{} must be non-negative, got {}'.format(key, self.get(key)))
        for key in ('finetune_frames', 'finetune_ref_frames'):
            if self.get(key) < 1:
                raise ValueError('{} must be at least 1, got {}'.format(key, self.get(key)))


class DegradeParams(MetaData):
    """Magnitudes of the synthetic capture artifacts. Every magnitude may be
    zero, which switches the corresponding artifact off."""

    def __init__(self):
        super().__init__('degrade')
        self.set_requirements(list(self.get_defaults()))

    def set_to_defaults(self):
        self.set_from_dictionary(self.get_defaults())

    def get_defaults(self):
        return {
            'hole_count': 4,
            'hole_radius_min': 0.04,
            'hole_radius_max': 0.09,
            'noise_sigma': 0.04,
            'blur_sigma': 0.8,
            'jitter': 0.01,
            'color_shift': 0.05
        }

    def validate(self):
        for key, value in self.get_as_dictionary().items():
            if value < 0:
                raise ValueError('{} must be non-negative, got {}'.format(key, value))
        if self.get('hole_count') > 6:
            raise ValueError('hole_count must be at most 6, got {}'.format(self.get('hole_count')))
        if self.get('hole_radius_min') > self.get('hole_radius_max'):
            raise ValueError('hole_radius_min {} exceeds hole_radius_max {}'.format(
                self.get('hole_radius_min'), self.get('hole_radius_max')))


class DataParams(MetaData):
    """Size of the generated dataset."""

    def __init__(self):
        super().__init__('data')
        self.set_requirements(list(self.get_defaults()))

    def set_to_defaults(self):
        self.set_from_dictionary(self.get_defaults())

    def get_defaults(self):
        return {
            'data_dir': 'dataset',
            'n_subjects': 4,
            'n_heldout': 2,
            'frames_per_seq': 30,
            'n_views': 8,
            'ref_poses': 4,
            'data_seed': 0
        }

    def validate(self):
        for key in ('n_subjects', 'frames_per_seq', 'n_views', 'ref_poses'):
            if self.get(key) < 1:
                raise ValueError('{} must be at least 1, got {}'.format(key, self.get(key)))
        if self.get('n_heldout') < 0:
            raise ValueError('n_heldout must be non-negative, got {}'.format(self.get('n_heldout')))


class RunSettings:
    """All the settings of a run, stored in four parameter groups and
    addressed through one flat namespace."""

    def __init__(self):
        self.model_params = ModelParams()
        self.train_params = TrainParams()
        self.degrade_params = DegradeParams()
        self.data_params = DataParams()
        for group in self.groups:
            group.set_to_defaults()

    @property
    def groups(self):
        return [self.model_params, self.train_params, self.degrade_params, self.data_params]

    def _group_for(self, key):
        for group in self.groups:
            if key in group.get_requirements():
                return group
        raise ValueError('{} is not a parameter of any settings group'.format(key))

    def set(self, **kwargs):
        """Sets parameters in whichever group requires them.

        Raises
        ------
        ValueError
            if a key belongs to no group.
        """
        for key, value in kwargs.items():
            self._group_for(key).set(key, value)

    def get(self, key):
        return self._group_for(key).get(key)

    def validate(self):
        for group in self.groups:
            group.validate()

    def as_dictionary(self):
        """Flat dictionary of every parameter, the format of config files.

        Returns
        -------
        dict
        """
        flat = {}
        for group in self.groups:
            flat.update(group.get_as_dictionary())
        return flat

    def from_dictionary(self, data: dict):
        self.set(**data)

    def save_config(self, fnm='config.json'):
        directory = os.path.dirname(fnm)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(fnm, 'w', encoding='utf-8') as handle:
            json.dump(self.as_dictionary(), handle, indent=2, sort_keys=True)

    def load_config(self, fnm='config.json'):
        """Overrides the current values with those of a flat JSON config file.

        Parameters
        ----------
        fnm : str

        Raises
        ------
        FileNotFoundError
            if the file does not exist.
        ValueError
            if the file holds an unknown key.
        """
        if not os.path.exists(fnm):
            raise FileNotFoundError('No config file at {}'.format(fnm))
        with open(fnm, 'r', encoding='utf-8') as handle:
            self.from_dictionary(json.load(handle))


def thread_count():
    """Worker threads allowed for internal parallelism, capped by the
    ``RERENDER_PI_THREADS`` environment variable.

    Raises
    ------
    ValueError
        if the variable is set to something other than a positive integer.
    """
    value = os.environ.get('RERENDER_PI_THREADS')
    if value is None:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        raise ValueError('RERENDER_PI_THREADS must be an integer, got {}'.format(value))
    if count < 1:
        raise ValueError('RERENDER_PI_THREADS must be positive, got {}'.format(count))
    return count
