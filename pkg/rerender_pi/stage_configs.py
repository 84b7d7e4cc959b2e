"""Classes used to set up the three training stages. Each class decides which
parameters of the network a stage updates and which it freezes."""

from abc import abstractmethod
from dataclasses import dataclass

from rerender_pi.metadata import MetaData

STAGE_SETTINGS = ['lr', 'weight_decay', 'batch_size', 'epochs', 'max_steps', 'seed', 'clip_norm', 'augment',
                  'checkpoint_every']


@dataclass
class StagePlan:
    """What a stage trains: the parameters it updates, the ones it holds
    fixed and the settings it was built from."""
    stage: str
    trainable: list
    frozen: list
    settings: dict

    @property
    def trainable_names(self):
        return [parameter.name for parameter in self.trainable]

    @property
    def frozen_names(self):
        return [parameter.name for parameter in self.frozen]


class StageConfig(MetaData):
    """Abstract class used to build the coarse, detail and fine-tuning
    stages."""

    def __init__(self):
        super().__init__('build_stage')

    def scan_dictionary(self, dictionary):
        """Scans a dictionary and stores whatever parameters the stage needs.

        Parameters
        ----------
        dictionary : dict
            may contain *extra* data, i.e., this can be a superset of the
            needed stage data.
        """
        for requirement in self.get_requirements():
            if requirement in dictionary.keys():
                self._metadata[requirement] = dictionary[requirement]

    def scan_metadata(self, data):
        """Scans a parameter group (or the whole ``RunSettings``) and stores
        whatever parameters the stage needs.

        Parameters
        ----------
        data : MetaData or RunSettings
        """
        if hasattr(data, 'as_dictionary'):
            self.scan_dictionary(data.as_dictionary())
        else:
            self.scan_dictionary(data.get_as_dictionary())

    @abstractmethod
    def is_trainable(self, name, mode):
        """Whether the parameter called ``name`` is updated in this stage for
        a model in ``mode``."""

    def build_stage(self, model):
        """Sets ``requires_grad`` on every parameter of ``model``.

        Parameters
        ----------
        model : RerenderNet

        Returns
        -------
        StagePlan

        Raises
        ------
        KeyError
            if required settings of the stage are missing.
        ValueError
            if the stage has nothing to train for the model's mode.
        """
        if self.get_missing_keys():
            raise KeyError('Must define {}'.format(self.get_missing_keys()))
        trainable, frozen = [], []
        for name, parameter in model.named_parameters():
            update = self.is_trainable(name, model.mode)
            parameter.requires_grad = update
            parameter.grad = None
            (trainable if update else frozen).append(parameter)
        if not trainable:
            raise ValueError('The {} stage trains nothing in {} mode'.format(self.name, model.mode))
        return StagePlan(stage=self.name, trainable=trainable, frozen=frozen, settings=self.get_as_dictionary())


class CoarseStageConfig(StageConfig):
    def __init__(self):
        super().__init__()
        self.name = 'coarse'
        self.set_requirements(list(STAGE_SETTINGS))

    def is_trainable(self, name, mode):
        return mode != 'detail_only' and name.startswith('coarse.')


class DetailStageConfig(StageConfig):
    """The coarse branch is frozen; the whole detail branch trains."""

    def __init__(self):
        super().__init__()
        self.name = 'detail'
        self.set_requirements(list(STAGE_SETTINGS))

    def is_trainable(self, name, mode):
        return mode != 'coarse_only' and name.startswith('detail.')


class FinetuneStageConfig(StageConfig):
    """Everything the model uses trains except the reference encoder."""

    def __init__(self):
        super().__init__()
        self.name = 'finetune'
        self.set_requirements(STAGE_SETTINGS + ['finetune_epochs', 'finetune_frames', 'finetune_ref_frames'])

    def is_trainable(self, name, mode):
        if name.startswith('detail.ref_encoder.'):
            return False
        if mode == 'coarse_only':
            return name.startswith('coarse.')
        if mode == 'detail_only':
            return name.startswith('detail.')
        return True


STAGE_CONFIGS = {'coarse': CoarseStageConfig, 'detail': DetailStageConfig, 'finetune': FinetuneStageConfig}


def make_stage_config(stage, settings):
    """Stage configuration filled from ``settings``.

    Raises
    ------
    ValueError
        for an unknown stage.
    """
    if stage not in STAGE_CONFIGS:
        raise ValueError('{} is not a training stage; choose one of {}'.format(stage, sorted(STAGE_CONFIGS)))
    config = STAGE_CONFIGS[stage]()
    config.scan_metadata(settings)
    return config
