"""Binary model checkpoints.

File layout::

    b'RRPICKPT'                 magic
    u32 little endian           format version
    u32 little endian           header length in bytes
    header                      UTF-8 JSON, sorted keys
    blobs                       little-endian float32, in header order

The header lists every tensor as ``[name, shape]``; parameter blobs are named
``param/<name>`` and the Adam moments ``adam_m/<name>`` and ``adam_v/<name>``.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b'RRPICKPT'
FORMAT_VERSION = 1
_PREFIX = struct.Struct('<II')

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """A checkpoint that cannot be used: wrong magic or version, truncated,
    or missing a parameter the model expects."""


@dataclass
class ModelCheckpoint:
    """Everything needed to resume or deploy a model.

    ``params`` and the optimizer moments map parameter names to float32
    arrays; ``model`` and ``train`` hold the flat parameter groups the run
    was configured with.
    """
    model: dict
    train: dict = field(default_factory=dict)
    stage: str = 'coarse'
    epoch: int = 0
    step: int = 0
    extractor_seed: int = 1234
    rng_state: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, model, settings, stage, epoch=0, step=0, optimizer=None, rng=None):
        """Snapshot of a model, its optimizer and the sampling generator."""
        optimizer_state = optimizer.state_dict() if optimizer is not None else {'step_count': 0, 'm': {}, 'v': {}}
        return cls(model=settings.model_params.get_as_dictionary(), train=settings.train_params.get_as_dictionary(),
                   stage=stage, epoch=epoch, step=step,
                   extractor_seed=settings.model_params.get('extractor_seed'),
                   rng_state=rng.bit_generator.state if rng is not None else {}, params=model.state_dict(),
                   adam_m=optimizer_state['m'], adam_v=optimizer_state['v'], adam_step=optimizer_state['step_count'])

    def restore(self, model, optimizer=None, rng=None):
        """Copies the stored state into ``model`` (and optionally the
        optimizer and generator).

        Raises
        ------
        CheckpointError
            if a parameter of the model is missing or has another shape; the
            model is left untouched.
        """
        expected = dict(model.named_parameters())
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise CheckpointError('Checkpoint is missing parameters {}'.format(missing))
        for name, parameter in expected.items():
            if self.params[name].shape != parameter.shape:
                raise CheckpointError('{} has shape {} in the checkpoint, the model expects {}'.format(
                    name, self.params[name].shape, parameter.shape))
        model.load_state_dict(self.params)
        if optimizer is not None:
            optimizer.load_state_dict({'step_count': self.adam_step, 'm': self.adam_m, 'v': self.adam_v})
        if rng is not None and self.rng_state:
            rng.bit_generator.state = self.rng_state

    def _tensors(self):
        for prefix, arrays in (('param', self.params), ('adam_m', self.adam_m), ('adam_v', self.adam_v)):
            for name in sorted(arrays):
                yield '{}/{}'.format(prefix, name), np.asarray(arrays[name], dtype='<f4')


def save_checkpoint(checkpoint, path):
    """Writes ``checkpoint`` atomically: a temporary file is renamed over
    ``path`` once complete."""
    tensors = list(checkpoint._tensors())
    header = {
        'version': checkpoint.version,
        'metadata': {
            'model': checkpoint.model,
            'train': checkpoint.train,
            'stage': checkpoint.stage,
            'epoch': checkpoint.epoch,
            'step': checkpoint.step,
            'extractor_seed': checkpoint.extractor_seed,
            'rng_state': checkpoint.rng_state,
            'adam_step': checkpoint.adam_step
        },
        'tensors': [[name, list(array.shape)] for name, array in tensors]
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    temporary = '{}.tmp'.format(path)
    with open(temporary, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(_PREFIX.pack(checkpoint.version, len(header_bytes)))
        handle.write(header_bytes)
        for _, array in tensors:
            handle.write(np.ascontiguousarray(array).tobytes())
    os.replace(temporary, path)
    logger.info('Wrote {} checkpoint (epoch {}, step {}) to {}'.format(checkpoint.stage, checkpoint.epoch,
                                                                       checkpoint.step, path))


def load_checkpoint(path):
    """Reads a checkpoint written by ``save_checkpoint``.

    Raises
    ------
    FileNotFoundError
        if ``path`` does not exist.
    CheckpointError
        for a bad magic, an unsupported version or a truncated file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError('No checkpoint at {}'.format(path))
    with open(path, 'rb') as handle:
        data = handle.read()
    start = len(MAGIC) + _PREFIX.size
    if len(data) < start:
        raise CheckpointError('{} is truncated'.format(path))
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError('{} is not a model checkpoint'.format(path))
    version, header_length = _PREFIX.unpack(data[len(MAGIC):start])
    if version != FORMAT_VERSION:
        raise CheckpointError('{} has format version {}, expected {}'.format(path, version, FORMAT_VERSION))
    if len(data) < start + header_length:
        raise CheckpointError('{} is truncated'.format(path))
    try:
        header = json.loads(data[start:start + header_length].decode('utf-8'))
    except ValueError as err:
        raise CheckpointError('{} has a corrupt header: {}'.format(path, err))

    offset = start + header_length
    groups = {'param': {}, 'adam_m': {}, 'adam_v': {}}
    for name, shape in header['tensors']:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError('{} is truncated at tensor {}'.format(path, name))
        prefix, _, key = name.partition('/')
        groups[prefix][key] = np.frombuffer(data, dtype='<f4', count=count, offset=offset).reshape(shape).astype(
            np.float32)
        offset = end
    if offset != len(data):
        raise CheckpointError('{} has {} trailing bytes'.format(path, len(data) - offset))

    metadata = header['metadata']
    return ModelCheckpoint(model=metadata['model'], train=metadata['train'], stage=metadata['stage'],
                           epoch=metadata['epoch'], step=metadata['step'],
                           extractor_seed=metadata['extractor_seed'], rng_state=metadata['rng_state'],
                           params=groups['param'], adam_m=groups['adam_m'], adam_v=groups['adam_v'],
                           adam_step=metadata['adam_step'], version=version)
