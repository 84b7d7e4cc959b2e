"""Layer containers with named parameters."""
import numpy as np

from rerender_pi import ops
from rerender_pi.tensor import Parameter


class Module:
    """Base class of every network block.

    Parameters are discovered from attributes: a ``Parameter``, a ``Module``
    or a list of modules. Names are dotted attribute paths, list entries use
    their index, e.g. ``enc.0.conv.weight``.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=''):
        for attribute, value in vars(self).items():
            name = '{}{}'.format(prefix, attribute)
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + '.')
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters('{}.{}.'.format(name, index))

    def parameters(self):
        return [parameter for _, parameter in self.named_parameters()]

    def assign_names(self, prefix=''):
        """Stores each parameter's dotted path in ``Parameter.name``."""
        for name, parameter in self.named_parameters(prefix):
            parameter.name = name

    def num_parameters(self):
        return int(sum(parameter.data.size for parameter in self.parameters()))

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.zero_grad()

    def set_trainable(self, trainable):
        for parameter in self.parameters():
            parameter.requires_grad = trainable

    def state_dict(self):
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state):
        """Copies arrays into the parameters.

        Raises
        ------
        KeyError
            if a parameter is missing from ``state``.
        ValueError
            if a shape differs.
        """
        named = dict(self.named_parameters())
        missing = [name for name in named if name not in state]
        if missing:
            raise KeyError('Must define {}'.format(missing))
        for name, parameter in named.items():
            array = np.asarray(state[name])
            if array.shape != parameter.shape:
                raise ValueError('{} has shape {}, expected {}'.format(name, array.shape, parameter.shape))
        for name, parameter in named.items():
            parameter.data = np.array(state[name], dtype=parameter.dtype)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    """Square convolution with Kaiming-uniform (fan-in) weights and zero bias.

    Parameters
    ----------
    in_channels : int
    out_channels : int
    kernel_size : int
    rng : numpy.random.Generator
    stride : int, optional
        by default 1
    padding : int, optional
        by default ``kernel_size // 2``
    zero_init : bool, optional
        start with all-zero weights, by default False
    """

    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None, zero_init=False):
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=shape)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros((1, out_channels, 1, 1)))
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvNormReLU(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng)

    def forward(self, x):
        return ops.relu(ops.instance_norm(self.conv(x)))


class Down(Module):
    """conv + instance norm + ReLU, then 2x2 average pooling."""

    def __init__(self, in_channels, out_channels, rng):
        self.block = ConvNormReLU(in_channels, out_channels, 3, rng)

    def forward(self, x):
        return ops.avg_pool2(self.block(x))


class Up(Module):
    """x2 bilinear upsampling followed by a 3x3 convolution."""

    def __init__(self, in_channels, out_channels, rng):
        self.conv = Conv2d(in_channels, out_channels, 3, rng)

    def forward(self, x):
        return self.conv(ops.upsample2(x))
