"""Adam with decoupled weight decay, and global-norm gradient clipping."""
import numpy as np


class MissingGradientError(RuntimeError):
    """Raised when a trainable parameter reaches the optimizer without a
    gradient."""


class Adam:
    """Adam over a list of parameters, skipping those with
    ``requires_grad`` unset.

    Parameters
    ----------
    params : list of Parameter
        every parameter must carry a unique ``name``; the moment buffers are
        keyed by it.
    lr : float, optional
        by default 5e-5
    weight_decay : float, optional
        decoupled decay factor, by default 3e-6
    betas : tuple, optional
        by default (0.9, 0.999)
    eps : float, optional
        by default 1e-8
    """

    def __init__(self, params, lr=5e-5, weight_decay=3e-6, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        names = [param.name for param in self.params]
        if None in names or len(set(names)) != len(names):
            raise ValueError('Adam needs uniquely named parameters')
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = {param.name: np.zeros_like(param.data) for param in self.params}
        self.v = {param.name: np.zeros_like(param.data) for param in self.params}

    def trainable(self):
        return [param for param in self.params if param.requires_grad]

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        """Applies one update to every trainable parameter.

        Raises
        ------
        MissingGradientError
            if a trainable parameter has no gradient; no parameter is touched
            in that case.
        """
        trainable = self.trainable()
        missing = [param.name for param in trainable if param.grad is None]
        if missing:
            raise MissingGradientError('No gradient for {}'.format(missing))
        self.step_count += 1
        beta1, beta2 = self.betas
        correction1 = 1 - beta1**self.step_count
        correction2 = 1 - beta2**self.step_count
        for param in trainable:
            grad = param.grad
            m = self.m[param.name] = beta1 * self.m[param.name] + (1 - beta1) * grad
            v = self.v[param.name] = beta2 * self.v[param.name] + (1 - beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps) + self.weight_decay * param.data
            param.data = (param.data - self.lr * update).astype(param.dtype)

    def state_dict(self):
        return {'step_count': self.step_count, 'm': dict(self.m), 'v': dict(self.v)}

    def load_state_dict(self, state):
        self.step_count = int(state['step_count'])
        for name in self.m:
            if name in state['m']:
                self.m[name] = np.array(state['m'][name], dtype=self.m[name].dtype)
                self.v[name] = np.array(state['v'][name], dtype=self.v[name].dtype)


def clip_grad_norm(params, max_norm):
    """Rescales gradients in place so their global l2 norm is at most
    ``max_norm``.

    Returns
    -------
    float
        the norm before clipping.
    """
    grads = [param.grad for param in params if param.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(grad.astype(np.float64)**2)) for grad in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for param in params:
            if param.grad is not None:
                param.grad = param.grad * param.grad.dtype.type(scale)
    return total
