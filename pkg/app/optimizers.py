import numpy as np

from app.exceptions import TensorShapeError


class OptimizerState:
    """Moment estimates mirroring the parameter tensors, plus the step count."""

    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def _check_shapes(state, params, grads):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise TensorShapeError(
            f"optimizer got {len(params)} params, {len(grads)} grads, state for {len(state.m)}")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise TensorShapeError(
                f"optimizer shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")


def adamax_step(state, params, grads):
    """In-place Adamax update; state.v holds the infinity-norm u."""
    _check_shapes(state, params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1 - b1 ** state.t)
    for p, g, m, u in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        p -= (step * m / (u + state.eps)).astype(p.dtype)
    return params, state


def adam_step(state, params, grads):
    _check_shapes(state, params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class Adamax:
    step_fn = staticmethod(adamax_step)

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        self.state = OptimizerState(params, lr, beta1, beta2, eps)

    def step(self, params, grads):
        self.step_fn(self.state, params, grads)


class Adam(Adamax):
    step_fn = staticmethod(adam_step)
