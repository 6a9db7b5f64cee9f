import numpy as np

from .exceptions import NonFiniteGradient


class AmsgradState:
    """AMSGrad moments for one variable (no bias correction).

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2;  vhat <- max(vhat, v);
    x <- x - lr m / (sqrt(vhat) + eps)
    """

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.v_hat = np.zeros(shape)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, x, grad, lr):
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.m.shape:
            raise ValueError(f"gradient shape {grad.shape} != state shape {self.m.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("gradient has non-finite entries")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        self.v_hat = np.maximum(self.v_hat, self.v)
        return x - lr * self.m / (np.sqrt(self.v_hat) + self.eps)


def amsgrad_step(state, variable, gradient, lr):
    """Functional alias of :meth:`AmsgradState.step`."""
    return state.step(variable, gradient, lr)


class AmsgradGroup:
    """Lazily created states keyed by variable name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.states = {}

    def step(self, key, x, grad, lr):
        st = self.states.get(key)
        if st is None:
            st = self.states[key] = AmsgradState(np.shape(x), self.beta1, self.beta2,
                                                 self.eps)
        return st.step(x, grad, lr)

    def reset(self, key):
        self.states.pop(key, None)
