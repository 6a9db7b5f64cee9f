"""Feed-forward site classifier with manual backpropagation.

Architecture per hidden layer: dense -> inverted dropout -> ReLU; the output
layer is dense -> softmax.  Inputs pass through a fixed per-feature affine
standardisation (identity until :meth:`SiteClassifier.set_input_stats` is
called); its statistics are constants with respect to backpropagation.  ``hidden=(50,)`` gives the in-loop adversary,
``hidden=(50, 25)`` the deeper variant, ``hidden=()`` multinomial logistic
regression.
"""

import numpy as np

from .amsgrad import AmsgradGroup
from .exceptions import InvalidParameter, ShapeMismatch
from .numerics import make_rng

LOG_CLAMP = 1e-12


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(pred, y):
    """Mean negative log-likelihood, log clamped at ``1e-12``."""
    pred = np.asarray(pred)
    y = np.asarray(y)
    if pred.shape != y.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs labels {y.shape}")
    return float(-np.sum(y * np.log(np.maximum(pred, LOG_CLAMP))) / pred.shape[0])


class SiteClassifier:
    """Classifier ``F(zeta, features)`` returning per-site probabilities."""

    def __init__(self, n_features, n_classes, hidden=(50,), dropout=0.2, seed=0,
                 lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 0 <= dropout < 1:
            raise InvalidParameter("dropout must be in [0, 1)")
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout = float(dropout)
        self.lr = lr
        self.rng = make_rng(seed)
        sizes = (self.n_features,) + self.hidden + (self.n_classes,)
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append([self.rng.uniform(-lim, lim, (fan_in, fan_out)),
                                np.zeros(fan_out)])
        self.opt = AmsgradGroup(beta1, beta2, eps)
        self.x_mean = np.zeros(self.n_features)
        self.x_scale = np.ones(self.n_features)

    cross_entropy = staticmethod(cross_entropy)

    def n_params(self):
        return sum(w.size + b.size for w, b in self.params)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeMismatch(f"expected (N, {self.n_features}) features, got {x.shape}")
        return x

    def set_input_stats(self, features, floor=1e-8):
        """Standardise future inputs with the column mean and sd of ``features``."""
        x = self._check(features)
        self.x_mean = x.mean(axis=0)
        sd = x.std(axis=0)
        self.x_scale = np.where(sd > floor, sd, 1.0)
        return self

    def sample_masks(self, n, rng=None):
        rng = self.rng if rng is None else rng
        if self.dropout == 0:
            return [None] * len(self.hidden)
        keep = 1.0 - self.dropout
        return [(rng.random((n, h)) < keep) / keep for h in self.hidden]

    def _forward(self, x, masks):
        h = (x - self.x_mean) / self.x_scale
        acts = [h]
        pre = []
        for i, (w, b) in enumerate(self.params[:-1]):
            z = h @ w + b
            if masks is not None and masks[i] is not None:
                z = z * masks[i]
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        w, b = self.params[-1]
        probs = softmax(h @ w + b)
        return probs, acts, pre

    def forward(self, features, train_mode=False, rng=None, masks=None):
        """Site probabilities; dropout only when ``train_mode``.

        Returns ``(probs, masks)`` so that :meth:`backward` can replay the
        same dropout pattern.
        """
        x = self._check(features)
        if train_mode and masks is None:
            masks = self.sample_masks(x.shape[0], rng)
        if not train_mode:
            masks = None
        probs, _, _ = self._forward(x, masks)
        return probs, masks

    def predict_proba(self, features):
        return self.forward(features, train_mode=False)[0]

    def predict(self, features):
        return np.argmax(self.predict_proba(features), axis=1)

    def loss(self, features, y, masks=None):
        probs, _, _ = self._forward(self._check(features), masks)
        return cross_entropy(probs, y)

    def backward(self, features, y, masks=None, train_mode=False):
        """Gradients of the cross-entropy w.r.t. parameters and input features.

        ``masks`` replays a recorded dropout pattern; without masks the
        network is evaluated deterministically.
        """
        x = self._check(features)
        y = np.asarray(y, dtype=float)
        if y.shape != (x.shape[0], self.n_classes):
            raise ShapeMismatch(f"labels must be ({x.shape[0]}, {self.n_classes})")
        probs, acts, pre = self._forward(x, masks)
        delta = (probs - y) / x.shape[0]
        grads = [None] * len(self.params)
        for i in range(len(self.params) - 1, -1, -1):
            w, _ = self.params[i]
            grads[i] = [acts[i].T @ delta, delta.sum(axis=0)]
            delta = delta @ w.T
            if i > 0:
                delta = delta * (pre[i - 1] > 0)
                m = None if masks is None else masks[i - 1]
                if m is not None:
                    delta = delta * m
        return grads, delta / self.x_scale

    def train_step(self, features, y, lr=None):
        """One AMSGrad step on the parameters, descending the cross-entropy."""
        lr = self.lr if lr is None else lr
        x = self._check(features)
        masks = self.sample_masks(x.shape[0]) if self.dropout else None
        grads, _ = self.backward(x, y, masks=masks)
        for i, (g_w, g_b) in enumerate(grads):
            self.params[i][0] = self.opt.step(("w", i), self.params[i][0], g_w, lr)
            self.params[i][1] = self.opt.step(("b", i), self.params[i][1], g_b, lr)
        return self
