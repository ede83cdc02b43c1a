"""Small differentiable classifiers with exact gradients.

Parameters live in one flat float64 vector; ``layout`` records where each
weight matrix and bias vector sits so that reductions can work per layer.
"""

from __future__ import annotations

import numpy as np

from ..combiner import LayerLayout
from ..errors import NumericError, ShapeError


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Model:
    """Common surface; subclasses implement ``_loss_grad`` and ``predict_proba``."""

    n_classes: int
    layout: LayerLayout

    @property
    def n_params(self) -> int:
        return self.layout.total

    def _check(self, params, X, y=None):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {params.shape}")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ShapeError("batch inputs must be a non-empty 2-D array")
        if y is not None:
            y = np.asarray(y)
            if y.shape != (X.shape[0],):
                raise ShapeError("labels must have one entry per row")
            if y.min() < 0 or y.max() >= self.n_classes:
                raise ValueError("label outside the class range")
        return params, X, y

    def loss_and_grad(self, params, X, y) -> tuple[float, np.ndarray]:
        """Mean cross-entropy over the batch and its exact gradient."""
        params, X, y = self._check(params, X, y)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = self._loss_grad(params, X, y)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise NumericError(f"non-finite loss {loss} (max |param| = {np.abs(params).max():.3g})")
        return loss, grad

    def loss(self, params, X, y) -> float:
        return self.loss_and_grad(params, X, y)[0]

    def predict(self, params, X) -> np.ndarray:
        return self.predict_proba(params, X).argmax(axis=1)

    def accuracy(self, params, X, y) -> float:
        return float(np.mean(self.predict(params, X) == np.asarray(y)))


class LogisticRegression(Model):
    """Binary logistic regression; parameters are ``[w (d), b (1)]``."""

    n_classes = 2

    def __init__(self, n_features: int, fit_intercept: bool = True):
        self.n_features = n_features
        self.fit_intercept = fit_intercept
        sizes = [n_features] + ([1] if fit_intercept else [])
        self.layout = LayerLayout.from_sizes(sizes)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params)

    def _design(self, X):
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        if self.fit_intercept:
            return np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def _loss_grad(self, params, X, y):
        A = self._design(X)
        z = A @ params
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        grad = A.T @ (p - y) / A.shape[0]
        return loss, grad

    def predict_proba(self, params, X) -> np.ndarray:
        params, X, _ = self._check(params, X)
        z = self._design(X) @ params
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p, p])

    def hessian(self, params, X, y=None, ridge: float = 0.0) -> np.ndarray:
        """``(1/b) A^T diag(p(1-p)) A`` (+ ridge), with ``A = [X, 1]``."""
        params, X, _ = self._check(params, X)
        A = self._design(X)
        p = 0.5 * (1.0 + np.tanh(0.5 * (A @ params)))
        H = (A * (p * (1.0 - p))[:, None]).T @ A / A.shape[0]
        if ridge:
            H = H + ridge * np.eye(H.shape[0])
        return 0.5 * (H + H.T)


class MLP(Model):
    """One tanh hidden layer and a softmax output.

    Parameter order is ``W1 (d*h), b1 (h), W2 (h*c), b2 (c)``, each matrix
    stored row-major.
    """

    def __init__(self, n_features: int, n_hidden: int, n_classes: int):
        self.n_features = n_features
        self.n_hidden = n_hidden
        self.n_classes = n_classes
        self.layout = LayerLayout.from_sizes(
            [n_features * n_hidden, n_hidden, n_hidden * n_classes, n_classes])

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        d, h, c = self.n_features, self.n_hidden, self.n_classes
        w1 = rng.standard_normal((d, h)) * np.sqrt(1.0 / d)
        w2 = rng.standard_normal((h, c)) * np.sqrt(1.0 / h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def unpack(self, params):
        d, h, c = self.n_features, self.n_hidden, self.n_classes
        w1, b1, w2, b2 = self.layout.split(params)
        return w1.reshape(d, h), b1, w2.reshape(h, c), b2

    def _forward(self, params, X):
        if X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        w1, b1, w2, b2 = self.unpack(params)
        hidden = np.tanh(X @ w1 + b1)
        return hidden, hidden @ w2 + b2

    def _loss_grad(self, params, X, y):
        w1, b1, w2, b2 = self.unpack(params)
        hidden, logits = self._forward(params, X)
        n = X.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(n), y]))
        dz = np.exp(shifted - logz[:, None])
        dz[np.arange(n), y] -= 1.0
        dz /= n
        gw2 = hidden.T @ dz
        gb2 = dz.sum(axis=0)
        dh = (dz @ w2.T) * (1.0 - hidden * hidden)
        gw1 = X.T @ dh
        gb1 = dh.sum(axis=0)
        return loss, np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])

    def predict_proba(self, params, X) -> np.ndarray:
        params, X, _ = self._check(params, X)
        return _softmax(self._forward(params, X)[1])


def make_model(kind: str, n_features: int, n_classes: int, n_hidden: int = 32) -> Model:
    if kind == "logistic":
        if n_classes != 2:
            raise ValueError("logistic regression here is binary; use the mlp for more classes")
        return LogisticRegression(n_features)
    if kind == "mlp":
        return MLP(n_features, n_hidden, n_classes)
    raise ValueError(f"unknown model kind {kind!r}")
