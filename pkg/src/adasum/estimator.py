"""scikit-learn front end for the data-parallel training simulator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .training.data import Dataset
from .training.distributed import TrainConfig, train
from .training.models import make_model


class AdasumClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by simulated data-parallel SGD.

    Parameters
    ----------
    model : {"mlp", "logistic"}
        Network to train. ``"logistic"`` only supports two classes.
    hidden : int
        Hidden units of the MLP.
    ranks : int
        Number of simulated workers (power of two).
    reduction : {"adasum", "sum"}
        How per-rank parameter deltas are combined. ``"sum"`` averages them.
    local_steps : int
        Optimizer steps each rank takes between communications.
    optimizer : {"sgd", "momentum", "adam", "lamb"}
    max_lr, warmup_frac : float
        Linear warmup/decay schedule, applied per rank.
    epochs : float
        Passes over the data; the schedule spans exactly this many.
    batch_size : int
        Microbatch size per rank and per local step.
    precision : {"f64", "f16"}
        Precision of the communicated deltas; f16 uses dynamic scaling.
    node_size : int
        Ranks per node for hierarchical reduction (1 = flat).
    transport : {"inproc", "tcp"}
    random_state : int
        Seeds initialization and data shuffling.

    Attributes
    ----------
    classes_ : ndarray
    params_ : ndarray
        Flat parameter vector of the trained model.
    history_ : list of dict
        One metrics row per communication step (training-set loss/accuracy).
    """

    def __init__(self, model="mlp", hidden=32, ranks=1, reduction="adasum", local_steps=1,
                 optimizer="momentum", max_lr=0.05, warmup_frac=0.17, epochs=2, batch_size=32,
                 precision="f64", node_size=1, transport="inproc", random_state=0):
        self.model = model
        self.hidden = hidden
        self.ranks = ranks
        self.reduction = reduction
        self.local_steps = local_steps
        self.optimizer = optimizer
        self.max_lr = max_lr
        self.warmup_frac = warmup_frac
        self.epochs = epochs
        self.batch_size = batch_size
        self.precision = precision
        self.node_size = node_size
        self.transport = transport
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            ranks=self.ranks, batch_size=self.batch_size, local_steps=self.local_steps,
            reduction=self.reduction, precision=self.precision, seed=self.random_state,
            epochs=self.epochs, model=self.model, hidden=self.hidden, optimizer=self.optimizer,
            max_lr=self.max_lr, warmup_frac=self.warmup_frac, node_size=self.node_size,
            transport=self.transport,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = Dataset(X, self._encoder.transform(y).astype(np.int64), len(self.classes_))
        cfg = self._config()
        self.model_ = make_model(self.model, X.shape[1], data.n_classes, self.hidden)
        result = train(cfg, data, model=self.model_)
        self.params_ = result.params
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.predict_proba(self.params_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
