"""scikit-learn style wrappers around the line-graph transform and the latency model.

``X`` is always a sequence of NetworkSnapshot. Predictions are ragged (one
latency vector per snapshot), so they come back as a list of arrays.
"""
from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .model import ModelConfig, prepare_graphs
from .netmodel import NetworkSnapshot, PerformanceMatrix
from .trainer import TrainConfig, mean_mape, model_predictor, predict, train_seed


class LineGraphTransformer(BaseEstimator, TransformerMixin):
    """Snapshots -> GraphInputs (line graph, roles, adjacencies, optional targets). Stateless."""

    def __init__(self, n_roles=5, role_seed=0, n_jobs=1):
        self.n_roles = n_roles
        self.role_seed = role_seed
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return prepare_graphs(list(X), self.n_roles, self.role_seed, jobs=self.n_jobs)


def _with_targets(X, y):
    if y is None:
        return list(X)
    out = []
    for s, lat in zip(X, y, strict=True):
        occ = s.performance.link_occupancy if s.performance is not None else {}
        out.append(NetworkSnapshot(s.topology, s.traffic, s.routing, PerformanceMatrix(lat, occ)))
    return out


class LatencyEstimator(BaseEstimator):
    """Per-OD-pair latency regressor.

    ``fit(X, y)`` takes labels from ``y`` (one latency vector per snapshot) or,
    when ``y`` is None, from each snapshot's performance matrix. ``score``
    returns the negated mean MAPE so that greater is better.
    """

    def __init__(self, embed_dim=32, dgcn_layers=3, gat_heads=2, gat_dim=16, n_roles=5, edgedrop_p=0.1,
                 readout="nalu", lr=1e-3, epochs=30, samples_per_epoch=400, lambda_link=0.5,
                 patience=None, validation_fraction=0.1, random_state=0, n_jobs=1):
        self.embed_dim = embed_dim
        self.dgcn_layers = dgcn_layers
        self.gat_heads = gat_heads
        self.gat_dim = gat_dim
        self.n_roles = n_roles
        self.edgedrop_p = edgedrop_p
        self.readout = readout
        self.lr = lr
        self.epochs = epochs
        self.samples_per_epoch = samples_per_epoch
        self.lambda_link = lambda_link
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, dgcn_layers=self.dgcn_layers, gat_heads=self.gat_heads,
                           gat_dim=self.gat_dim, n_roles=self.n_roles, edgedrop_p=self.edgedrop_p,
                           readout=self.readout)

    def _graphs(self, X):
        return LineGraphTransformer(self.n_roles, 0, self.n_jobs).transform(X)

    def fit(self, X, y=None):
        snaps = _with_targets(X, y)
        if any(s.performance is None for s in snaps):
            raise ValueError("every training snapshot needs latency labels (y or snapshot.performance)")
        graphs = self._graphs(snaps)
        n_val = int(round(self.validation_fraction * len(graphs)))
        n_val = min(n_val, len(graphs) - 1)
        train_g, val_g = graphs[:len(graphs) - n_val], graphs[len(graphs) - n_val:]
        self.model_config_ = self._model_config()
        self.train_config_ = TrainConfig(lr=self.lr, epochs=self.epochs, samples_per_epoch=self.samples_per_epoch,
                                         seeds=(self.random_state,), lambda_link=self.lambda_link,
                                         patience=self.patience)
        result = train_seed(train_g, val_g, self.model_config_, self.train_config_, self.random_state)
        self.params_ = result.params
        self.history_ = result.summary()
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("LatencyEstimator is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        return [predict(self.params_, self.model_config_, g)
                for g in self._graphs([s.without_performance() for s in X])]

    def score(self, X, y=None):
        self._check_fitted()
        graphs = self._graphs(_with_targets(X, y))
        return -mean_mape(model_predictor(self.params_, self.model_config_), graphs)
