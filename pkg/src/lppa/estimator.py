"""scikit-learn compatible classifier trained by decentralized gradient tracking."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import data as D
from . import model as M
from .protocol import AggregationRule, SimulationConfig, run_simulation
from .topology import build_topology, sinkhorn_knopp


class DFLClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier across simulated clients with DSGT, DP or LPPA.

    ``fit`` partitions the training data over ``n_clients`` clients, runs the
    chosen aggregation rule for ``rounds`` communication rounds and keeps the
    client-average weights as the fitted model.

    Parameters
    ----------
    rule : {"dsgt", "dp", "lppa"}, default="lppa"
    beta : float, default=0.025
        Laplace scale for ``dp`` and ``lppa``; ignored for ``dsgt``.
    n_clients : int, default=5
    topology : {"full", "ring"}, default="full"
    model : {"logreg", "mlp"}, default="logreg"
    hidden : int, default=8
        Hidden width when ``model="mlp"``.
    lam : float, default=0.05
        Step size.
    rounds : int, default=50
    local_epochs : int, default=1
    batch_size : int, default=256
    partition : str, default="iid"
        One of ``iid``, ``quantity_skew``, ``label_skew_dirichlet``,
        ``label_skew_count``.
    alpha : float, default=0.1
        Dirichlet concentration for the skewed partitions.
    k : int, default=2
        Labels per client for ``label_skew_count``.
    random_state : int, default=0

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    coef_ : ndarray
        Flat consensus weight vector.
    client_coefs_ : ndarray of shape (n_clients, n_params)
    history_ : list of RoundMetrics
    weights_ : ndarray of shape (n_clients, n_clients)
        Doubly stochastic aggregation matrix used during training.
    """

    def __init__(self, rule="lppa", beta=0.025, n_clients=5, topology="full",
                 model="logreg", hidden=8, lam=0.05, rounds=50, local_epochs=1,
                 batch_size=256, partition="iid", alpha=0.1, k=2, random_state=0):
        self.rule = rule
        self.beta = beta
        self.n_clients = n_clients
        self.topology = topology
        self.model = model
        self.hidden = hidden
        self.lam = lam
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.partition = partition
        self.alpha = alpha
        self.k = k
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        n_classes = max(len(self.classes_), 2)
        ds = D.Dataset(X, self._encoder.transform(y), n_classes)
        seed = int(self.random_state)
        shards = D.partition(
            ds, D.PartitionSpec(self.partition, self.alpha, self.k, seed), self.n_clients
        )
        graph = build_topology(self.topology, self.n_clients)
        weights = sinkhorn_knopp(graph)
        self.spec_ = M.ModelSpec(self.model, X.shape[1], n_classes,
                                 self.hidden if self.model == "mlp" else 0)
        cfg = SimulationConfig(
            rule=AggregationRule.parse(self.rule, self.beta), model=self.spec_, lam=self.lam,
            rounds=self.rounds, local_epochs=self.local_epochs,
            batch_size=self.batch_size, seed=seed,
        )
        result = run_simulation(cfg, shards, weights, graph=graph)
        self.weights_ = weights.w
        self.history_ = result.history
        self.client_coefs_ = result.state.thetas()
        self.coef_ = result.consensus_theta()
        self.diverged_ = result.diverged
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        z = M.logits(self.spec_, self.coef_, X)
        return z[:, : len(self.classes_)]

    def predict_proba(self, X):
        return M.softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
