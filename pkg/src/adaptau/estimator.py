"""scikit-learn style wrapper around the trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_pairs
from .dataset import Interactions, SplitPair
from .evaluation import evaluate, topk_items
from .temperature import DEFAULT_TAU_MAX, DEFAULT_TAU_MIN
from .trainer import TrainConfig, train


class AdapTauRecommender(BaseEstimator):
    """Normalised-embedding recommender trained with sampled softmax.

    ``X`` passed to :meth:`fit` is either an :class:`Interactions` or a
    ``(k, 2)`` array of ``(user, item)`` positive pairs. Every constructor
    argument maps to the :class:`TrainConfig` field of the same name.

    Fitted attributes: ``embeddings_`` (the scoring table), ``history_``,
    ``temperature_`` (per-user temperatures after the last epoch), ``tau0_``,
    ``n_users_`` and ``n_items_``.
    """

    def __init__(
        self,
        strategy="adap-tau",
        tau=0.1,
        d=64,
        lr=1e-3,
        l2=0.0,
        batch_size=1024,
        negatives=256,
        epochs=50,
        optimizer="adam",
        backbone="MF",
        layers=2,
        beta=1.0,
        tau_min=DEFAULT_TAU_MIN,
        tau_max=DEFAULT_TAU_MAX,
        dtype="float64",
        seed=0,
        eval_interval=0,
        k=20,
    ):
        self.strategy = strategy
        self.tau = tau
        self.d = d
        self.lr = lr
        self.l2 = l2
        self.batch_size = batch_size
        self.negatives = negatives
        self.epochs = epochs
        self.optimizer = optimizer
        self.backbone = backbone
        self.layers = layers
        self.beta = beta
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.dtype = dtype
        self.seed = seed
        self.eval_interval = eval_interval
        self.k = k

    def _config(self):
        return TrainConfig(**self.get_params())

    @staticmethod
    def _as_interactions(X, n=None, m=None):
        if isinstance(X, Interactions):
            return X
        return Interactions.from_pairs(check_pairs(X), n, m)

    def fit(self, X, y=None, *, n_users=None, n_items=None, X_eval=None):
        """Train on positive pairs ``X``; ``X_eval`` (same index space) enables periodic evaluation."""
        config = self._config()
        train_data = self._as_interactions(X, n_users, n_items)
        if X_eval is None:
            test = Interactions(train_data.n, train_data.m, np.empty((0, 2), np.int64))
        else:
            test = self._as_interactions(X_eval, train_data.n, train_data.m)
        result = train(SplitPair(train_data, test), config)
        self.train_ = train_data
        self.embeddings_ = result.scoring_table()
        self.history_ = result.history
        self.temperature_ = result.state.tau_user.copy()
        self.tau0_ = float(result.state.tau0)
        self.n_users_, self.n_items_ = train_data.n, train_data.m
        return self

    def predict(self, X):
        """Scores ``f(u, i)`` for each ``(user, item)`` row of ``X``."""
        check_is_fitted(self, "embeddings_")
        pairs = check_pairs(X, self.n_users_, self.n_items_)
        U, I = self.embeddings_.scoring_views()
        return np.einsum("kd,kd->k", U[pairs[:, 0]], I[pairs[:, 1]]).astype(np.float64)

    def recommend(self, users, k=None):
        """Top-``k`` unseen items for each user, best first."""
        check_is_fitted(self, "embeddings_")
        k = check_int(self.k if k is None else k, "k", minimum=1)
        users = np.atleast_1d(np.asarray(users, np.int64))
        if users.size and (users.min() < 0 or users.max() >= self.n_users_):
            raise ValueError("user index out of range")
        return topk_items(self.embeddings_, self.train_, users, k)

    def score(self, X, y=None):
        """Recall@k on held-out pairs ``X``."""
        check_is_fitted(self, "embeddings_")
        test = self._as_interactions(X, self.n_users_, self.n_items_)
        return evaluate(self.embeddings_, self.train_, test, self.k).recall_at_k
