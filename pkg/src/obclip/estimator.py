"""scikit-learn style wrapper around the two-tower trainer."""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .distance import DistanceKind
from .encoder import TowerSpec, TwoTower
from .synthdata import GeneratorConfig, PairBatch, recall_at_k, similarity_matrix
from .trainer import ExperimentConfig, OptimizerSettings, TemperatureSettings, embed_batch, train


class ContrastiveAligner(TransformerMixin, BaseEstimator):
    """Learn paired embeddings of two feature views with the contrastive loss.

    ``fit(X, Y)`` treats row ``i`` of ``X`` (images) and of ``Y`` (texts) as a
    positive pair. ``transform`` embeds images, ``transform_text`` embeds texts,
    both flattened to ``n * m`` columns. ``predict(X, Y)`` returns, for every
    image, the index of the closest text; ``score`` is mean recall@1 in both
    directions with the whole of ``Y`` as the gallery.
    """

    def __init__(self, kind: str = "oblique_neg_trace", n: int = 8, m: int = 4, head: str = "single",
                 encoder: str = "mlp", hidden_dims: tuple = (64,), model_dim: int = 32, t0: float = 0.0,
                 learnable_temperature: bool = True, tau_max: Optional[float] = None, steps: int = 500,
                 batch_size: int = 64, learning_rate: float = 5e-4, warmup_steps: int = 50, seed: int = 0):
        self.kind = kind
        self.n = n
        self.m = m
        self.head = head
        self.encoder = encoder
        self.hidden_dims = hidden_dims
        self.model_dim = model_dim
        self.t0 = t0
        self.learnable_temperature = learnable_temperature
        self.tau_max = tau_max
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.seed = seed

    def _config(self, n_samples: int, img_dim: int, txt_dim: int) -> ExperimentConfig:
        m = 1 if not DistanceKind.parse(self.kind).oblique else self.m
        spec = TowerSpec(kind=self.kind, head=self.head, n=self.n, m=m, encoder=self.encoder,
                         image_dim=img_dim, text_dim=txt_dim, hidden_dims=list(self.hidden_dims),
                         model_dim=self.model_dim)
        gallery = min(64, n_samples)
        return ExperimentConfig(
            name="estimator", model=spec,
            temperature=TemperatureSettings(self.t0, self.learnable_temperature, self.tau_max),
            optimizer=dataclasses.replace(OptimizerSettings(), lr=self.learning_rate, warmup_steps=self.warmup_steps),
            batch_size=self.batch_size, steps=self.steps, eval_period=max(self.steps, 1), eval_size=gallery,
            eval_batches=max(1, min(n_samples, 512) // gallery), train_size=n_samples,
            data=GeneratorConfig(image_dim=img_dim, text_dim=txt_dim), seed=self.seed)

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X and Y need the same number of rows, got {X.shape[0]} and {Y.shape[0]}")
        if X.shape[0] < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} pairs, got {X.shape[0]}")
        config = self._config(X.shape[0], X.shape[1], Y.shape[1])
        zeros = np.zeros(X.shape[0], dtype=np.int64)
        data = PairBatch(X, Y, zeros, zeros, zeros.astype(bool))
        held = config.eval_size * config.eval_batches
        result = train(config, data=data, held_out=data.take(np.arange(held)))
        self.config_ = config
        self.model_ = TwoTower(config.model)
        self.params_ = result.params
        self.tau_ = result.tau
        self.log_ = result.log
        self.n_features_in_ = X.shape[1]
        self.n_text_features_in_ = Y.shape[1]
        return self

    def _embed(self, X, tower: str) -> np.ndarray:
        check_is_fitted(self, "params_")
        width = self.n_features_in_ if tower == "img" else self.n_text_features_in_
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != width:
            raise ValueError(f"expected {width} features, got {X.shape[1]}")
        dummy = np.zeros((X.shape[0], self.n_text_features_in_ if tower == "img" else self.n_features_in_))
        pair = (X, dummy) if tower == "img" else (dummy, X)
        zeros = np.zeros(X.shape[0], dtype=np.int64)
        u, v = embed_batch(self.model_, self.params_, PairBatch(*pair, zeros, zeros, zeros.astype(bool)))
        return u if tower == "img" else v

    def transform(self, X) -> np.ndarray:
        u = self._embed(X, "img")
        return u.reshape(u.shape[0], -1)

    def transform_text(self, Y) -> np.ndarray:
        v = self._embed(Y, "txt")
        return v.reshape(v.shape[0], -1)

    def predict(self, X, Y) -> np.ndarray:
        """Index into ``Y`` of the nearest text for every row of ``X``."""
        u, v = self._embed(X, "img"), self._embed(Y, "txt")
        return np.argmax(similarity_matrix(self.config_.model.kind, u, v), axis=1)

    def score(self, X, Y) -> float:
        u, v = self._embed(X, "img"), self._embed(Y, "txt")
        if u.shape[0] != v.shape[0]:
            raise ValueError("score needs paired rows")
        i2t, t2i = recall_at_k(u, v, self.config_.model.kind, 1)
        return (i2t + t2i) / 2
