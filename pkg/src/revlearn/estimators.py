"""scikit-learn style wrappers around the core model and a behavioral module.

Token prompts are integer matrices of shape ``(n_samples, context_len)``;
classes are always the full output alphabet ``0 .. vocab_size - 1``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from . import adapters
from .adapters import AdaptationTask
from .harness import train_core
from .model import SCALE_WIDTHS, CoreParams, ModelConfig, Prompt, init_core, predict_proba


def _check_tokens(est, X, y=None, *, reset: bool, vocab_size: int, context_len: int):
    if y is None:
        X = validate_data(est, X, dtype=np.int64, reset=reset)
    else:
        X, y = validate_data(est, X, y, dtype=np.int64, reset=reset)
    if X.shape[1] != context_len:
        raise ValueError(f"expected {context_len} tokens per prompt, got {X.shape[1]}")
    if X.size and (X.min() < 0 or X.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 0 or y.max() >= vocab_size):
            raise ValueError(f"targets must lie in [0, {vocab_size})")
    return X, y


class CoreClassifier(ClassifierMixin, BaseEstimator):
    """Next-symbol classifier that trains the core parameters directly."""

    def __init__(self, vocab_size=32, context_len=8, scale_tag="S", init_seed=0,
                 steps=200, learning_rate=1.0, clip_norm=5.0):
        self.vocab_size = vocab_size
        self.context_len = context_len
        self.scale_tag = scale_tag
        self.init_seed = init_seed
        self.steps = steps
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm

    def _config(self) -> ModelConfig:
        if self.scale_tag not in SCALE_WIDTHS:
            raise ValueError(f"unknown scale_tag {self.scale_tag!r}")
        return ModelConfig.for_scale(self.scale_tag, vocab_size=self.vocab_size,
                                     context_len=self.context_len, init_seed=self.init_seed)

    def fit(self, X, y):
        config = self._config()
        X, y = _check_tokens(self, X, y, reset=True, vocab_size=self.vocab_size, context_len=self.context_len)
        self.classes_ = np.arange(self.vocab_size)
        self.core_ = train_core(init_core(config), X, y, int(self.steps),
                                learning_rate=self.learning_rate, clip_norm=self.clip_norm)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "core_")
        X, _ = _check_tokens(self, X, reset=False, vocab_size=self.vocab_size, context_len=self.context_len)
        return predict_proba(self.core_, None, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


class BehavioralAdapter(ClassifierMixin, BaseEstimator):
    """Trains a removable low-rank module on top of a fixed ``core``.

    After :meth:`unload` the estimator predicts exactly what the bare core does.
    """

    def __init__(self, core: CoreParams | None = None, rank=4, steps=150, learning_rate=0.5, seed=0):
        self.core = core
        self.rank = rank
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed

    def _core(self) -> CoreParams:
        if not isinstance(self.core, CoreParams):
            raise ValueError("BehavioralAdapter needs a CoreParams instance as `core`")
        return self.core

    def fit(self, X, y):
        core = self._core()
        cfg = core.config
        X, y = _check_tokens(self, X, y, reset=True, vocab_size=cfg.vocab_size, context_len=cfg.context_len)
        task = AdaptationTask(
            objective_prompts=tuple((Prompt(tuple(int(t) for t in row), f"x{i}"), int(target))
                                    for i, (row, target) in enumerate(zip(X, y))),
            steps=int(self.steps), learning_rate=self.learning_rate, seed=self.seed,
        )
        module = adapters.attach(core, adapters.new_module(core, rank=self.rank, seed=self.seed))
        self.classes_ = np.arange(cfg.vocab_size)
        self.module_ = adapters.adapt_behavioral(core, module, task)
        return self

    def unload(self):
        check_is_fitted(self, "module_")
        self.module_ = adapters.unload(self.module_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "module_")
        cfg = self._core().config
        X, _ = _check_tokens(self, X, reset=False, vocab_size=cfg.vocab_size, context_len=cfg.context_len)
        return predict_proba(self.core, self.module_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
