"""scikit-learn style wrapper around training and segmentation."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainConfig
from .pipeline import dice, segment, train
from .volume import argmax_labels, one_hot


def _check_volumes(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, l, w, h), got {X.shape}")
    return X


def _check_ages(ages, n: int) -> np.ndarray:
    if ages is None:
        raise ValueError("ages are required, one per image")
    ages = check_array(np.asarray(ages, dtype=np.float64).reshape(-1, 1), dtype=np.float64).ravel()
    if ages.shape[0] != n:
        raise ValueError(f"got {ages.shape[0]} ages for {n} images")
    return ages


class CASNetSegmenter(BaseEstimator):
    """Age-conditioned atlas segmenter.

    Parameters mirror :class:`~casnet.config.TrainConfig`. ``fit`` takes
    images ``(n, l, w, h)``, labels as class maps ``(n, l, w, h)`` or
    probabilities ``(n, l, w, h, c)``, and one age per image.

    Attributes
    ----------
    model_ : CASNet
        Trained state.
    n_classes_ : int
    history_ : list of EpochLog
    """

    def __init__(self, epochs=500, switch_epoch=200, lambda_i=2.0, lambda_i_late=1.0,
                 lambda_l=1.0, lambda_l_late=2.0, lambda_g=200.0, lambda_d=500.0, lambda_m=200.0,
                 T=6, n_groups=4, age_min=20.6, age_max=38.2, lr_field=1e-2, lr_group=1e-2,
                 lr_ss=1e-1, lr_merge=1e-1, test_steps=100, test_lr=1e-2, reg_units="normalized",
                 random_state=0):
        self.epochs = epochs
        self.switch_epoch = switch_epoch
        self.lambda_i = lambda_i
        self.lambda_i_late = lambda_i_late
        self.lambda_l = lambda_l
        self.lambda_l_late = lambda_l_late
        self.lambda_g = lambda_g
        self.lambda_d = lambda_d
        self.lambda_m = lambda_m
        self.T = T
        self.n_groups = n_groups
        self.age_min = age_min
        self.age_max = age_max
        self.lr_field = lr_field
        self.lr_group = lr_group
        self.lr_ss = lr_ss
        self.lr_merge = lr_merge
        self.test_steps = test_steps
        self.test_lr = test_lr
        self.reg_units = reg_units
        self.random_state = random_state

    def _config(self, grid: int, classes: int) -> TrainConfig:
        p = self.get_params()
        p["groups"] = p.pop("n_groups")
        p["seed"] = p.pop("random_state")
        return TrainConfig(grid=grid, classes=classes, **p)

    def fit(self, X, y, ages=None):
        X = _check_volumes(X)
        ages = _check_ages(ages, X.shape[0])
        y = np.asarray(y)
        if y.shape == X.shape:
            if not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
                raise ValueError("class maps must hold non-negative integers")
            c = int(y.max()) + 1
            labels = [one_hot(torch.as_tensor(s), c) for s in y]
        elif y.shape[:-1] == X.shape:
            c = y.shape[-1]
            labels = [torch.as_tensor(s, dtype=torch.float64) for s in y]
        else:
            raise ValueError(f"labels of shape {y.shape} do not match images {X.shape}")
        if c < 2:
            raise ValueError("need at least two classes")
        self.config_ = self._config(X.shape[1], c)
        torch.manual_seed(self.random_state)
        result = train(self.config_, [torch.as_tensor(x) for x in X], labels, ages)
        self.model_ = result.model
        self.history_ = result.history
        self.n_classes_ = c
        return self

    def predict_proba(self, X, ages=None) -> np.ndarray:
        """Merged class probabilities, shape ``(n, l, w, h, c)``."""
        check_is_fitted(self, "model_")
        X = _check_volumes(X)
        ages = _check_ages(ages, X.shape[0])
        if X.shape[1:] != self.model_.grid.shape:
            raise ValueError(f"images of shape {X.shape[1:]} do not match the fitted grid {self.model_.grid.shape}")
        out = [segment(self.model_, torch.as_tensor(x), float(a), self.config_).seg_merged for x, a in zip(X, ages)]
        return torch.stack(out).numpy()

    def predict(self, X, ages=None) -> np.ndarray:
        """Class maps, shape ``(n, l, w, h)``."""
        return argmax_labels(torch.as_tensor(self.predict_proba(X, ages))).numpy()

    def score(self, X, y, ages=None) -> float:
        """Mean Dice over foreground classes and images."""
        pred = self.predict(X, ages)
        y = np.asarray(y)
        truth = y if y.shape == pred.shape else np.argmax(y, -1)
        return float(np.mean([[dice(p, t, k) for k in range(1, self.n_classes_)]
                              for p, t in zip(torch.as_tensor(pred), torch.as_tensor(truth))]))
