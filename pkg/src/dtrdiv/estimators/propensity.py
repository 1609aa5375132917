"""Multinomial-logit propensity model."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from ..errors import DegenerateDataError
from ..qcore import ActionSet, TrajectoryDataset

CLAMP = 1e-6


@dataclass
class PropensityModel:
    actions: ActionSet
    model: LogisticRegression
    has_covariates: bool

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return X if self.has_covariates else np.zeros((X.shape[0], 1))

    def probabilities(self, X) -> np.ndarray:
        """Fitted ``p(a | x)`` for every action, shape (n, m), clamped to ``[1e-6, 1 - 1e-6]``."""
        P = self.model.predict_proba(self._design(X))
        order = [list(self.model.classes_).index(a) for a in self.actions.labels]
        P = P[:, order]
        clipped = np.clip(P, CLAMP, 1 - CLAMP)
        if np.any(clipped != P):
            warnings.warn(
                f"{int(np.sum(clipped != P))} fitted propensities clamped to [{CLAMP:g}, {1 - CLAMP:g}]; "
                "the actions look separated by the covariates",
                RuntimeWarning,
            )
        return clipped

    def observed(self, X, a) -> np.ndarray:
        P = self.probabilities(X)
        return P[np.arange(P.shape[0]), self.actions.indices(a)]


def fit_propensity(data: TrajectoryDataset, t: int = 1) -> PropensityModel:
    """Fit ``p(a | h_t)`` by unpenalized multinomial logistic regression on the stage-``t`` history."""
    s = data.stage(t)
    X = data.history(t)
    missing = sorted(set(data.actions.labels) - set(np.unique(s.a).tolist()))
    if missing:
        raise DegenerateDataError(f"stage {t}: actions {missing} never observed; cannot fit propensities")
    has_cov = X.shape[1] > 0 and np.ptp(X, axis=0).max() > 0
    model = LogisticRegression(penalty=None, tol=1e-10, max_iter=5000)
    design = X if has_cov else np.zeros((X.shape[0], 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model.fit(design, s.a)
    return PropensityModel(data.actions, model, has_cov)


def with_fitted_propensities(data: TrajectoryDataset, overwrite: bool = False) -> TrajectoryDataset:
    """Fill missing propensity columns stage by stage."""
    out = data
    for t in range(1, data.T + 1):
        s = data.stage(t)
        if s.p is None or overwrite:
            model = fit_propensity(data, t)
            out = out.replace_stage(t, p=model.observed(data.history(t), s.a))
    return out
