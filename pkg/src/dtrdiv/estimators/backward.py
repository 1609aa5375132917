"""Backward-induction fitting for multi-stage trajectories."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from ..errors import StructuralError
from ..models import ModelQFunction, NuisanceComponent
from ..qcore import Policy, TrajectoryDataset
from . import losses as L
from .fitting import FitConfig, FitResult, _ml_design, fit_gamma_design, fit_ml_design


@dataclass
class BackwardResult:
    stage_results: list
    ml_results: list
    policies: list
    clamped: int = 0

    def to_dict(self) -> dict:
        return {
            "T": len(self.stage_results),
            "stages": [
                {"t": t, "policy_fit": r.to_dict(), "plugin_fit": None if m is None else m.to_dict()}
                for t, (r, m) in enumerate(zip(self.stage_results, self.ml_results), start=1)
            ],
            "pseudo_outcomes_clamped": self.clamped,
        }


def fitted_policy(template, result: FitResult) -> Policy:
    """Greedy policy of the fitted policy part; the nuisance plays no role in the argmax."""
    pc = template.policy_part if isinstance(template, ModelQFunction) else template
    model = ModelQFunction(NuisanceComponent("absent"), pc.with_theta(result.psi_hat))
    return Policy.greedy(model)


def fit_backward(
    data: TrajectoryDataset,
    stage_templates: Sequence[ModelQFunction],
    config: FitConfig,
    ml_config: Optional[FitConfig] = None,
) -> BackwardResult:
    """Fit stage policies for ``t = T, ..., 1``.

    Stage ``t`` is fitted by gamma-MDE on ``(H_t, A_t, Y~_t)`` with
    ``Y~_T = Y_T`` and ``Y~_t = Y_t + Q^_{t+1}(H_{t+1}, D^_{t+1}(H_{t+1}))``.
    ``Q^_{t+1}`` is the maximum-likelihood fit of the full stage-(t+1) model
    on the same pseudo-outcomes and ``D^_{t+1}`` the gamma-MDE policy.
    Negative pseudo-outcomes are clamped at zero and counted.
    """
    T = data.T
    if len(stage_templates) != T:
        raise StructuralError(f"need one template per stage: got {len(stage_templates)} for T = {T}")
    if config.method != "gamma_mde":
        raise ValueError("backward induction fits the stage policies by gamma-MDE")
    ml_config = ml_config or replace(config, method="ml", index=0.0)
    results: list = [None] * T
    ml_results: list = [None] * T
    policies: list = [None] * T
    clamped = 0
    y_tilde = data.stage(T).y
    for t in range(T, 0, -1):
        template = stage_templates[t - 1]
        design = L.stage_design(data, template.policy_part, t, y=y_tilde)
        results[t - 1] = fit_gamma_design(design, config)
        policies[t - 1] = fitted_policy(template, results[t - 1])
        if t == 1:
            break
        H = data.history(t)
        if template.nuisance.kind == "parametric_linear":
            ml = fit_ml_design(_ml_design(data, template, t, y=y_tilde), ml_config)
            ml_results[t - 1] = ml
            q_hat = template.with_theta(ml.theta)
        else:
            q_hat = template
        chosen = q_hat.actions.indices(policies[t - 1].batch(H))
        continuation = q_hat.qvalues_batch(H)[np.arange(data.n), chosen]
        y_tilde = data.stage(t - 1).y + continuation
        negative = ~(y_tilde >= 0)
        if np.any(negative):
            count = int(np.sum(negative))
            clamped += count
            warnings.warn(f"stage {t - 1}: {count} pseudo-outcomes negative or undefined; clamped at 0",
                          RuntimeWarning)
            y_tilde = np.where(negative, 0.0, y_tilde)
    return BackwardResult(results, ml_results, policies, clamped)
