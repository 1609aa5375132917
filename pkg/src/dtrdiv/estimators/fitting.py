"""Minimum-divergence and maximum-likelihood fits with sandwich covariance."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import optimize, stats

from ..errors import SingularIndexError, StructuralError
from ..models import ModelQFunction, PolicyComponent
from ..qcore import TrajectoryDataset
from . import losses as L
from .optim import OPTIMIZERS, minimize, numeric_jacobian

METHODS = ("gamma_mde", "beta_mde", "ml")
CONDITION_LIMIT = 1e8
START_RANGE = 3.0
ROOT_RTOL = 1e-8


@dataclass(frozen=True)
class FitConfig:
    method: str = "gamma_mde"
    index: float = -1.5
    optimizer: str = "quasi_newton"
    max_iters: int = 500
    gradient_tol: float = 1e-8
    restarts: int = 5
    seed: int = 0
    family: str = "exponential"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.max_iters < 1 or self.gradient_tol <= 0 or self.restarts < 0:
            raise ValueError("max_iters must be >= 1, gradient_tol > 0 and restarts >= 0")
        if self.method == "gamma_mde" and self.index == 0:
            raise SingularIndexError("gamma = 0 is singular for gamma-MDE")
        if self.method == "beta_mde" and self.index == -1:
            raise SingularIndexError("beta = -1 is singular for beta-MDE")


@dataclass
class FitResult:
    method: str
    index: Optional[float]
    psi_hat: np.ndarray
    alpha_hat: np.ndarray
    loss_at_optimum: float
    gradient_norm: float
    sandwich_covariance: np.ndarray
    converged: bool
    iterations: int
    n: int = 0
    note: str = ""
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.psi_hat, self.alpha_hat])

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_covariance), 0.0, None))

    def to_dict(self) -> dict:
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        out = {
            "method": self.method,
            "index": self.index,
            "psi_hat": [clean(v) for v in self.psi_hat],
            "alpha_hat": [clean(v) for v in self.alpha_hat],
            "covariance": [[clean(v) for v in row] for row in self.sandwich_covariance],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "loss": clean(self.loss_at_optimum),
            "gradient_norm": clean(self.gradient_norm),
            "n": int(self.n),
        }
        if self.note:
            out["note"] = self.note
        if self.message:
            out["message"] = self.message
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "FitResult":
        def arr(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)

        cov = payload.get("covariance") or []
        cov = np.array([[np.nan if x is None else x for x in row] for row in cov], dtype=float)
        loss = payload.get("loss")
        gn = payload.get("gradient_norm")
        return cls(
            payload["method"], payload.get("index"), arr(payload["psi_hat"]), arr(payload.get("alpha_hat", [])),
            np.nan if loss is None else loss, np.nan if gn is None else gn, cov,
            bool(payload["converged"]), int(payload["iterations"]), int(payload.get("n", 0)),
            payload.get("note", ""), payload.get("message", ""),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class _Problem:
    loss: Callable
    grad: Callable
    estfun: Callable
    jacobian: Optional[Callable] = None


def _starts(k: int, config: FitConfig):
    rng = np.random.default_rng(config.seed)
    yield np.zeros(k)
    for _ in range(config.restarts):
        yield rng.uniform(-START_RANGE, START_RANGE, size=k)


def sandwich(estfun: Callable, theta, jacobian: Optional[Callable] = None):
    """``J^{-1} I J^{-T} / n`` and the condition number of ``J``.

    ``I`` is the mean outer product of the per-record estimating functions and
    ``J`` the Jacobian of their mean (central differences unless supplied).
    """
    theta = np.asarray(theta, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        E = estfun(theta)
        n = E.shape[0]
        info = E.T @ E / n
        J = jacobian(theta) if jacobian is not None else numeric_jacobian(lambda t: estfun(t).mean(axis=0), theta)
    if not np.all(np.isfinite(J)) or not np.all(np.isfinite(info)):
        k = theta.size
        return np.full((k, k), np.nan), np.inf
    cond = np.linalg.cond(J)
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        k = theta.size
        return np.full((k, k), np.nan), np.inf
    cov = Jinv @ info @ Jinv.T / n
    return 0.5 * (cov + cov.T), cond


def _solve(problem: _Problem, k: int, n_policy: int, config: FitConfig, method: str, index, n: int, note=""):
    """Run every start; keep the lowest-loss converged result, else the lowest loss overall."""
    best, fallback = None, None
    for x0 in _starts(k, config):
        res = minimize(problem.loss, problem.grad, x0, config.optimizer, config.max_iters, config.gradient_tol)
        if not np.isfinite(res.fun):
            continue
        if res.converged and (best is None or res.fun < best.fun):
            best = res
        if fallback is None or res.fun < fallback.fun:
            fallback = res
    chosen = best or fallback
    if chosen is None:
        nan = np.full(k, np.nan)
        return FitResult(method, index, nan[:n_policy], nan[n_policy:], np.nan, np.nan, np.full((k, k), np.nan),
                         False, 0, n, note, "loss was not finite from any start")
    cov, cond = sandwich(problem.estfun, chosen.x, problem.jacobian)
    converged, message = chosen.converged, chosen.message
    if converged and cond > CONDITION_LIMIT:
        converged = False
        message = f"estimating-function Jacobian is near singular (condition number {cond:.3g}); parameters not identified"
    return FitResult(method, index, chosen.x[:n_policy], chosen.x[n_policy:], chosen.fun, chosen.grad_norm, cov,
                     converged, chosen.iterations, n, note, message)


def _policy_template(template) -> PolicyComponent:
    return template.policy_part if isinstance(template, ModelQFunction) else template


def _require_single(data: TrajectoryDataset):
    if data.T != 1:
        raise StructuralError("single-stage fit called on multi-stage data; use fit_backward")


def fit_gamma_design(design: L.StageDesign, config: FitConfig) -> FitResult:
    gamma = float(config.index)
    k = design.k
    if gamma == -1:
        return _fit_gamma_minus_one(design, config)
    else:
        note = "loss reported without the constant factor m^(-gamma/(gamma+1))"
        problem = _Problem(
            lambda t: L.gamma_loss_design(t, design, gamma, normalized=True),
            lambda t: L.gamma_gradient_design(t, design, gamma, normalized=True),
            lambda t: L.gamma_estfun_design(t, design, gamma, normalized=True),
        )
    return _solve(problem, k, k, config, "gamma_mde", gamma, design.n, note)


def _within_ellipsoid(x, center, cov, level: float = 0.999) -> bool:
    diff = np.asarray(x) - np.asarray(center)
    try:
        dist2 = float(diff @ np.linalg.solve(cov, diff))
    except np.linalg.LinAlgError:
        return False
    return bool(np.isfinite(dist2) and dist2 <= stats.chi2.ppf(level, diff.size))


def _fit_gamma_minus_one(design: L.StageDesign, config: FitConfig) -> FitResult:
    """Root of the unweighted estimating equation near the convex limit-loss minimizer.

    The limit of the normalized loss as gamma -> -1 is the convex
    ``mean(Y/p exp{mean_a g - g(X, A)})``. Its minimizer anchors a root search
    on the unweighted equation (Powell hybrid method). That equation is not a
    gradient field: it can have several roots, or none, in finite samples. A
    root is accepted only inside the 99.9% sandwich ellipsoid of the
    limit-loss estimate; otherwise that estimate is returned with a note.
    """
    k = design.k
    limit = _Problem(
        lambda t: L.gm_limit_loss_design(t, design),
        lambda t: L.gm_limit_gradient_design(t, design),
        lambda t: L.gm_limit_estfun_design(t, design),
    )
    anchor = _solve(limit, k, k, replace(config, restarts=0), "gamma_mde", -1.0, design.n)

    def estfun(t):
        return L.gm_estfun_design(t, design)

    def jac(t):
        return L.gm_estfun_jacobian(t, design)

    if anchor.converged:
        with np.errstate(over="ignore", invalid="ignore"):
            sol = optimize.root(lambda t: estfun(t).mean(axis=0), anchor.psi_hat, jac=jac, method="hybr",
                                options={"xtol": 1e-13, "maxfev": 100 * (k + 1)})
            E = estfun(sol.x)
        scale = np.sqrt(np.mean(np.sum(E**2, axis=1))) if np.all(np.isfinite(E)) else np.inf
        residual = float(np.linalg.norm(E.mean(axis=0))) if np.isfinite(scale) else np.inf
        near = _within_ellipsoid(sol.x, anchor.psi_hat, anchor.sandwich_covariance)
        if np.isfinite(scale) and residual <= ROOT_RTOL * scale and near:
            cov, cond = sandwich(estfun, sol.x, jac)
            converged, message = True, ""
            if cond > CONDITION_LIMIT:
                converged = False
                message = f"estimating-function Jacobian is near singular (condition number {cond:.3g})"
            return FitResult("gamma_mde", -1.0, sol.x, np.zeros(0), 0.5 * residual**2, residual, cov, converged,
                             anchor.iterations + int(sol.nfev), design.n,
                             "gamma = -1 solved through the unweighted estimating equation; loss is half its squared norm",
                             message)
    anchor.note = "unweighted estimating equation has no root near the limit-loss minimizer; limit-loss estimate returned"
    return anchor


def fit_gamma_mde(data: TrajectoryDataset, pc_template, config: FitConfig) -> FitResult:
    """Minimum gamma-power divergence estimate of the policy parameter."""
    _require_single(data)
    if config.method != "gamma_mde":
        raise ValueError(f"config.method is {config.method!r}, expected 'gamma_mde'")
    return fit_gamma_design(L.stage_design(data, _policy_template(pc_template)), config)


def _joint_problem(design: L.StageDesign, loss, estfun) -> _Problem:
    return _Problem(loss, lambda t: -estfun(t).mean(axis=0), estfun)


def fit_beta_design(design: L.StageDesign, config: FitConfig) -> FitResult:
    beta = float(config.index)
    if design.B is None:
        raise StructuralError("beta-MDE needs a parametric nuisance in the model template")
    k = design.k + design.B.shape[1]
    if beta == 0:
        problem = _joint_problem(design, lambda t: L.ekl_loss_design(t, design), lambda t: L.ekl_estfun_design(t, design))
        note = "beta = 0 dispatched to the eKL loss"
    else:
        problem = _joint_problem(design, lambda t: L.beta_loss_design(t, design, beta),
                                 lambda t: L.beta_estfun_design(t, design, beta))
        note = ""
    return _solve(problem, k, design.k, config, "beta_mde", beta, design.n, note)


def fit_beta_mde(data: TrajectoryDataset, model_template: ModelQFunction, config: FitConfig) -> FitResult:
    """Minimum beta-power divergence estimate of ``(psi, alpha)``."""
    _require_single(data)
    if config.method != "beta_mde":
        raise ValueError(f"config.method is {config.method!r}, expected 'beta_mde'")
    return fit_beta_design(L.stage_design(data, model_template), config)


def fit_ml_design(design: L.StageDesign, config: FitConfig) -> FitResult:
    if design.B is None:
        raise StructuralError("ML fitting needs a parametric nuisance in the model template")
    fam = L.outcome_family(config.family)
    k = design.k + design.B.shape[1]
    problem = _joint_problem(design, lambda t: L.ml_loss_design(t, design, fam),
                             lambda t: L.ml_estfun_design(t, design, fam))
    return _solve(problem, k, design.k, config, "ml", None, design.n, f"outcome family: {fam.name}")


def _ml_design(data: TrajectoryDataset, model_template: ModelQFunction, t: int = 1, y=None) -> L.StageDesign:
    s = data.stage(t)
    return L.design_from_arrays(model_template.policy_part, data.history(t), s.a, s.y if y is None else y,
                                np.ones(s.n), model_template.nuisance)


def fit_ml(data: TrajectoryDataset, model_template: ModelQFunction, config: FitConfig) -> FitResult:
    """Q-learning: maximum likelihood fit of the full model (propensities unused)."""
    _require_single(data)
    return fit_ml_design(_ml_design(data, model_template), config)


def fit(data: TrajectoryDataset, template, config: FitConfig) -> FitResult:
    """Dispatch on ``config.method``."""
    if config.method == "gamma_mde":
        return fit_gamma_mde(data, template, config)
    if config.method == "beta_mde":
        return fit_beta_mde(data, template, config)
    return fit_ml(data, template, config)
