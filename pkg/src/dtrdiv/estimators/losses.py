"""Empirical losses and estimating functions for the policy parameter.

Every loss is a mean over records and works on a :class:`StageDesign`, the
per-stage arrays a fit needs: the gradient tensor ``G`` of the linear policy
part (so ``g = G @ psi``), the observed action index, the inverse-propensity
outcome weight ``Y / p`` and, for the fully parametric models, the nuisance
basis. The parameter vector for beta-MDE and ML fits is ``(psi, alpha)``.

Estimating functions are the negative per-record gradients of the loss
summands, so ``sum_i E_i = -n * grad L`` holds exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..errors import EvaluationError, InvalidRecordError, SingularIndexError, StructuralError
from ..models import ModelQFunction, PolicyComponent
from ..qcore import TrajectoryDataset

WEIGHT_WARN = 1e12


@dataclass(frozen=True)
class StageDesign:
    G: np.ndarray
    obs: np.ndarray
    y: np.ndarray
    p: np.ndarray
    B: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.G.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[1]

    @property
    def k(self) -> int:
        return self.G.shape[2]

    @property
    def weight(self) -> np.ndarray:
        return self.y / self.p

    @property
    def G_obs(self) -> np.ndarray:
        return self.G[np.arange(self.n), self.obs]


def design_from_arrays(pc: PolicyComponent, X, a, y, p, nuisance=None) -> StageDesign:
    """Build a :class:`StageDesign` from covariate (or history) rows and columns."""
    y = np.asarray(y, dtype=float)
    if p is None:
        raise InvalidRecordError(
            "propensities are missing; record them in the data or fill them with fit_propensity"
        )
    p = np.asarray(p, dtype=float)
    bad = np.flatnonzero(~(p > 0))
    if bad.size:
        raise InvalidRecordError(f"record {bad[0]}: nonpositive propensity {p[bad[0]]!r}")
    w = y / p
    if np.any(w > WEIGHT_WARN):
        warnings.warn(f"{int(np.sum(w > WEIGHT_WARN))} records have Y/p above {WEIGHT_WARN:g}", RuntimeWarning)
    B = None
    if nuisance is not None and nuisance.kind == "parametric_linear":
        B = nuisance.basis_matrix(X)
    elif nuisance is not None and nuisance.kind == "fixed_function":
        raise StructuralError("fits need a parametric (or absent) nuisance working model")
    return StageDesign(pc.design(X), pc.actions.indices(a), y, p, B)


def stage_design(data: TrajectoryDataset, template, t: int = 1, y=None) -> StageDesign:
    """Design for stage ``t`` of ``data``; the policy features see the history ``H_t``.

    ``template`` is a :class:`PolicyComponent` (gamma-MDE) or a
    :class:`ModelQFunction` whose nuisance basis is also evaluated. ``y``
    overrides the stage outcome (pseudo-outcomes in backward fitting).
    """
    s = data.stage(t)
    X = data.history(t)
    if isinstance(template, ModelQFunction):
        pc, nuisance = template.policy_part, template.nuisance
    else:
        pc, nuisance = template, None
    if pc.actions != data.actions:
        raise StructuralError(f"template actions {pc.actions.labels} differ from data {data.actions.labels}")
    return design_from_arrays(pc, X, s.a, s.y if y is None else y, s.p, nuisance)


def _single(data: TrajectoryDataset):
    if data.T != 1:
        raise StructuralError("expected single-stage data; use fit_backward for T > 1")


def _check_gamma(gamma):
    if gamma == 0:
        raise SingularIndexError("gamma = 0 is singular for the gamma-power loss")
    if gamma == -1:
        raise SingularIndexError("gamma = -1 is singular for the gamma-power loss; use its limit form")


def _check_beta(beta):
    if beta == 0:
        raise SingularIndexError("beta = 0 is singular; use ekl_loss (its limit)")
    if beta == -1:
        raise SingularIndexError("beta = -1 is a singular index of the beta-power loss")


# ---------------------------------------------------------------------------
# gamma-power


def _gamma_pieces(theta, design: StageDesign, gamma, normalized):
    g = design.G @ theta
    g_obs = g[np.arange(design.n), design.obs]
    lse = logsumexp((gamma + 1.0) * g, axis=1)
    # normalized: use the log of the action mean instead of the sum, which
    # removes the constant factor m^{-gamma/(gamma+1)} (huge near gamma = -1)
    lse_used = lse - np.log(design.m) if normalized else lse
    log_ratio = gamma * g_obs - gamma / (gamma + 1.0) * lse_used
    return g, log_ratio, lse


def gamma_loss_design(theta, design: StageDesign, gamma: float, normalized: bool = False) -> float:
    """Gamma-power loss; ``normalized=True`` multiplies it by the positive constant ``m^{gamma/(gamma+1)}``."""
    _check_gamma(gamma)
    _, log_ratio, _ = _gamma_pieces(np.asarray(theta, dtype=float), design, gamma, normalized)
    with np.errstate(over="ignore"):
        return float(-np.mean(design.weight * np.exp(log_ratio)) / gamma)


def gamma_estfun_design(theta, design: StageDesign, gamma: float, normalized: bool = False) -> np.ndarray:
    """Per-record estimating functions, shape (n, k)."""
    _check_gamma(gamma)
    theta = np.asarray(theta, dtype=float)
    g, log_ratio, lse = _gamma_pieces(theta, design, gamma, normalized)
    pi = np.exp((gamma + 1.0) * g - lse[:, None])
    G_bar = np.einsum("na,nak->nk", pi, design.G)
    with np.errstate(over="ignore", invalid="ignore"):
        return (design.weight * np.exp(log_ratio))[:, None] * (design.G_obs - G_bar)


def gamma_gradient_design(theta, design: StageDesign, gamma: float, normalized: bool = False) -> np.ndarray:
    return -gamma_estfun_design(theta, design, gamma, normalized).mean(axis=0)


def gamma_loss(psi, data: TrajectoryDataset, pc_template: PolicyComponent, gamma: float) -> float:
    """Gamma-power loss of the policy parameter ``psi`` (flat order ``(vec(Psi1), psi0)``).

    ``-(1/gamma) mean_i [Y_i/p_i] exp{gamma g(X_i, A_i)} / [sum_a exp{(gamma+1) g(X_i, a)}]^{gamma/(gamma+1)}``
    """
    _single(data)
    _check_gamma(gamma)
    return gamma_loss_design(psi, stage_design(data, pc_template), gamma)


def gamma_estimating_function(psi, record, pc_template: PolicyComponent, gamma: float) -> np.ndarray:
    """Estimating function of a single ``(x, a, y, p)`` record.

    Equals minus the gradient of that record's loss summand. At ``gamma = -1``
    the unweighted form ``Y/p exp{-g(X, A)} (G(X, A) - mean_a G(X, a))`` is
    returned.
    """
    x, a, y, p = record
    design = design_from_arrays(pc_template, np.atleast_2d(np.asarray(x, dtype=float)), [a], [y], [p])
    if gamma == -1:
        return gm_estfun_design(psi, design)[0]
    return gamma_estfun_design(psi, design, gamma)[0]


# ---------------------------------------------------------------------------
# gamma = -1


def gm_estfun_design(theta, design: StageDesign) -> np.ndarray:
    g = design.G @ np.asarray(theta, dtype=float)
    g_obs = g[np.arange(design.n), design.obs]
    diff = design.G_obs - design.G.mean(axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        return (design.weight * np.exp(-g_obs))[:, None] * diff


def gm_estfun_jacobian(theta, design: StageDesign) -> np.ndarray:
    """Analytic Jacobian of the mean unweighted estimating function."""
    E = gm_estfun_design(theta, design)
    return -np.einsum("nk,nj->kj", E, design.G_obs) / design.n


def gm_limit_loss_design(theta, design: StageDesign) -> float:
    """Convex limit loss ``mean_i [Y_i/p_i] exp{mean_a g(X_i, a) - g(X_i, A_i)}``."""
    g = design.G @ np.asarray(theta, dtype=float)
    gap = g.mean(axis=1) - g[np.arange(design.n), design.obs]
    with np.errstate(over="ignore"):
        return float(np.mean(design.weight * np.exp(gap)))


def gm_limit_estfun_design(theta, design: StageDesign) -> np.ndarray:
    """Unweighted form times the covariate-only factor ``exp{mean_a g(X, a)}``."""
    g = design.G @ np.asarray(theta, dtype=float)
    gap = g.mean(axis=1) - g[np.arange(design.n), design.obs]
    with np.errstate(over="ignore", invalid="ignore"):
        return (design.weight * np.exp(gap))[:, None] * (design.G_obs - design.G.mean(axis=1))


def gm_limit_gradient_design(theta, design: StageDesign) -> np.ndarray:
    return -gm_limit_estfun_design(theta, design).mean(axis=0)


# ---------------------------------------------------------------------------
# beta-power and its eKL limit


def _eta(theta, design: StageDesign):
    theta = np.asarray(theta, dtype=float)
    k = design.k
    eta = design.G @ theta[:k]
    if design.B is not None:
        eta = eta + (design.B @ theta[k:])[:, None]
    elif theta.size != k:
        raise StructuralError(f"expected {k} parameters, got {theta.size}")
    return eta


def _grad_eta(design: StageDesign):
    """``d eta(x_i, a) / d theta``, shape (n, m, k + q)."""
    if design.B is None:
        return design.G
    B = np.broadcast_to(design.B[:, None, :], (design.n, design.m, design.B.shape[1]))
    return np.concatenate([design.G, B], axis=2)


def beta_loss_design(theta, design: StageDesign, beta: float) -> float:
    _check_beta(beta)
    eta = _eta(theta, design)
    eta_obs = eta[np.arange(design.n), design.obs]
    with np.errstate(over="ignore", invalid="ignore"):
        per = -design.weight * np.exp(beta * eta_obs) / beta + np.exp((beta + 1.0) * eta).sum(axis=1) / (beta + 1.0)
        return float(np.mean(per))


def beta_estfun_design(theta, design: StageDesign, beta: float) -> np.ndarray:
    _check_beta(beta)
    eta = _eta(theta, design)
    D = _grad_eta(design)
    idx = np.arange(design.n)
    with np.errstate(over="ignore", invalid="ignore"):
        obs_term = (design.weight * np.exp(beta * eta[idx, design.obs]))[:, None] * D[idx, design.obs]
        all_term = np.einsum("na,nak->nk", np.exp((beta + 1.0) * eta), D)
        return obs_term - all_term


def ekl_loss_design(theta, design: StageDesign) -> float:
    eta = _eta(theta, design)
    eta_obs = eta[np.arange(design.n), design.obs]
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(-design.weight * eta_obs + np.exp(eta).sum(axis=1)))


def ekl_estfun_design(theta, design: StageDesign) -> np.ndarray:
    eta = _eta(theta, design)
    D = _grad_eta(design)
    idx = np.arange(design.n)
    with np.errstate(over="ignore", invalid="ignore"):
        return design.weight[:, None] * D[idx, design.obs] - np.einsum("na,nak->nk", np.exp(eta), D)


def beta_loss(alpha, psi, data: TrajectoryDataset, model_template: ModelQFunction, beta: float) -> float:
    """Beta-power loss of ``(alpha, psi)`` under the model ``exp{f(x, alpha) + g(x, a, psi)}``.

    ``mean_i { -[Y_i/p_i] exp{beta eta(X_i, A_i)}/beta + sum_a exp{(beta+1) eta(X_i, a)}/(beta+1) }``
    with ``eta = f + g``. The inverse-propensity weight multiplies only the
    observed-action term, which makes the expected loss the beta-power cross
    entropy against the true Q-function.
    """
    _single(data)
    _check_beta(beta)
    design = stage_design(data, model_template)
    return beta_loss_design(np.concatenate([np.ravel(psi), np.ravel(alpha)]), design, beta)


def ekl_loss(alpha, psi, data: TrajectoryDataset, model_template: ModelQFunction) -> float:
    """``beta -> 0`` limit of :func:`beta_loss` (up to a parameter-free constant)."""
    _single(data)
    design = stage_design(data, model_template)
    return ekl_loss_design(np.concatenate([np.ravel(psi), np.ravel(alpha)]), design)


# ---------------------------------------------------------------------------
# maximum likelihood (Q-learning)


class OutcomeFamily:
    """Exponential-family outcome ``p(y) ~ exp{y nu - kappa(nu)}`` with ``log E[Y] = eta``.

    Subclasses supply the natural parameter ``nu(eta)``, its derivative and
    ``kappa``; the mean is ``kappa'(nu) = exp(eta)``.
    """

    name = "abstract"

    def nu(self, eta):
        raise NotImplementedError

    def dnu(self, eta):
        raise NotImplementedError

    def kappa(self, nu):
        raise NotImplementedError

    def neg_loglik(self, y, eta):
        nu = self.nu(eta)
        return -(y * nu - self.kappa(nu))

    def score_factor(self, y, eta):
        """``(y - Q) * dnu/deta``; multiply by ``d eta / d theta`` for the score."""
        return (y - np.exp(eta)) * self.dnu(eta)


class Exponential(OutcomeFamily):
    """Exponential outcome with mean ``Q``: ``nu = -1/Q``, ``kappa(nu) = -log(-nu)``."""

    name = "exponential"

    def nu(self, eta):
        return -np.exp(-eta)

    def dnu(self, eta):
        return np.exp(-eta)

    def kappa(self, nu):
        return -np.log(-nu)

    def neg_loglik(self, y, eta):
        return y * np.exp(-eta) + eta


class Poisson(OutcomeFamily):
    """Poisson outcome with the canonical log link."""

    name = "poisson"

    def nu(self, eta):
        return eta

    def dnu(self, eta):
        return np.ones_like(eta)

    def kappa(self, nu):
        return np.exp(nu)


FAMILIES = {"exponential": Exponential, "poisson": Poisson}


def outcome_family(family) -> OutcomeFamily:
    if isinstance(family, OutcomeFamily):
        return family
    try:
        return FAMILIES[family]()
    except KeyError:
        raise ValueError(f"unknown outcome family {family!r}; choose from {sorted(FAMILIES)}") from None


def ml_loss_design(theta, design: StageDesign, family="exponential") -> float:
    fam = outcome_family(family)
    eta = _eta(theta, design)[np.arange(design.n), design.obs]
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(fam.neg_loglik(design.y, eta)))


def ml_estfun_design(theta, design: StageDesign, family="exponential") -> np.ndarray:
    fam = outcome_family(family)
    idx = np.arange(design.n)
    eta = _eta(theta, design)[idx, design.obs]
    D = _grad_eta(design)[idx, design.obs]
    with np.errstate(over="ignore", invalid="ignore"):
        return fam.score_factor(design.y, eta)[:, None] * D


def ml_loss(alpha, psi, data: TrajectoryDataset, model_template: ModelQFunction, family="exponential") -> float:
    """Negative mean log-likelihood; for exponential outcomes ``mean_i [log Q_i + Y_i / Q_i]``."""
    _single(data)
    s = data.stage(1)
    # ML ignores propensities; a unit placeholder keeps the design builder happy
    design = design_from_arrays(model_template.policy_part, s.x, s.a, s.y, np.ones(s.n), model_template.nuisance)
    value = ml_loss_design(np.concatenate([np.ravel(psi), np.ravel(alpha)]), design, family)
    if not np.isfinite(value):
        raise EvaluationError("log-likelihood is not finite at these parameters")
    return value


def ml_estimating_function(alpha, psi, record, model_template: ModelQFunction, family="exponential") -> np.ndarray:
    """``(Y - Q) dnu/dtheta`` for one ``(x, a, y)`` record, ordered ``(psi, alpha)``."""
    x, a, y = record[:3]
    design = design_from_arrays(
        model_template.policy_part, np.atleast_2d(np.asarray(x, dtype=float)), [a], [y], [1.0], model_template.nuisance
    )
    return ml_estfun_design(np.concatenate([np.ravel(psi), np.ravel(alpha)]), design, family)[0]
