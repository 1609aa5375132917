"""Divergences on the space of Q-functions.

All functions take two :class:`~dtrdiv.qcore.TabularQFunction` objects on the
same grid; the expectation over covariates is the weighted grid sum. For
divergences between fitted models on data, tabulate the models on the
empirical covariate grid first (:func:`dtrdiv.models.empirical_grid`).

Power computations run in log-space. The gamma-power divergence is evaluated
directly as ``sum_a q0 * (V(R1) - V(R0))`` with an ``expm1`` difference rather
than as a difference of two entropies, which keeps it accurate near the
singular indices and for very large ``gamma``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import ConsistencyError, DegenerateInstanceError, SingularIndexError, StructuralError
from .qcore import Policy, TabularQFunction, greedy_policy, value_expected

CLAMP_EPS = 1e-12
FAMILIES = ("gamma_power", "beta_power", "ekl", "nkl")


def _pair(q0: TabularQFunction, q1: TabularQFunction):
    if not q0.same_grid(q1):
        raise StructuralError("divergences need Q-functions on the same grid and action set")
    return np.log(q0.q), np.log(q1.q), q0.weights


def _check_gamma(gamma):
    if gamma == 0:
        raise SingularIndexError("gamma = 0 is singular; use nkl_divergence (its limit)")
    if gamma == -1:
        raise SingularIndexError("gamma = -1 is singular; use gm_limit_divergence (its limit)")


def _clamp(value, scale):
    if value >= 0:
        return value
    if value >= -CLAMP_EPS * max(1.0, abs(scale)):
        return 0.0
    raise ConsistencyError(f"divergence evaluated to {value!r}, below rounding tolerance")


def _gamma_parts(lq0, lq1, gamma, log_scale=0.0):
    """Per-point (cross entropy, diagonal entropy, divergence) for index ``gamma``.

    ``log_scale`` multiplies every quantity by ``exp(log_scale)``.
    """
    k = gamma / (1.0 + gamma)
    lr0 = (1.0 + gamma) * lq0 - logsumexp((1.0 + gamma) * lq0, axis=1, keepdims=True)
    lr1 = (1.0 + gamma) * lq1 - logsumexp((1.0 + gamma) * lq1, axis=1, keepdims=True)
    e0 = lq0 + k * lr0 + log_scale
    e1 = lq0 + k * lr1 + log_scale
    cross = -np.exp(logsumexp(e1, axis=1)) / gamma
    diag = -np.exp(logsumexp(e0, axis=1)) / gamma
    delta = e1 - e0
    with np.errstate(over="ignore", invalid="ignore"):
        direct = np.exp(e0) * np.expm1(delta)
        fallback = np.exp(e1) - np.exp(e0)
    terms = np.where(delta > 700.0, fallback, direct)
    div = -terms.sum(axis=1) / gamma
    return cross, diag, div


def gamma_cross_entropy(q0: TabularQFunction, q1: TabularQFunction, gamma: float) -> float:
    """Gamma-power cross entropy ``H_gamma(q0, q1)``."""
    _check_gamma(gamma)
    lq0, lq1, w = _pair(q0, q1)
    cross, _, _ = _gamma_parts(lq0, lq1, gamma)
    return float(w @ cross)


def gamma_divergence(q0: TabularQFunction, q1: TabularQFunction, gamma: float) -> float:
    """Gamma-power divergence ``H_gamma(q0, q1) - H_gamma(q0, q0)``.

    Vanishes exactly when ``q1 = eta(x) * q0``; nonnegative for every real
    ``gamma`` other than the singular values 0 and -1.
    """
    _check_gamma(gamma)
    lq0, lq1, w = _pair(q0, q1)
    _, diag, div = _gamma_parts(lq0, lq1, gamma)
    return _clamp(float(w @ div), w @ diag)


def scaled_gamma_divergence(q0: TabularQFunction, q1: TabularQFunction, gamma: float) -> float:
    """``m**(-1/(1+gamma)) * D_gamma(q0, q1)``, finite as ``gamma -> -1``.

    This is the normalization under which the geometric-mean limit
    :func:`gm_limit_divergence` is attained.
    """
    _check_gamma(gamma)
    lq0, lq1, w = _pair(q0, q1)
    log_scale = -np.log(q0.actions.m) / (1.0 + gamma)
    _, diag, div = _gamma_parts(lq0, lq1, gamma, log_scale)
    return _clamp(float(w @ div), w @ diag)


def nkl_divergence(q0: TabularQFunction, q1: TabularQFunction) -> float:
    """Normalized KL divergence, the ``gamma -> 0`` limit of the gamma-power divergence."""
    lq0, lq1, w = _pair(q0, q1)
    lp0 = lq0 - logsumexp(lq0, axis=1, keepdims=True)
    lp1 = lq1 - logsumexp(lq1, axis=1, keepdims=True)
    per_point = np.sum(q0.q * (lp0 - lp1), axis=1)
    return _clamp(float(w @ per_point), w @ q0.q.sum(axis=1))


def _nkl_entropies(q0, q1):
    lq0, lq1, w = _pair(q0, q1)
    lp0 = lq0 - logsumexp(lq0, axis=1, keepdims=True)
    lp1 = lq1 - logsumexp(lq1, axis=1, keepdims=True)
    return float(w @ -np.sum(q0.q * lp1, axis=1)), float(w @ -np.sum(q0.q * lp0, axis=1))


def _geometric_mean(lq):
    return np.exp(lq.mean(axis=1))


def gm_limit_divergence(q0: TabularQFunction, q1: TabularQFunction) -> float:
    """Geometric-mean form, the ``gamma -> -1`` limit of the scaled divergence.

    ``E[(1/m) sum_a q0/q1 * GM_q1(X) - GM_q0(X)]`` with ``GM_q = prod_a q**(1/m)``.
    """
    cross, diag = _gm_entropies(q0, q1)
    return _clamp(cross - diag, diag)


def _gm_entropies(q0, q1):
    lq0, lq1, w = _pair(q0, q1)
    cross = np.mean(np.exp(lq0 - lq1), axis=1) * _geometric_mean(lq1)
    return float(w @ cross), float(w @ _geometric_mean(lq0))


def _strict_greedy(q: TabularQFunction, which: str) -> Policy:
    top = np.sort(q.q, axis=1)[:, -2:]
    ties = np.flatnonzero(top[:, 1] - top[:, 0] <= 1e-12 * top[:, 1])
    if ties.size:
        raise DegenerateInstanceError(
            f"{which} has tied maximizers at grid point {q.x[ties[0]].tolist()}; "
            "the large-gamma limit needs a strict argmax"
        )
    return Policy.greedy(q)


def value_gap_limit(q0: TabularQFunction, q1: TabularQFunction, gamma_sequence: Sequence[float]) -> list:
    """Pairs ``gamma * D_gamma(q0, q1)`` with the value gap ``V0(D0) - V0(D1)``.

    ``Vj`` uses the greedy policy of ``qj`` and values are computed under
    ``q0``. The scaled divergence tends to the gap as ``gamma`` grows.

    Returns
    -------
    list of (gamma, scaled divergence, value gap)
    """
    _pair(q0, q1)
    d0 = _strict_greedy(q0, "q0")
    d1 = _strict_greedy(q1, "q1")
    gap = value_expected(q0, d0) - value_expected(q0, d1)
    return [(float(g), float(g) * gamma_divergence(q0, q1, g), gap) for g in gamma_sequence]


def beta_cross_entropy(q0: TabularQFunction, q1: TabularQFunction, beta: float) -> float:
    _check_beta(beta)
    lq0, lq1, w = _pair(q0, q1)
    per_point = np.sum(np.exp((beta + 1) * lq1) / (beta + 1) - np.exp(lq0 + beta * lq1) / beta, axis=1)
    return float(w @ per_point)


def _check_beta(beta):
    if beta == 0:
        raise SingularIndexError("beta = 0 is singular; use ekl_divergence (its limit)")
    if beta == -1:
        raise SingularIndexError("beta = -1 is a singular index of the beta-power divergence")


def beta_divergence(q0: TabularQFunction, q1: TabularQFunction, beta: float) -> float:
    """Beta-power divergence; ``beta = 0`` dispatches to :func:`ekl_divergence`.

    Unlike the gamma-power divergence it separates policy-equivalent
    Q-functions.
    """
    if beta == 0:
        return ekl_divergence(q0, q1)
    _check_beta(beta)
    lq0, lq1, w = _pair(q0, q1)
    delta = lq1 - lq0
    base = np.exp((beta + 1) * lq0)
    terms = base * (np.expm1((beta + 1) * delta) / (beta + 1) - np.expm1(beta * delta) / beta)
    return _clamp(float(w @ terms.sum(axis=1)), w @ base.sum(axis=1))


def ekl_divergence(q0: TabularQFunction, q1: TabularQFunction) -> float:
    """Extended KL divergence ``E[sum_a q0 log(q0/q1) - q0 + q1]``, the beta -> 0 limit."""
    lq0, lq1, w = _pair(q0, q1)
    terms = q0.q * (lq0 - lq1) - q0.q + q1.q
    return _clamp(float(w @ terms.sum(axis=1)), w @ q0.q.sum(axis=1))


def _ekl_entropies(q0, q1):
    lq0, lq1, w = _pair(q0, q1)
    cross = np.sum(q1.q - q0.q * lq1, axis=1)
    diag = np.sum(q0.q - q0.q * lq0, axis=1)
    return float(w @ cross), float(w @ diag)


# ---------------------------------------------------------------------------
# general U-divergence


def _invert_increasing(u, target, start=0.0):
    lo, hi = start - 1.0, start + 1.0
    for _ in range(200):
        if u(lo) < target:
            break
        lo = start - 2.0 * (start - lo)
    for _ in range(200):
        if u(hi) > target:
            break
        hi = start + 2.0 * (hi - start)
    return brentq(lambda t: u(t) - target, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)


def u_cross_entropy(q0, q1, U: Callable, u: Callable, u_inv: Optional[Callable] = None) -> float:
    """``H_U(q0, q1) = E[sum_a U(u^{-1}(q1)) - q0 u^{-1}(q1)]`` for convex increasing ``U``.

    ``u`` is the derivative of ``U``; when ``u_inv`` is not supplied it is
    inverted numerically.
    """
    _pair(q0, q1)
    if u_inv is None:
        inv = np.vectorize(lambda v: _invert_increasing(u, v))
    else:
        inv = u_inv
    xi = inv(q1.q)
    return float(q0.weights @ np.sum(U(xi) - q0.q * xi, axis=1))


def u_divergence(q0, q1, U: Callable, u: Callable, u_inv: Optional[Callable] = None) -> float:
    """``H_U(q0, q1) - H_U(q0, q0)``."""
    cross = u_cross_entropy(q0, q1, U, u, u_inv)
    diag = u_cross_entropy(q0, q0, U, u, u_inv)
    return _clamp(cross - diag, diag)


def beta_power_generator(beta: float):
    """``(U, u, u_inv)`` whose U-divergence is the beta-power divergence."""
    _check_beta(beta)

    def U(t):
        return (1.0 + beta * t) ** ((beta + 1.0) / beta) / (beta + 1.0)

    def u(t):
        return (1.0 + beta * t) ** (1.0 / beta)

    def u_inv(q):
        return (np.power(q, beta) - 1.0) / beta

    return U, u, u_inv


# ---------------------------------------------------------------------------
# harmonic-mean relations at gamma = -2


def harmonic_mean(q: TabularQFunction) -> np.ndarray:
    """Per-point ``HM_q(x) = [m * sum_a 1/q(x, a)]^{-1}``."""
    return 1.0 / (q.actions.m * np.sum(1.0 / q.q, axis=1))


def harmonic_identity_check(q: TabularQFunction):
    """Both sides of ``H_{-2}(q, q) = (m/2) E[HM_q(X)]``."""
    lhs = gamma_cross_entropy(q, q, -2.0)
    rhs = q.actions.m / 2.0 * float(q.weights @ harmonic_mean(q))
    return lhs, rhs


def harmonic_weight_inequality(q0: TabularQFunction, q1: TabularQFunction):
    """Per-point sides of the harmonic-weight inequality behind ``D_{-2} >= 0``.

    Returns arrays ``(lhs, rhs)`` with
    ``lhs = (sum_a q0/q1^2) (sum_a 1/q1)^{-2}`` and ``rhs = (sum_a 1/q0)^{-1}``;
    ``lhs >= rhs`` holds pointwise.
    """
    _pair(q0, q1)
    lhs = np.sum(q0.q / q1.q**2, axis=1) / np.sum(1.0 / q1.q, axis=1) ** 2
    rhs = 1.0 / np.sum(1.0 / q0.q, axis=1)
    return lhs, rhs


def harmonic_divergence_form(q0: TabularQFunction, q1: TabularQFunction) -> float:
    """``D_{-2}(q0, q1)`` written through harmonic means.

    ``(m^2/2) E[sum_a q0/q1^2 HM_q1^2] - (m/2) E[HM_q0]``.
    """
    m = q0.actions.m
    hm1 = harmonic_mean(q1)
    first = m**2 / 2.0 * np.sum(q0.q / q1.q**2, axis=1) * hm1**2
    second = m / 2.0 * harmonic_mean(q0)
    return float(q0.weights @ (first - second))


# ---------------------------------------------------------------------------
# dispatch


@dataclass(frozen=True)
class DivergenceSpec:
    """Divergence family plus power index.

    ``gamma_power`` with index 0 or -1 dispatches to the normalized-KL and
    geometric-mean limit forms; ``beta_power`` with index 0 dispatches to eKL.
    """

    family: str
    index: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "beta_power" and self.index == -1:
            raise SingularIndexError("beta = -1 is a singular index of the beta-power divergence")

    @property
    def resolved(self) -> str:
        """Name of the form actually evaluated."""
        if self.family == "gamma_power" and self.index == 0:
            return "nkl"
        if self.family == "gamma_power" and self.index == -1:
            return "gm_limit"
        if self.family == "beta_power" and self.index == 0:
            return "ekl"
        return self.family

    def entropies(self, q0, q1):
        form = self.resolved
        if form == "gamma_power":
            return gamma_cross_entropy(q0, q1, self.index), gamma_cross_entropy(q0, q0, self.index)
        if form == "beta_power":
            return beta_cross_entropy(q0, q1, self.index), beta_cross_entropy(q0, q0, self.index)
        if form == "nkl":
            return _nkl_entropies(q0, q1)
        if form == "ekl":
            return _ekl_entropies(q0, q1)
        return _gm_entropies(q0, q1)

    def value(self, q0, q1) -> float:
        form = self.resolved
        if form == "gamma_power":
            return gamma_divergence(q0, q1, self.index)
        if form == "beta_power":
            return beta_divergence(q0, q1, self.index)
        if form == "nkl":
            return nkl_divergence(q0, q1)
        if form == "ekl":
            return ekl_divergence(q0, q1)
        return gm_limit_divergence(q0, q1)

    def evaluate(self, q0, q1) -> dict:
        """JSON-ready record ``{family, index, value, lhs_entropy, diag_entropy}``."""
        cross, diag = self.entropies(q0, q1)
        record = {
            "family": self.family,
            "index": None if self.family in ("ekl", "nkl") else float(self.index),
            "value": self.value(q0, q1),
            "lhs_entropy": cross,
            "diag_entropy": diag,
        }
        if self.resolved != self.family:
            record["dispatched_to"] = self.resolved
        return record
