"""Multiplicative Q-models ``Q(x, a) = exp{f(x) + g(x, a, psi)}``.

The policy part is linear in its parameters,

    g(x, a, psi) = psi0 . s0(a) + s1(a)' Psi1 t(x),

and is flattened as ``theta = (vec(Psi1), psi0)`` (row-major ``Psi1``). With
the default scalar features this gives ``theta = (psi1, psi0)``, the order in
which results are reported.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EvaluationError, StructuralError
from .qcore import ActionSet, TabularQFunction, greedy_policy


def _vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=float))


class ColumnSelect:
    """``t(x) = x[cols]``; works on single vectors and on row-stacked matrices."""

    vectorized = True

    def __init__(self, cols=None):
        self.cols = None if cols is None else [int(c) for c in np.atleast_1d(cols)]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.cols is None else x[..., self.cols]

    def __repr__(self):
        return f"ColumnSelect({self.cols})"


@dataclass(frozen=True)
class FeatureMaps:
    """Feature maps ``s0(a)``, ``s1(a)`` and ``t(x)`` of the linear policy model."""

    s0: Callable
    s1: Callable
    t: Callable
    name: str = "custom"

    def s0_matrix(self, actions: ActionSet) -> np.ndarray:
        return np.vstack([_vec(self.s0(a)) for a in actions])

    def s1_matrix(self, actions: ActionSet) -> np.ndarray:
        return np.vstack([_vec(self.s1(a)) for a in actions])

    def t_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if getattr(self.t, "vectorized", False):
            out = np.asarray(self.t(X), dtype=float)
            return out if out.ndim == 2 else out[:, None]
        return np.vstack([_vec(self.t(row)) for row in X])

    def action_means(self, actions: ActionSet):
        """``(s0_bar, s1_bar)``, the feature averages over actions."""
        return self.s0_matrix(actions).mean(axis=0), self.s1_matrix(actions).mean(axis=0)

    @classmethod
    def linear_numeric_action(cls, t_columns=None) -> "FeatureMaps":
        """``s0(a) = a``, ``s1(a) = a``, ``t(x) = x[t_columns]`` (all of x by default)."""
        return cls(lambda a: [float(a)], lambda a: [float(a)], ColumnSelect(t_columns), "linear_numeric_action")

    @classmethod
    def treatment_contrasts(cls, actions, t_columns=None) -> "FeatureMaps":
        """Indicator features for every action except the first (reference) one."""
        labels = list(ActionSet(tuple(actions)).labels)

        def dummies(a):
            return [1.0 if a == b else 0.0 for b in labels[1:]]

        return cls(dummies, dummies, ColumnSelect(t_columns), "treatment_contrasts")


FEATURE_PRESETS = ("linear_numeric_action", "treatment_contrasts")


def feature_preset(name: str, actions=(1, 2, 3), t_columns=None) -> FeatureMaps:
    if name == "linear_numeric_action":
        return FeatureMaps.linear_numeric_action(t_columns)
    if name == "treatment_contrasts":
        return FeatureMaps.treatment_contrasts(actions, t_columns)
    raise ValueError(f"unknown feature preset {name!r}; choose from {FEATURE_PRESETS}")


@dataclass(frozen=True)
class PolicyComponent:
    """Linear policy part ``g(x, a, psi)`` with its parameters and features."""

    psi0: np.ndarray
    Psi1: np.ndarray
    features: FeatureMaps
    actions: ActionSet = ActionSet((1, 2, 3))

    def __post_init__(self):
        psi0 = _vec(self.psi0)
        Psi1 = np.atleast_2d(np.asarray(self.Psi1, dtype=float))
        k0 = self.features.s0_matrix(self.actions).shape[1]
        k1 = self.features.s1_matrix(self.actions).shape[1]
        if psi0.shape != (k0,):
            raise StructuralError(f"psi0 must have length dim(s0) = {k0}, got {psi0.shape}")
        if Psi1.shape[0] != k1:
            raise StructuralError(f"Psi1 must have dim(s1) = {k1} rows, got {Psi1.shape}")
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "Psi1", Psi1)

    @classmethod
    def zeros(cls, features: FeatureMaps, d_t: int, actions=ActionSet((1, 2, 3))) -> "PolicyComponent":
        """Template with all-zero parameters; ``d_t`` is the length of ``t(x)``."""
        k0 = features.s0_matrix(actions).shape[1]
        k1 = features.s1_matrix(actions).shape[1]
        return cls(np.zeros(k0), np.zeros((k1, d_t)), features, actions)

    @property
    def n_params(self) -> int:
        return self.Psi1.size + self.psi0.size

    @property
    def theta(self) -> np.ndarray:
        """Flat parameters ``(vec(Psi1), psi0)``."""
        return np.concatenate([self.Psi1.ravel(), self.psi0])

    def with_theta(self, theta) -> "PolicyComponent":
        theta = _vec(theta)
        if theta.shape != (self.n_params,):
            raise StructuralError(f"expected {self.n_params} policy parameters, got {theta.shape}")
        n1 = self.Psi1.size
        return replace(self, Psi1=theta[:n1].reshape(self.Psi1.shape), psi0=theta[n1:])

    def design(self, X) -> np.ndarray:
        """Gradient tensor ``G`` of shape (n, m, n_params): ``g = G @ theta``."""
        T = self.features.t_matrix(X)
        if T.shape[1] != self.Psi1.shape[1]:
            raise StructuralError(f"t(x) has length {T.shape[1]}, Psi1 expects {self.Psi1.shape[1]}")
        S0 = self.features.s0_matrix(self.actions)
        S1 = self.features.s1_matrix(self.actions)
        n, m = T.shape[0], self.actions.m
        inter = np.einsum("aj,nk->najk", S1, T).reshape(n, m, -1)
        main = np.broadcast_to(S0, (n, m, S0.shape[1]))
        return np.concatenate([inter, main], axis=2)

    def g_matrix(self, X) -> np.ndarray:
        """``g(x_i, a, psi)`` for every row of ``X`` and every action, shape (n, m)."""
        return self.design(X) @ self.theta


def eval_g(pc: PolicyComponent, x, a) -> float:
    """``psi0 . s0(a) + s1(a)' Psi1 t(x)``."""
    x = _vec(x)
    s0 = _vec(pc.features.s0(a))
    s1 = _vec(pc.features.s1(a))
    t = pc.features.t_matrix(x[None, :])[0]
    if s0.shape != pc.psi0.shape or s1.shape[0] != pc.Psi1.shape[0] or t.shape[0] != pc.Psi1.shape[1]:
        raise StructuralError("feature dimensions do not conform to the policy parameters")
    return float(pc.psi0 @ s0 + s1 @ pc.Psi1 @ t)


def eval_g_gradient(pc: PolicyComponent, x, a) -> np.ndarray:
    """``dg/dtheta`` in the flat order ``(vec(Psi1), psi0)``; independent of ``psi``."""
    x = _vec(x)
    s0 = _vec(pc.features.s0(a))
    s1 = _vec(pc.features.s1(a))
    t = pc.features.t_matrix(x[None, :])[0]
    if s0.shape != pc.psi0.shape or s1.shape[0] != pc.Psi1.shape[0] or t.shape[0] != pc.Psi1.shape[1]:
        raise StructuralError("feature dimensions do not conform to the policy parameters")
    return np.concatenate([np.outer(s1, t).ravel(), s0])


# ---------------------------------------------------------------------------
# nuisance component


class LinearBasis:
    """Basis ``(x[cols]..., 1)`` so that ``alpha . basis(x) = alpha1 x + alpha0`` for scalar x."""

    vectorized = True

    def __init__(self, cols=None, intercept=True):
        self.cols = None if cols is None else [int(c) for c in np.atleast_1d(cols)]
        self.intercept = intercept

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        Z = X if self.cols is None else X[..., self.cols]
        if self.intercept:
            Z = np.concatenate([Z, np.ones(Z.shape[:-1] + (1,))], axis=-1)
        return Z


NUISANCE_KINDS = ("parametric_linear", "fixed_function", "absent")


@dataclass(frozen=True)
class NuisanceComponent:
    """Action-free part ``f(x)`` of the log Q-model.

    ``parametric_linear`` evaluates ``alpha . basis(x)``; ``fixed_function``
    calls ``func(x)``; ``absent`` is identically zero.
    """

    kind: str = "absent"
    alpha: Optional[np.ndarray] = None
    basis: Optional[Callable] = None
    func: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in NUISANCE_KINDS:
            raise ValueError(f"nuisance kind must be one of {NUISANCE_KINDS}, got {self.kind!r}")
        if self.kind == "parametric_linear":
            if self.alpha is None:
                raise StructuralError("parametric nuisance needs alpha")
            object.__setattr__(self, "alpha", _vec(self.alpha))
            if self.basis is None:
                object.__setattr__(self, "basis", LinearBasis())
        if self.kind == "fixed_function" and self.func is None:
            raise StructuralError("fixed_function nuisance needs func")

    @classmethod
    def linear(cls, alpha, cols=None) -> "NuisanceComponent":
        return cls("parametric_linear", alpha=alpha, basis=LinearBasis(cols))

    @property
    def n_params(self) -> int:
        return 0 if self.kind != "parametric_linear" else self.alpha.size

    def with_alpha(self, alpha) -> "NuisanceComponent":
        if self.kind != "parametric_linear":
            raise StructuralError("only a parametric nuisance has parameters")
        alpha = _vec(alpha)
        if alpha.shape != self.alpha.shape:
            raise StructuralError(f"expected {self.alpha.size} nuisance parameters, got {alpha.shape}")
        return replace(self, alpha=alpha)

    def basis_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if getattr(self.basis, "vectorized", False):
            B = np.asarray(self.basis(X), dtype=float)
        else:
            B = np.vstack([_vec(self.basis(row)) for row in X])
        if B.shape[1] != self.alpha.size:
            raise StructuralError(f"basis has {B.shape[1]} columns, alpha has {self.alpha.size}")
        return B

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.kind == "absent":
            return np.zeros(X.shape[0])
        if self.kind == "fixed_function":
            return np.array([float(self.func(row)) for row in X])
        return self.basis_matrix(X) @ self.alpha


@dataclass(frozen=True)
class ModelQFunction:
    """``Q(x, a) = exp{f(x) + g(x, a, psi)}``."""

    nuisance: NuisanceComponent
    policy_part: PolicyComponent

    @property
    def actions(self) -> ActionSet:
        return self.policy_part.actions

    @property
    def theta(self) -> np.ndarray:
        """All parameters in fitting order ``(policy theta, alpha)``."""
        alpha = self.nuisance.alpha if self.nuisance.kind == "parametric_linear" else np.zeros(0)
        return np.concatenate([self.policy_part.theta, alpha])

    def with_theta(self, theta) -> "ModelQFunction":
        theta = _vec(theta)
        k = self.policy_part.n_params
        nuisance = self.nuisance
        if nuisance.kind == "parametric_linear":
            nuisance = nuisance.with_alpha(theta[k:])
        elif theta.size != k:
            raise StructuralError(f"expected {k} parameters, got {theta.size}")
        return ModelQFunction(nuisance, self.policy_part.with_theta(theta[:k]))

    def log_q_matrix(self, X) -> np.ndarray:
        return self.nuisance.values(X)[:, None] + self.policy_part.g_matrix(X)

    def qvalues_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        with np.errstate(over="ignore"):
            return np.exp(self.log_q_matrix(X))

    def qvalues(self, x) -> np.ndarray:
        return self.qvalues_batch(_vec(x)[None, :])[0]

    def greedy(self, x) -> int:
        return greedy_policy(self, x)


def to_tabular(model: ModelQFunction, grid: Sequence) -> TabularQFunction:
    """Tabulate ``exp{f + g}`` on ``grid``, a sequence of ``(x, weight)`` pairs."""
    xs = np.vstack([_vec(x) for x, _ in grid])
    ws = np.array([float(w) for _, w in grid])
    log_q = model.log_q_matrix(xs)
    with np.errstate(over="ignore"):
        q = np.exp(log_q)
    bad = ~np.isfinite(q) | (q <= 0)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise EvaluationError(
            f"Q-value overflow/underflow at x={xs[i].tolist()}, action={model.actions.labels[j]} "
            f"(log Q = {log_q[i, j]!r})"
        )
    return TabularQFunction(model.actions, xs, ws, q)


def empirical_grid(X) -> list:
    """Uniformly weighted grid over the rows of ``X`` (empirical covariate law)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    return [(row, 1.0 / n) for row in X]


def jacobian_condition_warning(J, threshold=1e8) -> Optional[str]:
    """Diagnostic text when ``J`` is numerically rank deficient, else ``None``."""
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > threshold:
        msg = f"estimating-function Jacobian is near singular (condition number {cond:.3g})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return msg
    return None


# ---------------------------------------------------------------------------
# model files


def policy_to_dict(pc: PolicyComponent) -> dict:
    return {"psi0": pc.psi0.tolist(), "Psi1": pc.Psi1.tolist(), "features": pc.features.name,
            "actions": list(pc.actions.labels)}


def model_to_dict(model: ModelQFunction) -> dict:
    out = policy_to_dict(model.policy_part)
    nz = model.nuisance
    if nz.kind == "parametric_linear":
        cols = getattr(nz.basis, "cols", None)
        out["nuisance"] = {"kind": nz.kind, "alpha": nz.alpha.tolist(), "basis": "linear", "cols": cols}
    else:
        out["nuisance"] = {"kind": nz.kind}
    return out


def model_from_dict(payload: dict, nuisance_func: Optional[Callable] = None) -> ModelQFunction:
    """Inverse of :func:`model_to_dict`; fixed-function nuisances need ``nuisance_func``."""
    actions = ActionSet(tuple(payload.get("actions", (1, 2, 3))))
    features = feature_preset(payload.get("features", "linear_numeric_action"), actions)
    pc = PolicyComponent(payload["psi0"], payload["Psi1"], features, actions)
    nz = payload.get("nuisance", {"kind": "absent"})
    kind = nz.get("kind", "absent")
    if kind == "parametric_linear":
        nuisance = NuisanceComponent.linear(nz["alpha"], nz.get("cols"))
    elif kind == "fixed_function":
        nuisance = NuisanceComponent("fixed_function", func=nuisance_func)
    else:
        nuisance = NuisanceComponent()
    return ModelQFunction(nuisance, pc)


def save_model(model: ModelQFunction, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path, nuisance_func=None) -> ModelQFunction:
    return model_from_dict(json.loads(Path(path).read_text()), nuisance_func)
