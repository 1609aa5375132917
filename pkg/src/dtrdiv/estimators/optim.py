"""Local minimization with a quasi-Newton main phase and a Newton polish."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

OPTIMIZERS = ("quasi_newton", "nelder_mead")
POLISH_STEPS = 25


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    converged: bool
    iterations: int
    message: str = ""


def numeric_jacobian(func: Callable, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(func(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(func(x + e)) - np.atleast_1d(func(x - e))) / (2 * h)
    return J


def _grad_ok(g, f, tol) -> bool:
    return bool(np.all(np.isfinite(g)) and np.max(np.abs(g), initial=0.0) <= tol * max(1.0, abs(f)))


def _polish(fun, grad, x, tol):
    """Damped Newton steps on a finite-difference Hessian of the analytic gradient."""
    f, g = fun(x), grad(x)
    steps = 0
    for steps in range(1, POLISH_STEPS + 1):
        if _grad_ok(g, f, tol):
            return x, f, g, steps - 1
        H = numeric_jacobian(grad, x, rel_step=1e-5)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
            direction = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            direction = -g
        t = 1.0
        while t > 1e-10:
            x_new = x + t * direction
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * float(g @ direction) + 1e-15 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            break
        x, f, g = x_new, f_new, grad(x_new)
    return x, f, g, steps


def minimize(
    fun: Callable,
    grad: Callable,
    x0,
    optimizer: str = "quasi_newton",
    max_iters: int = 500,
    gradient_tol: float = 1e-8,
) -> OptResult:
    """Minimize ``fun`` from ``x0``.

    Convergence means ``max|grad| <= gradient_tol * max(1, |fun|)`` at the
    returned point. Non-finite losses are mapped to ``inf`` so line searches
    back off from overflow regions.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {optimizer!r}")

    def safe_fun(x):
        v = fun(x)
        return v if np.isfinite(v) else np.inf

    x0 = np.asarray(x0, dtype=float)
    if not np.isfinite(safe_fun(x0)):
        return OptResult(x0, np.inf, np.inf, False, 0, "loss is not finite at the start")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if optimizer == "quasi_newton":
            res = optimize.minimize(safe_fun, x0, jac=grad, method="BFGS",
                                    options={"maxiter": max_iters, "gtol": gradient_tol})
            if not np.isfinite(res.fun) or not np.all(np.isfinite(res.x)):
                res = _nelder_mead(safe_fun, x0, max_iters)
        else:
            res = _nelder_mead(safe_fun, x0, max_iters)
        x, iterations = np.asarray(res.x, dtype=float), int(res.nit)
        if np.isfinite(res.fun):
            x, f, g, extra = _polish(safe_fun, grad, x, gradient_tol)
            iterations += extra
        else:
            f, g = np.inf, np.full_like(x, np.inf)
    converged = np.isfinite(f) and _grad_ok(g, f, gradient_tol)
    gnorm = float(np.max(np.abs(g), initial=0.0)) if np.all(np.isfinite(g)) else np.inf
    message = "" if converged else f"gradient norm {gnorm:.3g} above tolerance after {iterations} iterations"
    return OptResult(x, float(f), gnorm, bool(converged), iterations, message)


def _nelder_mead(fun, x0, max_iters):
    return optimize.minimize(fun, x0, method="Nelder-Mead",
                             options={"maxiter": max(max_iters, 200 * x0.size), "xatol": 1e-10, "fatol": 1e-14})
