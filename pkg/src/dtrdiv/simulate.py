"""Single-stage simulation scenarios, a two-stage test scenario and the replication harness."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import HarnessError
from .estimators.fitting import FitConfig, fit_beta_mde, fit_gamma_mde, fit_ml
from .models import FeatureMaps, LinearBasis, ModelQFunction, NuisanceComponent, PolicyComponent
from .qcore import ActionSet, StageData, TrajectoryDataset

SCENARIOS = ("correct", "misspecified", "custom")
METHOD_NAMES = {"gamma": "gamma_mde", "beta": "beta_mde", "ml": "ml"}
FAILURE_LIMIT = 0.2
ACTIONS = ActionSet((1, 2, 3))


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "correct"
    n: int = 500
    reps: int = 300
    gamma: float = -1.5
    beta: float = -1.5
    seed: int = 0
    covariate_sd: float = 0.5
    methods: tuple = ("gamma", "beta")
    psi: tuple = (2.0, -1.0)
    alpha: tuple = (-1.0, -2.0)
    restarts: int = 5
    nuisance: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n < 1 or self.reps < 1:
            raise ValueError("n and reps must be positive")
        if not self.covariate_sd > 0:
            raise ValueError("covariate_sd must be positive")
        unknown = set(self.methods) - set(METHOD_NAMES)
        if unknown or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {sorted(METHOD_NAMES)}, got {self.methods}")
        if self.scenario == "custom" and self.nuisance is None:
            raise ValueError("the custom scenario needs a nuisance function f(x)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("nuisance")
        out["methods"] = list(self.methods)
        out["psi"], out["alpha"] = list(self.psi), list(self.alpha)
        return out


def true_nuisance(config: ScenarioConfig, x: np.ndarray) -> np.ndarray:
    """Log of the action-free factor of the true Q-function."""
    if config.scenario == "correct":
        return config.alpha[0] * x + config.alpha[1]
    if config.scenario == "misspecified":
        return -((x - 1.0) ** 2)
    return np.asarray(config.nuisance(x), dtype=float)


def true_q(config: ScenarioConfig, x, a) -> np.ndarray:
    x, a = np.asarray(x, dtype=float), np.asarray(a, dtype=float)
    psi1, psi0 = config.psi
    return np.exp(true_nuisance(config, x) + psi1 * x * a + psi0 * a)


def _generate(config: ScenarioConfig, rep_seed: int) -> TrajectoryDataset:
    rng = np.random.default_rng(rep_seed)
    x = rng.normal(1.0, config.covariate_sd, size=config.n)
    a = rng.integers(1, ACTIONS.m + 1, size=config.n)
    y = rng.exponential(true_q(config, x, a))
    return TrajectoryDataset.single_stage(x[:, None], a, y, np.full(config.n, 1.0 / ACTIONS.m), ACTIONS)


def generate_correct(config: ScenarioConfig, rep_seed: int) -> TrajectoryDataset:
    """X ~ N(1, sd), A uniform on {1, 2, 3}, Y ~ Exponential(mean Q) with a log-linear nuisance."""
    return _generate(ScenarioConfig(**{**_fields(config), "scenario": "correct"}), rep_seed)


def generate_misspecified(config: ScenarioConfig, rep_seed: int) -> TrajectoryDataset:
    """As :func:`generate_correct` but with the nuisance factor ``exp{-(x - 1)^2}``."""
    return _generate(ScenarioConfig(**{**_fields(config), "scenario": "misspecified"}), rep_seed)


def generate(config: ScenarioConfig, rep_seed: int) -> TrajectoryDataset:
    return _generate(config, rep_seed)


def _fields(config: ScenarioConfig) -> dict:
    return {k: getattr(config, k) for k in config.__dataclass_fields__}


def policy_template() -> PolicyComponent:
    """``g(x, a) = psi1 x a + psi0 a`` with zero parameters."""
    return PolicyComponent.zeros(FeatureMaps.linear_numeric_action(), 1, ACTIONS)


def working_model() -> ModelQFunction:
    """Working model ``exp{alpha1 x + alpha0 + psi1 x a + psi0 a}`` with zero parameters."""
    return ModelQFunction(NuisanceComponent("parametric_linear", np.zeros(2), LinearBasis()), policy_template())


# ---------------------------------------------------------------------------
# two-stage scenario


@dataclass(frozen=True)
class TwoStageTruth:
    psi1: tuple = (1.0, -0.5)
    psi2: tuple = (3.0, -2.25)
    c1: float = 0.0
    carry: float = -1.0
    f2: tuple = (0.0, -6.0)
    x2_sd: float = 0.25

    def g1(self, x1, a1):
        return np.asarray(a1) * (self.psi1[0] * np.asarray(x1) + self.psi1[1])

    def g2(self, x2, a2):
        return np.asarray(a2) * (self.psi2[0] * np.asarray(x2) + self.psi2[1])

    def oracle_stage1(self, x1) -> np.ndarray:
        return _argmax_actions(lambda a: self.g1(x1, a))

    def oracle_stage2(self, x2) -> np.ndarray:
        return _argmax_actions(lambda a: self.g2(x2, a))


def _argmax_actions(g) -> np.ndarray:
    values = np.stack([g(a) for a in ACTIONS.labels], axis=-1)
    return np.asarray(ACTIONS.labels)[np.argmax(values, axis=-1)]


def generate_two_stage(n: int, seed: int, truth: TwoStageTruth = TwoStageTruth()):
    """Two-stage trajectories whose stagewise Q-functions are exactly multiplicative.

    ``X1 ~ N(1, 0.5)``, ``X2 = 0.5 + 0.5 X1 + x2_sd e`` (independent of ``A1``),
    actions uniform. ``Y1`` has mean ``exp{c1 + g1}`` and ``Y2`` mean
    ``exp{g1 + carry X1 + f2(X2) + g2}``, so the optimal continuation value is
    a covariate-only factor times ``exp{g1}`` and the optimal stage-1 action
    maximizes ``g1``. The default ``f2`` tilts against ``g2`` so the stage-2
    outcome scale stays comparable across actions.
    """
    rng = np.random.default_rng(seed)
    x1 = rng.normal(1.0, 0.5, n)
    a1 = rng.integers(1, 4, n)
    y1 = rng.exponential(np.exp(truth.c1 + truth.g1(x1, a1)))
    x2 = 0.5 + 0.5 * x1 + truth.x2_sd * rng.normal(size=n)
    a2 = rng.integers(1, 4, n)
    log_q2 = truth.g1(x1, a1) + truth.carry * x1 + truth.f2[0] + truth.f2[1] * x2 + truth.g2(x2, a2)
    y2 = rng.exponential(np.exp(log_q2))
    p = np.full(n, 1.0 / 3.0)
    stages = (StageData(x1[:, None], a1, y1, p), StageData(x2[:, None], a2, y2, p))
    return TrajectoryDataset(stages, ACTIONS)


def two_stage_templates() -> list:
    """Stage templates on histories ``(x1)`` and ``(x1, a1, x2)``."""
    pc1 = PolicyComponent.zeros(FeatureMaps.linear_numeric_action(), 1, ACTIONS)
    stage1 = ModelQFunction(NuisanceComponent("parametric_linear", np.zeros(2), LinearBasis()), pc1)
    pc2 = PolicyComponent.zeros(FeatureMaps.linear_numeric_action([2]), 1, ACTIONS)
    stage2 = ModelQFunction(NuisanceComponent("parametric_linear", np.zeros(5), _Stage2Basis()), pc2)
    return [stage1, stage2]


class _Stage2Basis:
    """``(x1, x2, x1 a1, a1, 1)`` on the history ``(x1, a1, x2)``."""

    vectorized = True

    def __call__(self, H):
        H = np.asarray(H, dtype=float)
        x1, a1, x2 = H[..., 0], H[..., 1], H[..., 2]
        return np.stack([x1, x2, x1 * a1, a1, np.ones_like(x1)], axis=-1)


# ---------------------------------------------------------------------------
# replications


@dataclass
class ReplicationReport:
    method: str
    truth: np.ndarray
    per_rep_estimates: np.ndarray
    converged: np.ndarray

    @property
    def failures(self) -> int:
        return int(np.sum(~self.converged))

    @property
    def ok(self) -> np.ndarray:
        return self.per_rep_estimates[self.converged]

    @property
    def mean(self) -> np.ndarray:
        ok = self.ok
        return ok.mean(axis=0) if ok.size else np.full(self.truth.size, np.nan)

    @property
    def rmse(self) -> np.ndarray:
        ok = self.ok
        return np.sqrt(((ok - self.truth) ** 2).mean(axis=0)) if ok.size else np.full(self.truth.size, np.nan)

    def to_dict(self) -> dict:
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "method": self.method,
            "mean": [clean(v) for v in self.mean],
            "rmse": [clean(v) for v in self.rmse],
            "failures": self.failures,
            "replications": int(self.converged.size),
            "per_rep_estimates": [[clean(v) for v in row] for row in self.per_rep_estimates],
            "converged": [bool(c) for c in self.converged],
        }


def _fit_one(config: ScenarioConfig, rep: int) -> dict:
    rep_seed = config.seed + rep
    data = generate(config, rep_seed)
    out = {}
    for name in config.methods:
        method = METHOD_NAMES[name]
        if method == "gamma_mde":
            fc = FitConfig(method, config.gamma, restarts=config.restarts, seed=rep_seed)
            res = fit_gamma_mde(data, policy_template(), fc)
        elif method == "beta_mde":
            fc = FitConfig(method, config.beta, restarts=config.restarts, seed=rep_seed)
            res = fit_beta_mde(data, working_model(), fc)
        else:
            fc = FitConfig(method, 0.0, restarts=config.restarts, seed=rep_seed)
            res = fit_ml(data, working_model(), fc)
        out[method] = (np.asarray(res.psi_hat, dtype=float), bool(res.converged))
    return out


def worker_count() -> int:
    env = os.environ.get("DTR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DTR_THREADS must be a positive integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_replications(config: ScenarioConfig, workers: Optional[int] = None) -> dict:
    """Fit every configured method on ``reps`` datasets seeded ``seed + rep``.

    Returns ``{method: ReplicationReport}``. Raises :class:`HarnessError`
    (carrying the reports) when more than 20% of any method's fits fail.
    """
    workers = worker_count() if workers is None else max(1, int(workers))
    reps = range(config.reps)
    if workers == 1 or config.reps == 1:
        rows = [_fit_one(config, r) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, config.reps)) as pool:
            rows = list(pool.map(_fit_one, [config] * config.reps, reps))
    truth = np.asarray(config.psi, dtype=float)
    reports = {}
    for name in config.methods:
        method = METHOD_NAMES[name]
        est = np.vstack([row[method][0] for row in rows])
        conv = np.array([row[method][1] for row in rows], dtype=bool)
        reports[method] = ReplicationReport(method, truth, est, conv)
    bad = [m for m, r in reports.items() if r.failures > FAILURE_LIMIT * config.reps]
    if bad:
        detail = ", ".join(f"{m}: {reports[m].failures}/{config.reps}" for m in bad)
        raise HarnessError(f"more than {FAILURE_LIMIT:.0%} of fits failed ({detail})", reports)
    return reports


def report_to_json(config: ScenarioConfig, reports: dict, error: Optional[str] = None) -> str:
    payload = {"config": config.to_dict(), "methods": {m: r.to_dict() for m, r in reports.items()}}
    if error:
        payload["error"] = error
    return json.dumps(payload, indent=2)


def report_to_csv(reports: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "mean_psi1", "mean_psi0", "rmse_psi1", "rmse_psi0"])
    for m, r in reports.items():
        writer.writerow([m] + [repr(float(v)) for v in (*r.mean, *r.rmse)])
    return buf.getvalue()
