"""Q-functions, policies, trajectory data and exact value computations.

Tabular Q-functions live on a finite covariate grid with a probability weight
per grid point; they are the ground truth used to check every divergence
identity exactly. Trajectory datasets are stored column-wise per stage so the
estimators can work on whole arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EvaluationError, InvalidRecordError, StructuralError

WEIGHT_SUM_TOL = 1e-8
EQUIVALENCE_RTOL = 1e-9


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ActionSet:
    """Ordered finite set of integer action labels."""

    labels: tuple

    def __post_init__(self):
        labels = tuple(int(a) for a in self.labels)
        if len(labels) < 2:
            raise StructuralError("an action set needs at least two actions")
        if len(set(labels)) != len(labels):
            raise StructuralError(f"action labels must be distinct, got {labels}")
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self.labels.index(int(label))
        except ValueError:
            raise StructuralError(f"action {label!r} not in {self.labels}") from None

    def indices(self, labels) -> np.ndarray:
        """Vectorized :meth:`index` for an array of labels."""
        labels = np.asarray(labels)
        lookup = {a: i for i, a in enumerate(self.labels)}
        try:
            return np.array([lookup[int(a)] for a in labels.ravel()], dtype=int).reshape(labels.shape)
        except KeyError as exc:
            raise StructuralError(f"action {exc.args[0]} not in {self.labels}") from None

    def as_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=float)

    def __iter__(self):
        return iter(self.labels)

    def __len__(self):
        return self.m


@dataclass(frozen=True)
class TabularQFunction:
    """Exact Q-function on a weighted covariate grid.

    Parameters
    ----------
    actions : ActionSet
    x : array of shape (N, d)
        Grid points.
    weights : array of shape (N,)
        Covariate distribution on the grid; must sum to one.
    q : array of shape (N, m)
        Strictly positive Q-values, columns ordered as ``actions.labels``.
    """

    actions: ActionSet
    x: np.ndarray
    weights: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.array(self.x, dtype=float))
        if x.ndim == 1:
            x = x[:, None]
        w = np.array(self.weights, dtype=float)
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape != (x.shape[0], self.actions.m):
            raise StructuralError(
                f"q must have shape ({x.shape[0]}, {self.actions.m}), got {q.shape}"
            )
        if w.shape != (x.shape[0],):
            raise StructuralError(f"weights must have shape ({x.shape[0]},), got {w.shape}")
        if not np.all(np.isfinite(x)):
            raise StructuralError("grid points must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise StructuralError(f"weights must be nonnegative and sum to 1, got sum {w.sum()!r}")
        if not np.all(np.isfinite(q)) or np.any(q <= 0):
            raise StructuralError("tabular q-values must be finite and strictly positive")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "q", _frozen(q))

    @classmethod
    def from_points(cls, actions, points: Iterable) -> "TabularQFunction":
        """Build from ``(x, weight, {action: value})`` triples."""
        actions = actions if isinstance(actions, ActionSet) else ActionSet(tuple(actions))
        xs, ws, qs = [], [], []
        for x, w, qmap in points:
            missing = set(actions.labels) - {int(k) for k in qmap}
            if missing:
                raise StructuralError(f"point {x!r} lacks q-values for actions {sorted(missing)}")
            lookup = {int(k): float(v) for k, v in qmap.items()}
            xs.append(np.atleast_1d(np.asarray(x, dtype=float)))
            ws.append(float(w))
            qs.append([lookup[a] for a in actions.labels])
        return cls(actions, np.vstack(xs), np.array(ws), np.array(qs))

    @property
    def n_points(self) -> int:
        return self.x.shape[0]

    @property
    def log_q(self) -> np.ndarray:
        return np.log(self.q)

    def point_index(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        hits = np.flatnonzero(np.all(self.x == x, axis=1))
        if hits.size == 0:
            raise StructuralError(f"covariate {x.tolist()} is not a grid point")
        return int(hits[0])

    def qvalues(self, x) -> np.ndarray:
        """Q-values over all actions at grid point ``x``."""
        return self.q[self.point_index(x)]

    def value(self, x, a) -> float:
        return float(self.qvalues(x)[self.actions.index(a)])

    def scaled(self, eta) -> "TabularQFunction":
        """Policy-equivalent copy ``eta(x) * q(x, a)`` for per-point factors ``eta``."""
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (self.n_points,))
        return TabularQFunction(self.actions, self.x, self.weights, self.q * eta[:, None])

    def same_grid(self, other: "TabularQFunction") -> bool:
        return (
            self.actions == other.actions
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.allclose(self.weights, other.weights, rtol=0, atol=1e-12)
        )

    def to_dict(self) -> dict:
        return {
            "actions": list(self.actions.labels),
            "points": [
                {
                    "x": self.x[j].tolist(),
                    "weight": float(self.weights[j]),
                    "q": {str(a): float(v) for a, v in zip(self.actions.labels, self.q[j])},
                }
                for j in range(self.n_points)
            ],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TabularQFunction":
        try:
            actions = ActionSet(tuple(payload["actions"]))
            points = [(p["x"], p["weight"], p["q"]) for p in payload["points"]]
        except (KeyError, TypeError) as exc:
            raise StructuralError(f"malformed tabular Q-function payload: {exc}") from None
        return cls.from_points(actions, points)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "TabularQFunction":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Policy:
    """Deterministic policy: covariate (or history) vector -> action label."""

    decide: Callable[[np.ndarray], int]
    actions: Optional[ActionSet] = None

    def __call__(self, x) -> int:
        a = int(self.decide(np.atleast_1d(np.asarray(x, dtype=float))))
        if self.actions is not None and a not in self.actions.labels:
            raise StructuralError(f"policy returned {a}, not in {self.actions.labels}")
        return a

    def batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        vectorized = getattr(self.decide, "batch", None)
        if vectorized is not None:
            return np.asarray(vectorized(X), dtype=int)
        return np.array([self(row) for row in X], dtype=int)

    @classmethod
    def constant(cls, a, actions=None) -> "Policy":
        return cls(lambda x: a, actions)

    @classmethod
    def greedy(cls, q) -> "Policy":
        decide = _GreedyRule(q)
        return cls(decide, q.actions)


class _GreedyRule:
    def __init__(self, q):
        self.q = q

    def __call__(self, x):
        return greedy_policy(self.q, x)

    def batch(self, X):
        # argmax is invariant under exp, so prefer log-scale values when offered
        batch_q = getattr(self.q, "log_q_matrix", None) or getattr(self.q, "qvalues_batch", None)
        if batch_q is None:
            return np.array([greedy_policy(self.q, row) for row in X], dtype=int)
        values = batch_q(X)
        _check_finite(values, X, self.q.actions)
        # argmax returns the first maximizer; labels sorted so ties go to the smallest label
        order = np.argsort(self.q.actions.labels)
        labels = np.array(self.q.actions.labels)[order]
        return labels[np.argmax(values[:, order], axis=1)]


def _check_finite(values, X, actions):
    bad = ~np.isfinite(values)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        point = np.atleast_1d(X[i] if np.ndim(X) > 1 else X).tolist()
        raise EvaluationError(f"non-finite Q-value at x={point}, action={actions.labels[j]}")


def greedy_policy(q, x) -> int:
    """Action maximizing ``q(x, .)``; ties go to the smallest action label.

    ``q`` is any object exposing ``actions`` and ``qvalues(x)``, i.e. a
    :class:`TabularQFunction` (``x`` must be a grid point) or a model Q-function.
    """
    log_q = getattr(q, "log_q_matrix", None)
    if log_q is not None:
        values = np.asarray(log_q(np.atleast_1d(np.asarray(x, dtype=float))[None, :])[0], dtype=float)
    else:
        values = np.asarray(q.qvalues(x), dtype=float)
    if not np.all(np.isfinite(values)):
        j = int(np.flatnonzero(~np.isfinite(values))[0])
        raise EvaluationError(
            f"non-finite Q-value at x={np.atleast_1d(x).tolist()}, action={q.actions.labels[j]}"
        )
    best = values.max()
    candidates = [a for a, v in zip(q.actions.labels, values) if v == best]
    return min(candidates)


def policy_equivalent(q0: TabularQFunction, q1: TabularQFunction, tol: float = EQUIVALENCE_RTOL) -> bool:
    """True iff ``q1(x, .) / q0(x, .)`` is constant in the action at every grid point."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    if not q0.same_grid(q1):
        raise StructuralError("policy equivalence needs Q-functions on the same grid and action set")
    log_ratio = np.log(q1.q) - np.log(q0.q)
    spread = log_ratio.max(axis=1) - log_ratio.min(axis=1)
    # relative tolerance on the ratio == absolute tolerance on its log, to first order
    return bool(np.all(spread <= tol))


def value_expected(q: TabularQFunction, d: Policy) -> float:
    """Exact value ``E[q(X, d(X))]`` of policy ``d`` under the grid distribution."""
    chosen = np.array([q.actions.index(d(x)) for x in q.x])
    return float(np.sum(q.weights * q.q[np.arange(q.n_points), chosen]))


# ---------------------------------------------------------------------------
# trajectory data


@dataclass(frozen=True)
class Stage:
    x: np.ndarray
    a: int
    y: float
    propensity: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(np.atleast_1d(self.x)))
        if not np.all(np.isfinite(self.x)):
            raise InvalidRecordError("covariates must be finite")
        if not self.y >= 0:
            raise InvalidRecordError(f"outcome must be nonnegative, got {self.y!r}")
        if self.propensity is not None and not 0 < self.propensity <= 1:
            raise InvalidRecordError(f"propensity must lie in (0, 1], got {self.propensity!r}")


@dataclass(frozen=True)
class Trajectory:
    id: object
    stages: tuple

    def __post_init__(self):
        if len(self.stages) < 1:
            raise InvalidRecordError(f"trajectory {self.id!r} has no stages")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def T(self) -> int:
        return len(self.stages)

    def history(self, t: int) -> np.ndarray:
        """Flat history (x_1, a_1, ..., x_{t-1}, a_{t-1}, x_t); ``t`` is 1-based."""
        parts = []
        for s in self.stages[: t - 1]:
            parts.extend([s.x, [float(s.a)]])
        parts.append(self.stages[t - 1].x)
        return np.concatenate(parts)


@dataclass(frozen=True)
class StageData:
    """Column arrays for one stage: x (n, d), a (n,), y (n,), p (n,) or None."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    p: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(self.a)
        if not np.all(np.asarray(a, dtype=float) == np.round(np.asarray(a, dtype=float))):
            raise InvalidRecordError("action labels must be integers")
        a = np.asarray(a, dtype=int)
        y = np.array(self.y, dtype=float)
        n = x.shape[0]
        if a.shape != (n,) or y.shape != (n,):
            raise StructuralError("stage columns must have a common length")
        if not np.all(np.isfinite(x)):
            raise InvalidRecordError("covariates must be finite")
        bad = np.flatnonzero(~(y >= 0))
        if bad.size:
            raise InvalidRecordError(f"record {bad[0]}: outcome must be nonnegative, got {y[bad[0]]!r}")
        for name, arr in (("x", x), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        if self.p is not None:
            p = np.array(self.p, dtype=float)
            if p.shape != (n,):
                raise StructuralError("propensity column must match the record count")
            bad = np.flatnonzero(~((p > 0) & (p <= 1)))
            if bad.size:
                raise InvalidRecordError(
                    f"record {bad[0]}: propensity must lie in (0, 1], got {p[bad[0]]!r}"
                )
            p.setflags(write=False)
            object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class TrajectoryDataset:
    """``n`` trajectories sharing ``T`` stages, stored column-wise per stage."""

    stages: tuple
    actions: ActionSet
    ids: Optional[tuple] = None

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise StructuralError("a dataset needs at least one stage")
        n = stages[0].n
        for t, s in enumerate(stages, start=1):
            if s.n != n:
                raise StructuralError(f"stage {t} has {s.n} records, stage 1 has {n}")
            unknown = set(np.unique(s.a).tolist()) - set(self.actions.labels)
            if unknown:
                raise InvalidRecordError(f"stage {t}: actions {sorted(unknown)} not in {self.actions.labels}")
        ids = tuple(range(1, n + 1)) if self.ids is None else tuple(self.ids)
        if len(ids) != n:
            raise StructuralError("one id per trajectory required")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def single_stage(cls, x, a, y, p=None, actions=(1, 2, 3)) -> "TrajectoryDataset":
        actions = actions if isinstance(actions, ActionSet) else ActionSet(tuple(actions))
        return cls((StageData(x, a, y, p),), actions)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], actions) -> "TrajectoryDataset":
        actions = actions if isinstance(actions, ActionSet) else ActionSet(tuple(actions))
        trajectories = list(trajectories)
        if not trajectories:
            raise StructuralError("no trajectories given")
        T = trajectories[0].T
        if any(tr.T != T for tr in trajectories):
            raise StructuralError("all trajectories must share the same stage count")
        stages = []
        for t in range(T):
            rows = [tr.stages[t] for tr in trajectories]
            dims = {r.x.shape[0] for r in rows}
            if len(dims) != 1:
                raise StructuralError(f"stage {t + 1}: covariate dimensions differ across trajectories")
            props = [r.propensity for r in rows]
            if all(p is None for p in props):
                p = None
            elif any(p is None for p in props):
                raise InvalidRecordError(f"stage {t + 1}: propensity present for some records only")
            else:
                p = props
            stages.append(StageData(np.vstack([r.x for r in rows]), [r.a for r in rows], [r.y for r in rows], p))
        return cls(tuple(stages), actions, tuple(tr.id for tr in trajectories))

    @property
    def n(self) -> int:
        return self.stages[0].n

    @property
    def T(self) -> int:
        return len(self.stages)

    def stage(self, t: int) -> StageData:
        """Stage ``t`` (1-based)."""
        return self.stages[t - 1]

    def history(self, t: int) -> np.ndarray:
        """History matrix with rows (x_1, a_1, ..., x_{t-1}, a_{t-1}, x_t)."""
        cols = []
        for s in self.stages[: t - 1]:
            cols.extend([s.x, s.a[:, None].astype(float)])
        cols.append(self.stages[t - 1].x)
        return np.hstack(cols)

    def trajectories(self) -> list:
        out = []
        for i, tid in enumerate(self.ids):
            stages = tuple(
                Stage(s.x[i], int(s.a[i]), float(s.y[i]), None if s.p is None else float(s.p[i]))
                for s in self.stages
            )
            out.append(Trajectory(tid, stages))
        return out

    def replace_stage(self, t: int, **changes) -> "TrajectoryDataset":
        old = self.stage(t)
        fields = {"x": old.x, "a": old.a, "y": old.y, "p": old.p}
        fields.update(changes)
        stages = list(self.stages)
        stages[t - 1] = StageData(**fields)
        return TrajectoryDataset(tuple(stages), self.actions, self.ids)


def value_ipw(data: TrajectoryDataset, d: Policy) -> float:
    """Inverse-propensity-weighted value estimate of policy ``d`` (single stage)."""
    if data.T != 1:
        raise StructuralError("value_ipw expects single-stage data")
    s = data.stage(1)
    if s.p is None:
        raise InvalidRecordError("value_ipw needs recorded propensities")
    chosen = d.batch(s.x)
    return float(np.mean((s.a == chosen) * s.y / s.p))
