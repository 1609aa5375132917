"""Command-line front end: ``simulate``, ``fit`` and ``divergence``.

Exit codes: 0 success, 1 usage or validation error, 2 internal or harness error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import divergence as dv
from .dataio import output_paths, read_trajectories_csv, write_trajectories_csv
from .errors import ConsistencyError, DTRError, HarnessError
from .estimators import FitConfig, fit, fit_backward, with_fitted_propensities
from .models import FEATURE_PRESETS, LinearBasis, ModelQFunction, NuisanceComponent, PolicyComponent, feature_preset
from .qcore import TabularQFunction
from .simulate import ScenarioConfig, generate, report_to_csv, report_to_json, run_replications

EXIT_OK, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2
FIT_METHODS = {"gamma": "gamma_mde", "beta": "beta_mde", "ml": "ml"}
DIV_FAMILIES = {"gamma": "gamma_power", "beta": "beta_power", "ekl": "ekl", "nkl": "nkl"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _methods(text: str) -> tuple:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in names if s not in FIT_METHODS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"methods must be a comma list from {sorted(FIT_METHODS)}")
    return names


def _floats(text: str) -> list:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dtrdiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run the replication harness")
    sim.add_argument("--scenario", choices=("correct", "misspecified"), default="correct")
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--reps", type=int, default=300)
    sim.add_argument("--gamma", type=float, default=-1.5)
    sim.add_argument("--beta", type=float, default=-1.5)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="report", help="output prefix; writes PREFIX.json and PREFIX.csv")
    sim.add_argument("--covariate-sd", type=float, default=0.5)
    sim.add_argument("--methods", type=_methods, default=("gamma", "beta"))
    sim.add_argument("--restarts", type=int, default=5)
    sim.add_argument("--data-out", help="also write the first replication's dataset to this CSV")

    ft = sub.add_parser("fit", help="fit a policy model to a trajectory CSV")
    ft.add_argument("--data", required=True)
    ft.add_argument("--method", choices=sorted(FIT_METHODS), default="gamma")
    ft.add_argument("--index", type=float, default=-1.5)
    ft.add_argument("--features", choices=FEATURE_PRESETS, default="linear_numeric_action")
    ft.add_argument("--out", required=True)
    ft.add_argument("--fit-propensity", action="store_true", help="fit missing propensities by multinomial logit")
    ft.add_argument("--optimizer", choices=("quasi_newton", "nelder_mead"), default="quasi_newton")
    ft.add_argument("--max-iters", type=int, default=500)
    ft.add_argument("--gradient-tol", type=float, default=1e-8)
    ft.add_argument("--restarts", type=int, default=5)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--family", choices=("exponential", "poisson"), default="exponential")

    dvp = sub.add_parser("divergence", help="divergence between two tabular Q-function files")
    dvp.add_argument("--q0", required=True)
    dvp.add_argument("--q1", required=True)
    dvp.add_argument("--family", choices=sorted(DIV_FAMILIES), default="gamma")
    dvp.add_argument("--index", type=float, default=1.0)
    dvp.add_argument("--limit-check", choices=("value_gap", "gm", "hm"))
    dvp.add_argument("--gammas", type=_floats, default=[10.0, 50.0, 200.0], help="gamma sequence for value_gap")
    dvp.add_argument("--out", help="also write the JSON record here")
    return parser


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    if args.n < 1 or args.reps < 1 or args.restarts < 0 or not args.covariate_sd > 0:
        raise UsageError("--n and --reps must be positive, --restarts nonnegative, --covariate-sd positive")
    config = ScenarioConfig(args.scenario, args.n, args.reps, args.gamma, args.beta, args.seed,
                            args.covariate_sd, args.methods, restarts=args.restarts)
    json_path, csv_path = output_paths(args.out)
    if args.data_out:
        write_trajectories_csv(generate(config, config.seed), args.data_out)
    try:
        reports = run_replications(config)
        error = None
    except HarnessError as exc:
        reports, error = exc.report or {}, str(exc)
    json_path.write_text(report_to_json(config, reports, error) + "\n")
    csv_path.write_text(report_to_csv(reports))
    if error:
        print(f"harness error: {error}", file=sys.stderr)
        return EXIT_INTERNAL
    print(report_to_csv(reports), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _single_stage_template(d: int, features: str, actions) -> ModelQFunction:
    maps = feature_preset(features, actions.labels)
    pc = PolicyComponent.zeros(maps, d, actions)
    return ModelQFunction(NuisanceComponent("parametric_linear", np.zeros(d + 1), LinearBasis()), pc)


def stage_templates(data, features: str) -> list:
    """Policy features on the current-stage covariates, nuisance linear in the whole history."""
    out = []
    for t in range(1, data.T + 1):
        width = data.history(t).shape[1]
        d_t = data.stage(t).d
        current = list(range(width - d_t, width))
        maps = feature_preset(features, data.actions.labels, current)
        pc = PolicyComponent.zeros(maps, d_t, data.actions)
        out.append(ModelQFunction(NuisanceComponent("parametric_linear", np.zeros(width + 1), LinearBasis()), pc))
    return out


def cmd_fit(args) -> int:
    data = read_trajectories_csv(args.data)
    method = FIT_METHODS[args.method]
    missing_p = any(s.p is None for s in data.stages)
    if missing_p and method != "ml":
        if not args.fit_propensity:
            raise UsageError("the data has no propensity column 'p'; add it or pass --fit-propensity")
    if args.fit_propensity and missing_p:
        data = with_fitted_propensities(data)
    config = FitConfig(method, args.index if method != "ml" else 0.0, args.optimizer, args.max_iters,
                       args.gradient_tol, args.restarts, args.seed, args.family)
    if data.T > 1:
        if method != "gamma_mde":
            raise UsageError("multi-stage data is fitted by backward induction with --method gamma")
        result = fit_backward(data, stage_templates(data, args.features), config).to_dict()
    else:
        template = _single_stage_template(data.stage(1).d, args.features, data.actions)
        result = fit(data, template if method != "gamma_mde" else template.policy_part, config).to_dict()
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# divergence


def cmd_divergence(args) -> int:
    q0, q1 = TabularQFunction.load(args.q0), TabularQFunction.load(args.q1)
    if not q0.same_grid(q1):
        raise UsageError("q0 and q1 are defined on different grids or action sets")
    record = dv.DivergenceSpec(DIV_FAMILIES[args.family], args.index).evaluate(q0, q1)
    if args.limit_check == "value_gap":
        record["limit_check"] = {
            "kind": "value_gap",
            "rows": [{"gamma": g, "scaled_divergence": s, "value_gap": v} for g, s, v in dv.value_gap_limit(q0, q1, args.gammas)],
        }
    elif args.limit_check == "gm":
        gamma = -1.0 + 1e-3
        record["limit_check"] = {
            "kind": "gm",
            "gamma": gamma,
            "lhs": dv.scaled_gamma_divergence(q0, q1, gamma),
            "rhs": dv.gm_limit_divergence(q0, q1),
        }
    elif args.limit_check == "hm":
        lhs, rhs = dv.harmonic_identity_check(q0)
        record["limit_check"] = {"kind": "hm", "lhs": lhs, "rhs": rhs}
    text = json.dumps(record, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "divergence": cmd_divergence}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HarnessError, ConsistencyError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DTRError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
