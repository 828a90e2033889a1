"""Command-line front end for the simulation studies and the Gaussian oracle.

Exit status: 0 on success, 1 for configuration errors, 2 for runtime or
solver failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .exceptions import ConfigError, JointEmbedError
from .experiments import (
    ALL_VARIANTS,
    ExperimentConfig,
    Scenario,
    make_scenario_cov,
    run_classification_experiment,
    run_prediction_experiment,
    run_timing_experiment,
    true_conditional_prob,
)

log = logging.getLogger("jointembed")

DEFAULT_VARIANTS = {
    "predict": ("constrained", "normalized", "unconstrained", "traditional"),
    "classify": ("constrained", "unconstrained", "traditional", "klr"),
    "timing": ("constrained", "unconstrained", "traditional"),
}
DEFAULT_N = {"predict": (100,), "classify": (500,), "timing": (1000, 2000, 4000)}
DEFAULT_SCENARIO = {"predict": "low", "classify": "med", "timing": "low"}


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise ConfigError(f"expected integers or ranges like 0-19, got {text!r}") from exc
    return tuple(out)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _variants(text):
    vals = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in vals if v not in ALL_VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {', '.join(ALL_VARIANTS)}")
    return vals


# config key -> (ExperimentConfig field, parser)
KEYS = {
    "scenario": ("scenario", str),
    "n_train": ("n_train", _ints),
    "n_val": ("n_val", int),
    "n_test": ("n_test", int),
    "seeds": ("seeds", _ints),
    "grid_sigma": ("sigma_grid", _floats),
    "grid_eps": ("eps_grid", _floats),
    "grid_lambda": ("lambda_grid", _floats),
    "variants": ("variants", _variants),
    "out": ("output_path", str),
    "timeout": ("timeout", float),
    "traditional_max_n": ("traditional_max_n", int),
    "record_time": ("record_time", _bool),
    "timing_sigma": ("timing_sigma", float),
    "timing_eps": ("timing_eps", float),
}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="jointembed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("predict", "conditional probabilities of Y given X = Z3"),
        ("classify", "sign of Z3 given X = (Z1, Z2)"),
        ("timing", "wall time of the coefficient computation"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value file; flags take precedence")
        for key in KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    o = sub.add_parser("oracle", help="true conditional probability P(a Y1 <= b Y2 + c | X = x)")
    o.add_argument("--scenario", default="low")
    o.add_argument("--a", type=float, default=1.0)
    o.add_argument("--b", type=float, default=1.0)
    o.add_argument("--c", type=float, default=-0.5)
    o.add_argument("--x", default="0", help="comma-separated conditioning values")
    return parser


def make_config(command, args) -> ExperimentConfig:
    raw = read_config(args.config) if args.config else {}
    raw.update({k: getattr(args, k) for k in KEYS if getattr(args, k) is not None})
    kwargs = {
        "scenario": DEFAULT_SCENARIO[command],
        "n_train": DEFAULT_N[command],
        "variants": DEFAULT_VARIANTS[command],
    }
    for key, text in raw.items():
        field_name, conv = KEYS[key]
        try:
            kwargs[field_name] = conv(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return ExperimentConfig(**kwargs)


def _summary(rows):
    for r in rows:
        print(
            f"{r.variant:13s} n={r.n_train:<7d} seed={r.seed:<4d} "
            f"oracle={r.oracle_loss:.4g} posfrac={r.posfrac:.3f} normdev={r.normdev:.2e} "
            f"t={r.fit_seconds:.3g}s"
        )


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "oracle":
            cov = make_scenario_cov(Scenario.named(args.scenario), clip=True)
            xs = np.array([float(v) for v in args.x.split(",")])
            for x, p in zip(xs, np.atleast_1d(true_conditional_prob(args.a, args.b, args.c, cov, xs))):
                print(f"{float(x)!r},{float(p)!r}")
            return 0
        config = make_config(args.command, args)
        runner = {
            "predict": run_prediction_experiment,
            "classify": run_classification_experiment,
            "timing": run_timing_experiment,
        }[args.command]
        rows = runner(config)
        if not config.output_path:
            _summary(rows)
        return 0
    except ConfigError as exc:
        print(f"jointembed: configuration error: {exc}", file=sys.stderr)
        return 1
    except (JointEmbedError, np.linalg.LinAlgError, OSError) as exc:
        print(f"jointembed: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # malformed numbers and similar input problems
        print(f"jointembed: configuration error: {exc}", file=sys.stderr)
        return 1


def main_exit():
    sys.exit(main())
