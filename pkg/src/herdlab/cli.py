"""
The ``herdlab`` command-line tool.

Every sub-command writes its data files and a ``manifest.json`` describing the run
under ``--out``. Exit status is 0 on success, 2 for invalid input, and 1 for any
other failure.
"""

__all__ = ["RunManifest", "build_parser", "main"]

import argparse
import datetime
import json
import logging
import pathlib
import sys
from collections.abc import Callable, Sequence

import equinox as eqx
import numpy as np
import pandas as pd

from . import __version__
from .core import (
    OpinionDistribution,
    RatingScale,
    WeightRule,
    aggregate,
    average_score,
)
from .exceptions import InsufficientDataError
from .herding import HerdingParams, MisbehaviorSpec, SequenceSpec, simulate
from .inference import InferenceConfig, error_curve, infer
from .ingest import (
    ColumnMapping,
    analyze_dataset,
    filter_items,
    load_csv,
    write_analysis,
    write_csv,
)
from .speed import empirical_exceedance, speed_curve
from .utils import check_seed, parse_float_list

logger = logging.getLogger("herdlab")

# phi evaluations allowed in one `phi` run
MAX_GRID_EVALUATIONS = 1_000_000

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class RunManifest(eqx.Module):
    """What was run: the sub-command, every resolved flag, and when."""

    subcommand: str = eqx.field(static=True)
    parameters: dict = eqx.field(static=True)
    seed: int = eqx.field(static=True)
    version: str = eqx.field(static=True)
    started: str = eqx.field(static=True)
    finished: str | None = eqx.field(static=True, default=None)

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "parameters": self.parameters,
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
        }

    def write(self, out_dir: pathlib.Path) -> None:
        with (out_dir / "manifest.json").open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Flag parsing helpers


def parse_rule(text: str) -> WeightRule:
    """``unweighted`` or ``c=<exponent>`` for the power law w_i = i^c."""
    text = text.strip().lower()
    if text == "unweighted":
        return WeightRule.unweighted()
    if text.startswith("c="):
        try:
            c = float(text[2:])
        except ValueError as e:
            msg = f"Cannot parse the exponent in rule '{text}'"
            raise ValueError(msg) from e
        return WeightRule.power_law(c)
    msg = f"Unknown rule '{text}'; use 'unweighted' or 'c=<exponent>'"
    raise ValueError(msg)


def parse_alpha(text: str, levels: int) -> OpinionDistribution:
    p = parse_float_list(text)
    if len(p) != levels:
        msg = f"--alpha has {len(p)} entries but the scale has {levels} levels"
        raise ValueError(msg)
    return OpinionDistribution(np.asarray(p), RatingScale(levels))


def parse_sequences(text: str) -> list[SequenceSpec]:
    """A comma-separated list of sequences, or a numeric grid ``low:high:step``."""
    if ":" in text:
        return [SequenceSpec.constant(x) for x in parse_float_list(text)]
    return [SequenceSpec.parse(s) for s in text.split(",") if s.strip()]


def _params(args: argparse.Namespace, **kwargs) -> HerdingParams:
    return HerdingParams(
        parse_alpha(args.alpha, args.levels),
        SequenceSpec.parse(args.gamma),
        SequenceSpec.parse(args.eta),
        parse_rule(args.rule),
        **kwargs,
    )


def _misbehavior(args: argparse.Namespace) -> MisbehaviorSpec | None:
    return MisbehaviorSpec.parse(args.misbehave) if args.misbehave else None


def _config(args: argparse.Namespace) -> InferenceConfig:
    return InferenceConfig(
        restarts=args.restarts,
        max_iterations=args.max_iterations,
        likelihood_tolerance=args.tol,
        seed=args.seed,
    )


def _emit(args: argparse.Namespace, path: pathlib.Path) -> None:
    if args.stdout:
        sys.stdout.write(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Sub-commands; each returns the path of its primary data file


def cmd_simulate(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    params = _params(args, allow_full_herding=True)
    seq = simulate(params, args.n, args.seed, _misbehavior(args))
    path = out / "ratings.csv"
    write_csv({args.item_id: seq}, path, ColumnMapping(misbehaving="misbehaving"))
    logger.info(
        "Simulated %d ratings; average score of the history is %.4f",
        args.n,
        average_score(aggregate(seq, params.rule)),
    )
    return path


def cmd_phi(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    c_grid = parse_float_list(args.c)
    gammas = parse_sequences(args.gamma)
    etas = parse_sequences(args.eta)
    misbehavior = _misbehavior(args)

    n_eval = len(c_grid) * len(gammas) * len(etas) * args.horizon
    if n_eval > MAX_GRID_EVALUATIONS:
        msg = (
            f"The grid needs {n_eval} phi evaluations, more than the limit of "
            f"{MAX_GRID_EVALUATIONS}; shrink --horizon or the c/gamma/eta grids"
        )
        raise ValueError(msg)

    alpha = OpinionDistribution.uniform(args.levels)
    i = np.arange(1, args.horizon + 1)
    frames = []
    for c in c_grid:
        for gamma in gammas:
            for eta in etas:
                params = HerdingParams(alpha, gamma, eta, WeightRule.power_law(c))
                curve = speed_curve(params, args.horizon, misbehavior, args.epsilon)
                frames.append(
                    pd.DataFrame(
                        {
                            "c": c,
                            "gamma": str(gamma),
                            "eta": str(eta),
                            "i": i,
                            "phi": np.asarray(curve.phi),
                        }
                    )
                )

    path = out / "phi.csv"
    table = pd.concat(frames, ignore_index=True)
    table.to_csv(path, index=False, float_format="%.17g")
    return path


def cmd_infer(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    scale = RatingScale(args.levels)
    sequences = load_csv(args.input, scale, _columns(args))
    if args.item is not None:
        if args.item not in sequences:
            msg = f"Item '{args.item}' is not in {args.input}"
            raise ValueError(msg)
        seq = sequences[args.item]
    elif len(sequences) == 1:
        seq = next(iter(sequences.values()))
    else:
        msg = f"{args.input} holds {len(sequences)} items; choose one with --item"
        raise ValueError(msg)

    result = infer(seq, parse_rule(args.rule), _config(args))
    if not result.converged:
        logger.warning("Inference stopped at the iteration limit before converging")

    path = out / "result.json"
    path.write_text(result.to_json() + "\n", encoding="utf-8")
    return path


def _constant(flag: str, text: str) -> float:
    seq = SequenceSpec.parse(text)
    if not seq.is_constant:
        msg = (
            f"{flag} must be a constant for `mc`: the errors are measured against a "
            f"single gamma_tilde, got '{text}'"
        )
        raise ValueError(msg)
    return seq.b


def cmd_mc(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    alpha = parse_alpha(args.alpha, args.levels)
    curve = error_curve(
        alpha,
        _constant("--gamma", args.gamma),
        _constant("--eta", args.eta),
        parse_rule(args.rule),
        [int(n) for n in parse_float_list(args.n_grid)],
        args.rounds,
        _config(args),
        seed=args.seed,
        misbehavior=_misbehavior(args),
    )
    path = out / "errors.csv"
    curve.to_csv(path, index=False, float_format="%.17g")
    return path


def cmd_analyze(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    scale = RatingScale(args.levels)
    sequences = filter_items(
        load_csv(args.input, scale, _columns(args)), args.min_ratings
    )
    if not sequences:
        msg = f"No item in {args.input} has at least {args.min_ratings} ratings"
        raise InsufficientDataError(msg)

    analysis = analyze_dataset(
        sequences,
        parse_rule(args.rule),
        _config(args),
        c_grid=parse_float_list(args.c_grid),
        eval_index=args.eval_index,
    )
    write_analysis(analysis, out)
    return out / "cdf.csv"


def cmd_bound(args: argparse.Namespace, out: pathlib.Path) -> pathlib.Path:
    table = empirical_exceedance(
        _params(args),
        [int(i) for i in parse_float_list(args.i)],
        parse_float_list(args.epsilon),
        args.seeds,
        seed=args.seed,
        misbehavior=_misbehavior(args),
    )
    path = out / "bound.csv"
    table.to_csv(path, index=False, float_format="%.17g")
    return path


def _columns(args: argparse.Namespace) -> ColumnMapping:
    return ColumnMapping(
        item_id=args.item_column,
        order_key=args.order_column,
        rating=args.rating_column,
        misbehaving=args.misbehaving_column,
    )


# ---------------------------------------------------------------------------
# Parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--alpha",
        required=True,
        help="ground-truth distribution, comma-separated (e.g. 0.01,0.02,0.07,0.4,0.5)",
    )
    p.add_argument(
        "--gamma", default="0", help="herding strength, e.g. 0.4 or 0.8*(1-1/i)"
    )
    p.add_argument("--eta", default="0", help="review selection accuracy")
    p.add_argument("--rule", default="c=0", help="'unweighted' or 'c=<exponent>'")


def _add_misbehave_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--misbehave",
        default=None,
        help="injected ratings 'k,m,indices' with indices '4;5' or '51-100'",
    )


def _add_inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iterations", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-8)


def _add_column_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, type=pathlib.Path, help="ratings CSV")
    p.add_argument("--item-column", default="item_id")
    p.add_argument("--order-column", default="order_key")
    p.add_argument("--rating-column", default="rating")
    p.add_argument("--misbehaving-column", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=pathlib.Path, default=pathlib.Path())
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--levels", type=int, default=5, help="rating scale size M")
    common.add_argument(
        "--stdout", action="store_true", help="also write the main data file to stdout"
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="herdlab",
        description="Simulate, bound, and infer herding effects in product ratings.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "simulate", parents=[common], help="simulate one rating sequence"
    )
    _add_model_flags(p)
    _add_misbehave_flag(p)
    p.add_argument("--n", type=int, required=True, help="number of ratings")
    p.add_argument("--item-id", default="item")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("phi", parents=[common], help="convergence-speed curves")
    p.add_argument("--c", default="0", help="power-law exponents, list or low:high:step")
    p.add_argument("--gamma", default="0", help="herding strengths (list or grid)")
    p.add_argument("--eta", default="0", help="review selection accuracies")
    p.add_argument("--horizon", type=int, default=1000, help="evaluate i = 1..horizon")
    _add_misbehave_flag(p)
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_phi)

    p = sub.add_parser("infer", parents=[common], help="infer alpha and gamma_tilde")
    _add_column_flags(p)
    p.add_argument("--item", default=None)
    p.add_argument("--rule", default="c=0")
    _add_inference_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mc", parents=[common], help="Monte Carlo estimation errors")
    _add_model_flags(p)
    _add_misbehave_flag(p)
    p.add_argument("--n-grid", default="500,1000,2000,5000")
    p.add_argument("--rounds", type=int, default=20)
    _add_inference_flags(p)
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("analyze", parents=[common], help="analyze a ratings dataset")
    _add_column_flags(p)
    p.add_argument("--rule", default="c=0")
    p.add_argument("--min-ratings", type=int, default=2000)
    p.add_argument("--c-grid", default="0:4:0.1")
    p.add_argument("--eval-index", type=int, default=5000)
    _add_inference_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser(
        "bound", parents=[common], help="Monte Carlo check of the tail bound"
    )
    _add_model_flags(p)
    _add_misbehave_flag(p)
    p.add_argument("--i", default="100,1000", help="rating indices")
    p.add_argument("--epsilon", default="0.1,0.2")
    p.add_argument("--seeds", type=int, default=10_000, help="number of simulations")
    p.set_defaults(func=cmd_bound)

    return parser


def _parameters(args: argparse.Namespace) -> dict:
    skip = {"func", "command", "verbose", "quiet", "stdout"}
    return {
        k: (str(v) if isinstance(v, pathlib.Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in skip
    }


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )

    run: Callable[[argparse.Namespace, pathlib.Path], pathlib.Path] = args.func
    try:
        check_seed(args.seed)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        started = _now()
        path = run(args, out)
        manifest = RunManifest(
            args.command, _parameters(args), args.seed, __version__, started, _now()
        )
        manifest.write(out)
        _emit(args, path)
    except (ValueError, ZeroDivisionError, IndexError, FileNotFoundError) as e:
        print(f"herdlab {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"herdlab {args.command}: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL

    logger.info("Wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
