"""Command-line pipeline runner.

One verb per stage plus `all`; every verb takes the same flags and
resolves its configuration from either a TOML file or a bundled
preset. Exit codes: 0 on success, 2 for configuration and artifact
validation problems, 3 for numerical failures inside a stage.
"""

import argparse
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import PRESET_NAMES, STAGES, load_config, load_preset
from .errors import NumericalError, ValidationError
from .stages import run_all, run_stage

_VERB_HELP = {
    "sample": "generate the training states and observable values",
    "kernel": "fit the variable-bandwidth kernel and normalize it",
    "basis": "diagonalize the Markov operator",
    "eigs": "solve the generator eigenproblem and assemble eigenpairs",
    "moments": "select torus modes and compute the moment tables",
    "predict": "assemble the tensor predictor",
    "evaluate": "score both predictors against integrated truth",
    "report": "write skill tables and figures",
    "all": "run every stage in order",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fockcast",
        description="staged forecasting pipeline for ergodic flows",
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    for verb in STAGES + ("all",):
        p = sub.add_parser(verb, help=_VERB_HELP[verb])
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH",
                         help="TOML experiment config file")
        src.add_argument("--preset", choices=PRESET_NAMES,
                         help="bundled preset name")
        p.add_argument("--stage-dir", metavar="PATH", default=None,
                       help="artifact root (default: the config output dir)")
        p.add_argument("--threads", type=int, default=None, metavar="N",
                       help="cap the BLAS thread count while stages run")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValidationError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = (
            load_config(args.config) if args.config else load_preset(args.preset)
        )
        with _thread_limit(args.threads):
            if args.verb == "all":
                results = run_all(config, base_dir=args.stage_dir)
            else:
                hit, _ = run_stage(config, args.verb, base_dir=args.stage_dir)
                results = [(args.verb, hit)]
    except ValidationError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except NumericalError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    for stage, hit in results:
        print("%-9s %s" % (stage, "cached" if hit else "written"))
    if results[-1][0] == "report":
        base = Path(args.stage_dir if args.stage_dir else config.out_dir)
        print("report: %s" % (base / "report" / "report.csv"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
