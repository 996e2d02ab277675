"""Command-line entry point: ``featreplay run | compare | bench``."""
import argparse
import json
import logging
import sys

from .harness.config import ConfigError, RunConfig


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _load_config(path):
    return RunConfig.load(path) if path else RunConfig()


def build_parser():
    p = argparse.ArgumentParser(prog="featreplay", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", help="JSON RunConfig file; flags below override its values")
    r.add_argument("--seed", type=int, required=True, help="seed for init, sampling and data")
    r.add_argument("--trainer", choices=["bp", "ddg", "fr"], required=True)
    r.add_argument("--k", type=int, required=True, help="number of modules (ignored for bp)")
    r.add_argument("--lockstep", type=_bool, required=True, metavar="{true,false}",
                   help="true: run module backward passes sequentially; false: one thread per module")
    r.add_argument("--out-dir", required=True, help="directory for metrics.csv, checkpoint.bin, summary.json")
    r.add_argument("--epochs", type=int)
    r.add_argument("--iterations", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--resume", help="checkpoint to resume from")
    r.add_argument("--stop-after", type=int, help="stop (and checkpoint) at this iteration")

    c = sub.add_parser("compare", help="run several configs and tabulate them per epoch")
    c.add_argument("configs", nargs="+", help="JSON RunConfig files")
    c.add_argument("--out-dir", required=True)

    b = sub.add_parser("bench", help="time numba and numpy kernels and lockstep vs parallel backward")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--quick", action="store_true", help="smaller problem sizes")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        from .bench import main as bench_main
        return bench_main(repeats=args.repeats, quick=args.quick)

    from .harness.runner import compare, run

    try:
        if args.command == "run":
            cfg = _load_config(args.config)
            overrides = {"seed": args.seed, "trainer": args.trainer, "k": args.k,
                         "lockstep": args.lockstep, "out_dir": args.out_dir}
            for name in ("epochs", "iterations", "batch_size", "resume"):
                if getattr(args, name) is not None:
                    overrides[name] = getattr(args, name)
            result = run(cfg.replace(**overrides), stop_after=args.stop_after)
            print(json.dumps(result.summary, indent=2))
            if result.exit_status:
                print(f"error: {result.summary.get('diagnostic')}", file=sys.stderr)
            return result.exit_status
        report = compare([RunConfig.load(path) for path in args.configs], args.out_dir)
        print(json.dumps({"runs": [r["label"] for r in report["runs"]],
                          "backward_time_ratios": report["backward_time_ratios"]}, indent=2))
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
