"""Command line entry point: ``mote {generate,edit,verify,bench}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 verification breach.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, io, moe
from .spread import EditPlan, prepare_states

log = logging.getLogger("mote")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_BREACH = 0, 1, 2, 3


def _ranks(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--ranks expects rE,rOut,rIn")
    return tuple(parts)


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _read_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _emit(rows, fh=None):
    fh = fh or sys.stdout
    for row in rows:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_generate(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.lam is not None:
        cfg["lambda"] = args.lam
    cfg = harness.GenerateConfig.from_dict(cfg)
    out = harness.generate(cfg, args.out)
    log.info("wrote artifacts to %s", out)
    _emit([{"kind": "generate", "out": str(out), **cfg.to_dict()}])
    return EXIT_OK


def _plan_from_args(args, manifest):
    d = _read_config(args.config)
    d.setdefault("layers", manifest["layers"])
    overrides = {"solver": args.solver, "spread_mode": args.spread_mode, "lambda": args.lam,
                 "ranks": args.ranks, "whitening": args.whitening, "null_space": args.null_space}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.recompute_design:
        d["recompute_design"] = True
    return EditPlan.from_dict(d)


def cmd_edit(args):
    manifest, layers, batch, pres = harness.load_artifacts(args.artifacts)
    plan = _plan_from_args(args, manifest)
    if plan.layers[-1] != manifest["layers"][-1]:
        # the cached activations belong to the artifact's last layer
        batch = batch.recached(layers[plan.layers[-1]])
    states = prepare_states(plan, layers, pres)
    report, result = harness.edit(plan, layers, batch, pres, states)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_run(out, report, result, states)
    _emit(report.records())
    return EXIT_OK


def cmd_verify(args):
    cfg = _read_config(args.config)
    sizes = cfg.get("sizes", harness.DEFAULT_VERIFY_SIZES)
    seeds = cfg.get("seeds", [0, 1] if args.seed is None else [args.seed])
    lambdas = [args.lam] if args.lam is not None else cfg.get("lambdas", harness.DEFAULT_LAMBDAS)
    checks = harness.verify(sizes, seeds, lambdas)
    _emit([c.record() for c in checks])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "verify.jsonl", "w") as fh:
            _emit([c.record() for c in checks], fh)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_BREACH


def cmd_bench(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.solver is not None:
        cfg["solvers"] = [args.solver]
    if args.spread_mode is not None:
        cfg["modes"] = [args.spread_mode]
    grid = harness.BenchmarkGrid.from_dict(cfg)
    rows = harness.bench(grid)
    _emit([{"kind": "bench", **r} for r in rows])
    print(harness.format_table(rows), file=sys.stderr)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "bench.jsonl", "w") as fh:
            _emit(rows, fh)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mote", description="Closed-form MoE knowledge editing toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--lambda", dest="lam", type=float)

    g = sub.add_parser("generate", help="write a synthetic layer stack, edit batch and preservation set")
    common(g, out_required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("edit", help="apply an edit plan to generated artifacts")
    e.add_argument("artifacts", help="directory written by `mote generate`")
    common(e, out_required=True)
    e.add_argument("--solver", choices=["global_oracle", "woodbury", "bcd", "tucker"])
    e.add_argument("--spread-mode", choices=["residual_spread", "update_spread"])
    e.add_argument("--ranks", type=_ranks)
    e.add_argument("--whitening", choices=["none", "in", "out", "both"])
    e.add_argument("--null-space", type=_on_off)
    e.add_argument("--recompute-design", action="store_true")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("verify", help="run the oracle identity suite")
    common(v)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="time solvers and spread modes over a grid")
    common(b)
    b.add_argument("--solver", choices=["global_oracle", "woodbury", "bcd", "tucker"])
    b.add_argument("--spread-mode", choices=["residual_spread", "update_spread"])
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except np.linalg.LinAlgError as exc:
        print(f"mote: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError, io.FormatError) as exc:
        print(f"mote: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
