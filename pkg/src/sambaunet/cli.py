"""``samba`` command-line entry point.

Settings resolve in increasing precedence: built-in defaults, ``--profile``
and ``--preset``, the ``--config`` file, then explicit flags. The config file
is a flat ``key = value`` list whose keys are TrainConfig or NetConfig field
names; ``#`` starts a comment.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .data import PRESETS as PHANTOM_PRESETS
from .data import export_pgm, generate_dataset, read_dataset, write_dataset
from .diagnostics import GRAD_TOLERANCE, SUITE, bench_scan, run_gradient_suite
from .errors import SambaError
from .metrics import TABLE_COLUMNS, aggregate, write_csv, write_json
from .model import ABLATION_SWITCHES, PRESETS, NetConfig
from .train import PROFILES, TrainConfig, ablate, evaluate, format_table, net_from_checkpoint, train

CHECKPOINT_ENV = "SAMBA_CHECKPOINT_DIR"

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_NET_FIELDS = {f.name: f for f in dataclasses.fields(NetConfig)}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise SambaError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        if raw.lower() in ("none", ""):
            return None
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into a flat dict of raw strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SambaError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip().replace("-", "_")
        if key not in _TRAIN_FIELDS and key not in _NET_FIELDS:
            raise SambaError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def resolve_configs(args) -> tuple[TrainConfig, NetConfig]:
    train_cfg = dataclasses.replace(PROFILES[args.profile])
    net_cfg = dataclasses.replace(PRESETS[args.preset])
    overrides = read_config_file(args.config) if args.config else {}
    if os.environ.get(CHECKPOINT_ENV):
        train_cfg.checkpoint_dir = os.environ[CHECKPOINT_ENV]
    updates_t, updates_n = {}, {}
    # ``seed`` names a field of both configs; one value drives batching and weight init
    for key, raw in overrides.items():
        if key in _TRAIN_FIELDS:
            updates_t[key] = _parse_value(raw, getattr(train_cfg, key))
        if key in _NET_FIELDS:
            updates_n[key] = _parse_value(raw, getattr(net_cfg, key))
    for key in _TRAIN_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            updates_t[key] = value
    for key in _NET_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            updates_n[key] = tuple(value) if isinstance(value, list) else value
    return dataclasses.replace(train_cfg, **updates_t), dataclasses.replace(net_cfg, **updates_n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    samples = generate_dataset(args.count, args.size, args.preset, args.seed, args.noise)
    write_dataset(samples, args.output)
    if args.pgm:
        export_pgm(samples, args.pgm)
    print(f"wrote {len(samples)} samples ({args.size}x{args.size}, preset {args.preset}) to {args.output}")
    return 0


def _history_csv(path, history) -> None:
    with open(path, "w") as f:
        f.write("iteration,loss,val_mDice,val_HD95\n")
        for h in history:
            cells = [h["iteration"], f"{h['loss']:.8g}"]
            cells += [f"{h[k]:.6f}" if k in h and math.isfinite(h[k]) else ("undefined" if k in h else "")
                      for k in ("val_mDice", "val_HD95")]
            f.write(",".join(map(str, cells)) + "\n")


def cmd_train(args) -> int:
    train_cfg, net_cfg = resolve_configs(args)
    if not train_cfg.checkpoint_dir:
        train_cfg.checkpoint_dir = "checkpoints"
    result = train(train_cfg, net_cfg, args.data)
    out = Path(train_cfg.checkpoint_dir)
    _history_csv(out / "history.csv", result.history)
    summary = {"best": result.best, "iterations": len(result.history), "seconds": result.seconds,
               "train_config": train_cfg.to_dict(), "net_config": net_cfg.to_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(f"best mDice {result.best.get('mDice', float('nan')):.4f} at iteration "
          f"{result.best.get('iteration')}; checkpoint {out / 'best.smbc'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    net = net_from_checkpoint(ckpt)
    reports = evaluate(net, read_dataset(args.data), args.spacing)
    provenance = {"checkpoint": str(args.checkpoint), "iteration": ckpt.iteration,
                  "train_config": ckpt.train_config, "net_config": ckpt.net_config}
    if args.csv:
        write_csv(args.csv, reports)
    if args.json:
        write_json(args.json, reports, provenance)
    summary = aggregate(reports).summary()
    print(" | ".join(TABLE_COLUMNS))
    print(" | ".join(f"{summary[c]:.4f}" if math.isfinite(summary[c]) else "undefined" for c in TABLE_COLUMNS))
    return 0


def cmd_ablate(args) -> int:
    train_cfg, net_cfg = resolve_configs(args)
    rows = ablate(train_cfg, net_cfg, args.data)
    table = format_table(rows)
    print(table)
    print()
    print("Configuration | params")
    for r in rows:
        print(f"{r.name} | {r.params}")
    if args.output:
        Path(args.output).write_text(table + "\n")
    if args.json:
        payload = {
            "train_config": train_cfg.to_dict(), "net_config": net_cfg.to_dict(),
            "rows": [{"configuration": r.name, "aliases": list(r.labels), "params": r.params,
                      "census": r.census,
                      "metrics": {k: (v if math.isfinite(v) else "undefined") for k, v in r.metrics.items()}}
                     for r in rows],
        }
        Path(args.json).write_text(json.dumps(payload, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    unknown = sorted(set(args.names) - set(SUITE))
    if unknown:
        raise SambaError(f"unknown gradient cases {unknown}")
    failed = 0

    def report(res):
        nonlocal failed
        failed += not res.passed
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name:<20} worst rel err {res.worst:.2e} "
              f"over {res.trials} inputs", flush=True)

    run_gradient_suite(args.trials, args.seed, args.names or None, report=report)
    print(f"{failed} failing (tolerance {GRAD_TOLERANCE:g})")
    return 1 if failed else 0


def cmd_bench_scan(args) -> int:
    rows = bench_scan(tuple(args.lengths), args.channels, args.state_size, args.repeats)
    print("L | median seconds | t(L)/t(L/2)")
    for r in rows:
        ratio = "" if r.ratio is None else f"{r.ratio:.3f}"
        print(f"{r.length} | {r.seconds:.6f} | {ratio}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset file (SMBD)")
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="network size preset")
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--max-iters", dest="max_iters", type=int)
    g.add_argument("--eval-interval", dest="eval_interval", type=int)
    g.add_argument("--loss-mix", dest="loss_mix", type=float, help="cross-entropy weight in [0, 1]")
    g.add_argument("--schedule", choices=("constant", "poly"))
    g.add_argument("--train-fraction", dest="train_fraction", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--checkpoint-dir", dest="checkpoint_dir", help=f"overrides ${CHECKPOINT_ENV}")
    g.add_argument("--target-dice", dest="target_dice", type=float, help="stop once val mDice reaches this")
    g.add_argument("--eval-on-train", dest="eval_on_train", action="store_const", const=True)
    n = p.add_argument_group("network")
    n.add_argument("--image-size", dest="image_size", type=int)
    n.add_argument("--channels", type=int, nargs="+")
    n.add_argument("--fuse-mode", dest="hoacm_fuse_mode", choices=("conv", "sum"))
    n.add_argument("--freeze-trunk", dest="freeze_trunk", action="store_const", const=True)
    for switch, (label, alias) in ABLATION_SWITCHES.items():
        n.add_argument(f"--no-{switch.replace('_', '-')}", dest=switch, action="store_const", const=False,
                       help=f"ablate: {label}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic cardiac phantoms")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--preset", choices=sorted(PHANTOM_PRESETS) + ["mixed"], default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--pgm", help="also export PGM image/label pairs to this directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and keep the best-mDice checkpoint")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spacing", type=float, default=1.0, help="pixel spacing for distances")
    p.add_argument("--csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every ablation configuration and tabulate")
    _add_model_flags(p)
    p.add_argument("--output", help="write the markdown table here")
    p.add_argument("--json")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("names", nargs="*", metavar="NAME", help=f"subset of: {', '.join(SUITE)}")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench-scan", help="time the selective scan at doubling lengths")
    p.add_argument("--lengths", type=int, nargs="+", default=[512, 1024, 2048, 4096, 8192])
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--state-size", type=int, default=8)
    p.add_argument("--repeats", type=int, default=7)
    p.set_defaults(func=cmd_bench_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SambaError, OSError) as exc:
        print(f"samba: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
