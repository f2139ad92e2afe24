"""Command line entry point: ``umi <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .. import benchgen as bg
from ..supervision import MissingPretrainingError
from .ablate import ablate
from .baselines import BASELINES, run_baseline
from .checkpoint import load_model, load_pretrained, save_model, save_pretrained
from .config import PRESETS, Config, preset
from .gap import measure_modality_gap
from .gradcheck import check_default
from .report import metrics_row, to_csv, write_csv
from .train import evaluate, pretrain_unimodal, train

log = logging.getLogger("umi")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=("full", "projection_only", "vanilla"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args, task: str | None = None) -> Config:
    try:
        cfg = Config.load(args.config) if args.config else preset(args.preset or "desk")
        if args.config and args.preset:
            cfg = preset(args.preset, **{k: v for k, v in cfg.to_dict().items() if k != "preset"})
        over = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            over[key] = _parse_value(value)
        if args.seed is not None:
            over["seed"] = args.seed
        if args.variant:
            over["variant"] = args.variant
        if task is not None and "task" not in over:
            over["task"] = task
        return Config.from_dict({**cfg.to_dict(), **over})
    except (ValueError, TypeError, OSError) as e:
        raise UsageError(f"bad configuration: {e}") from None


def parse_modalities(text: str, bench: bg.BenchmarkConfig) -> list[int]:
    by_name = {m.name: m.id for m in bench.modalities}
    ids = {m.id for m in bench.modalities}
    out = []
    for tok in (t.strip() for t in text.split(",") if t.strip()):
        if tok in by_name:
            out.append(by_name[tok])
        elif tok.isdigit() and int(tok) in ids:
            out.append(int(tok))
        else:
            raise UsageError(f"unknown modality {tok!r}; known: {sorted(by_name)}")
    if not out:
        raise UsageError("empty modality list")
    return sorted(set(out))


def _load_bench(path):
    bench, spec, parts = bg.load_benchmark(path)
    return bench, spec, parts, [parts[n] for n in spec.train_names]


def _emit_csv(rows, out) -> None:
    if out:
        write_csv(rows, out)
    sys.stdout.write(to_csv(rows))


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = bg.BenchmarkConfig(task=args.task, n_classes=args.n_classes, latent_dim=args.latent_dim,
                             target_dim=args.target_dim, n_train=args.n_train, n_val=args.n_val,
                             n_test=args.n_test, cluster_spread=args.cluster_spread, seed=args.seed)
    ids = [m.id for m in cfg.modalities]
    if args.splits == 2:
        sets = (tuple(ids[: len(ids) // 2]), tuple(ids[len(ids) // 2:]))
    else:
        sets = tuple(tuple(ids[i::args.splits]) for i in range(args.splits))
    spec = bg.default_split_spec(cfg, train_sets=sets)
    bg.save_benchmark(bg.generate(cfg), spec, args.out)
    print(f"wrote benchmark to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    bench, _, _, train_splits = _load_bench(args.benchmark)
    cfg = build_config(args, bench.task)
    pre = pretrain_unimodal(train_splits, cfg)
    save_pretrained(args.out, pre, cfg, bench)
    print(f"wrote unimodal encoders and pseudo-labels to {args.out}")
    return 0


def _check_pretrained(path, bench):
    pre, _, pbench = load_pretrained(path)
    if pbench.to_dict() != bench.to_dict():
        raise ValueError("pretraining artifacts were produced on a different benchmark")
    return pre


def cmd_train(args) -> int:
    bench, _, parts, train_splits = _load_bench(args.benchmark)
    cfg = build_config(args, bench.task)
    if not args.pretrained:
        raise MissingPretrainingError("missing pseudo-labels: pass --pretrained <dir> from `umi pretrain`")
    pre = _check_pretrained(args.pretrained, bench)
    model, record = train(train_splits, cfg, pre)
    test = parts[args.split]
    mods = list(test.modalities)
    metrics = evaluate(model, test, mods)
    record.metrics["+".join(map(str, mods))] = metrics.flat()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model", model, cfg, bench)
    (out / "record.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
    _emit_csv([metrics_row(cfg.hash(), cfg.seed, cfg.variant, mods, metrics)], out / "metrics.csv")
    return 0


def cmd_eval(args) -> int:
    model, cfg, mbench = load_model(args.model)
    bench, _, parts, _ = _load_bench(args.benchmark)
    if mbench.to_dict() != bench.to_dict():
        raise ValueError("model was trained on a different benchmark")
    data = parts[args.split]
    if args.noise_modality is not None:
        (m,) = parse_modalities(args.noise_modality, bench)
        data = bg.corrupt_split(data, m, args.noise_sigma, cfg.seed)
    if args.all_subsets:
        ids = list(data.modalities)
        subsets = [list(c) for r in range(1, len(ids) + 1) for c in itertools.combinations(ids, r)]
    elif args.modalities:
        subsets = [parse_modalities(args.modalities, bench)]
    else:
        subsets = [list(data.modalities)]
    rows = [metrics_row(cfg.hash(), cfg.seed, cfg.variant, s, evaluate(model, data, s)) for s in subsets]
    _emit_csv(rows, args.out)
    return 0


def cmd_baseline(args) -> int:
    bench, _, parts, train_splits = _load_bench(args.benchmark)
    cfg = build_config(args, bench.task)
    pre = _check_pretrained(args.pretrained, bench) if args.pretrained else None
    test = parts[args.split]
    mods = parse_modalities(args.modalities, bench) if args.modalities else list(test.modalities)
    metrics = run_baseline(args.kind, train_splits, cfg, test, mods, pre)
    _emit_csv([metrics_row(cfg.hash(), cfg.seed, args.kind, mods, metrics)], args.out)
    return 0


def cmd_ablate(args) -> int:
    bench, _, parts, train_splits = _load_bench(args.benchmark)
    cfg = build_config(args, bench.task)
    grid = {}
    for item in args.grid:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        grid[key] = [_parse_value(v) for v in values.split(",")]
    if not grid:
        raise UsageError("ablation grid must be non-empty")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ablate(grid, cfg, seeds, train_splits, parts[args.split])
    _emit_csv(rows, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = build_config(args)
    errs = check_default(cfg, seed=cfg.seed, max_entries=args.max_entries)
    worst = max(errs.values())
    for task, e in errs.items():
        print(f"{task}: max relative error {e:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRADCHECK_TOL else 2


def cmd_gap(args) -> int:
    model, cfg, mbench = load_model(args.model)
    _, _, parts, _ = _load_bench(args.benchmark)
    gaps = measure_modality_gap(model, parts[args.split])
    for (a, b), d in gaps.items():
        print(f"{a},{b},{d:.6g}")
    return 0


# ----------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="umi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--task", default="classification", choices=("classification", "regression", "retrieval"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-classes", type=int, default=8)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--target-dim", type=int, default=4)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=400)
    g.add_argument("--n-test", type=int, default=400)
    g.add_argument("--cluster-spread", type=float, default=1.0)
    g.add_argument("--splits", type=int, default=2, help="number of training splits")

    for name, helptext in (("pretrain", "unimodal pretraining and pseudo-labels"),
                           ("train", "train the fusion model"),
                           ("baseline", "run a baseline"),
                           ("ablate", "run an ablation grid")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--benchmark", required=True)
        _config_args(s)
        if name == "pretrain":
            s.add_argument("--out", required=True)
        if name in ("train", "baseline"):
            s.add_argument("--pretrained")
            s.add_argument("--split", default="test")
        if name == "train":
            s.add_argument("--out", required=True)
        if name == "baseline":
            s.add_argument("--kind", required=True, choices=BASELINES)
            s.add_argument("--modalities")
            s.add_argument("--out")
        if name == "ablate":
            s.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
            s.add_argument("--seeds", default="0")
            s.add_argument("--split", default="test")
            s.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--benchmark", required=True)
    e.add_argument("--split", default="test")
    grp = e.add_mutually_exclusive_group()
    grp.add_argument("--modalities", help="comma-separated names or ids")
    grp.add_argument("--all-subsets", action="store_true")
    e.add_argument("--noise-modality")
    e.add_argument("--noise-sigma", type=float, default=1.0)
    e.add_argument("--out")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    _config_args(gc)
    gc.add_argument("--max-entries", type=int, default=3)

    gp = sub.add_parser("gap", help="distance between modalities in the common space")
    gp.add_argument("--model", required=True)
    gp.add_argument("--benchmark", required=True)
    gp.add_argument("--split", default="test")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "gap": cmd_gap}


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"umi: error: {e}", file=sys.stderr)
        return 1
    except MissingPretrainingError as e:
        print(f"umi: missing pseudo-labels: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError, FloatingPointError) as e:
        print(f"umi: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
