"""Command-line entry point: one subcommand per pipeline step.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every run writes a
``run_manifest.json`` next to its output with all resolved options.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import GenerationSpec, generate_dataset, read_dataset, write_dataset
from .efficiency import DatasetBundle, SweepBudgets, sweep_report, throughput_bench
from .model import LossWeights, ModelConfig, init_checkpoint, load_checkpoint, save_checkpoint
from .relevance import block_relevance, relevance_report
from .surgery import ablate_block, reduce_blocks
from .training import KDConfig, TrainBudget, distill, evaluate, finetune, pretrain, write_metrics


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _budget(args, default_lr: float) -> TrainBudget:
    lr = args.lr if args.lr is not None else default_lr
    if getattr(args, "budget_seconds", None):
        return TrainBudget(mode="wall_clock", seconds=args.budget_seconds, batch_size=args.batch,
                           learning_rate=lr, seed=args.seed, eval_interval=args.eval_interval)
    return TrainBudget(steps=args.steps, batch_size=args.batch, learning_rate=lr, seed=args.seed,
                       eval_interval=args.eval_interval)


def parse_kd_terms(text: str) -> dict:
    """``out,n2n,e2e,mlp:2`` -> KDConfig keyword arguments."""
    opts = {"distill_output": False, "distill_energy": False, "distill_mlp_layers": 0,
            "distill_n2n": False, "distill_e2e": False}
    for raw in filter(None, (t.strip() for t in text.split(","))):
        if raw == "out":
            opts["distill_output"] = True
        elif raw == "energy":
            opts["distill_energy"] = True
        elif raw == "n2n":
            opts["distill_n2n"] = True
        elif raw == "e2e":
            opts["distill_e2e"] = True
        elif raw.startswith("mlp:"):
            try:
                opts["distill_mlp_layers"] = int(raw[4:])
            except ValueError:
                raise UsageError(f"--kd-terms: bad layer count in {raw!r}") from None
        else:
            raise UsageError(f"--kd-terms: unknown term {raw!r}")
    return opts


def _kd_config(args) -> KDConfig:
    return KDConfig(lam=args.lam, data_fraction=args.data_fraction,
                    include_ground_truth_loss=args.with_ground_truth, **parse_kd_terms(args.kd_terms))


def _loss_weights(args) -> LossWeights:
    return LossWeights(args.alpha_e, args.alpha_f)


# ---------------------------------------------------------------- handlers


def cmd_gen(args):
    if args.suite:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        down = args.downstream_count or max(args.count // 5, 1)
        held = args.eval_count or max(args.count // 10, 1)
        plan = {
            "upstream_train": ("upstream", "train", args.count),
            "upstream_val": ("upstream", "val", held),
            "downstream_train": ("downstream", "train", down),
            "downstream_val": ("downstream", "val", held),
            "downstream_test": ("downstream", "test", held),
        }
        for key, (task, split, count) in plan.items():
            spec = GenerationSpec(count=count, seed=args.seed, task=task, split=split,
                                  atoms_min=args.atoms_min, atoms_max=args.atoms_max,
                                  species_count=args.species, param_seed=args.param_seed)
            write_dataset(generate_dataset(spec), out / DatasetBundle.FILES[key])
        return
    spec = GenerationSpec(count=args.count, seed=args.seed, task=args.task, split=args.split,
                          atoms_min=args.atoms_min, atoms_max=args.atoms_max,
                          species_count=args.species, param_seed=args.param_seed)
    write_dataset(generate_dataset(spec), args.out)


def _config_seed(seed: int) -> int:
    if seed >= 2**32:
        raise UsageError("--seed: model seeds are stored as u32 in checkpoints; use a value below 2**32")
    return seed


def cmd_pretrain(args):
    cfg = ModelConfig(b=args.b, m=args.m, d=args.d, d_e=args.d_e, n_rbf=args.n_rbf,
                      cutoff=args.cutoff, species_count=args.species, seed=_config_seed(args.seed))
    val = read_dataset(args.val) if args.val else None
    ckpt, log = pretrain(cfg, read_dataset(args.data), _budget(args, 1e-3), _loss_weights(args), val=val)
    save_checkpoint(ckpt, args.out)
    log.write(args.log or f"{args.out}.log.csv")


def cmd_relevance(args):
    ckpt = load_checkpoint(args.inp)
    data = read_dataset(args.data)
    rel = block_relevance(ckpt, data.samples[: args.samples], _loss_weights(args))
    relevance_report(rel, args.out)


def cmd_prune(args):
    ckpt = load_checkpoint(args.inp)
    save_checkpoint(reduce_blocks(ckpt, args.blocks + 1, args.strategy, seed=args.seed), args.out)


def cmd_ablate(args):
    ckpt = load_checkpoint(args.inp)
    save_checkpoint(ablate_block(ckpt, args.block, args.strategy, seed=args.seed), args.out)


def cmd_distill(args):
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.inp)
    val = read_dataset(args.val) if args.val else None
    ckpt, log = distill(teacher, student, read_dataset(args.data), _kd_config(args), _budget(args, 3e-4),
                        _loss_weights(args), val=val)
    save_checkpoint(ckpt, args.out)
    log.write(args.log or f"{args.out}.log.csv")


def _finetune_common(args, start):
    val = read_dataset(args.val) if args.val else None
    test = read_dataset(args.test) if args.test else None
    ckpt, metrics, log = finetune(start, read_dataset(args.data), _budget(args, 3e-4), _loss_weights(args),
                                  head_reset=args.head_reset, val=val, test=test)
    save_checkpoint(ckpt, args.out)
    log.write(args.log or f"{args.out}.log.csv")
    if metrics is not None:
        write_metrics([metrics], args.metrics or f"{args.out}.metrics.csv")
        print(f"test force_mae={metrics.force_mae:.6f} energy_mae_per_atom={metrics.energy_mae_per_atom:.6f}")


def cmd_finetune(args):
    _finetune_common(args, load_checkpoint(args.inp))


def cmd_scratch(args):
    like = load_checkpoint(args.inp).config
    cfg = ModelConfig(**{**asdict(like), "seed": _config_seed(args.seed)})
    _finetune_common(args, init_checkpoint(cfg))


def cmd_eval(args):
    ckpt = load_checkpoint(args.inp)
    metrics = evaluate(ckpt, read_dataset(args.data), split=args.split)
    if args.out:
        write_metrics([metrics], args.out)
    print(f"{metrics.split} force_mae={metrics.force_mae:.6f} "
          f"energy_mae_per_atom={metrics.energy_mae_per_atom:.6f} n_samples={metrics.sample_count}")


def cmd_bench(args):
    ckpt = load_checkpoint(args.inp)
    res = throughput_bench(ckpt, read_dataset(args.data), args.warmup, args.passes, workers=args.workers)
    line = f"{ckpt.config.b - 1},{res.median:.3f},{res.min:.3f},{res.max:.3f}"
    if args.out:
        Path(args.out).write_text("blocks,median,min,max\n" + line + "\n", encoding="utf-8")
    print(f"throughput median={res.median:.3f} min={res.min:.3f} max={res.max:.3f} samples/s")


def cmd_sweep(args):
    teacher = load_checkpoint(args.teacher)
    root = Path(args.data_dir)
    bundle = DatasetBundle(**{k: read_dataset(root / f) for k, f in DatasetBundle.FILES.items()})
    budgets = SweepBudgets(
        finetune_steps=args.steps, distill_steps=args.distill_steps, batch_size=args.batch,
        finetune_lr=args.lr if args.lr is not None else 3e-4, distill_lr=args.lr if args.lr is not None else 3e-4,
        kd=_kd_config(args), relevance_samples=args.relevance_samples,
        convergence_seconds=args.budget_seconds or 30.0, seed=args.seed,
        convergence_eval_interval=args.eval_interval or 50, bench_timed_passes=args.bench_passes,
    )
    sweep_report(teacher, bundle, args.out, budgets=budgets)


# ------------------------------------------------------------------ parser


def _existing(value: str) -> str:
    if not Path(value).exists():
        raise argparse.ArgumentTypeError(f"path not found: {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blockprune", description="Block reduction toolkit for message-passing potentials")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)

    def training(sp, steps=1000):
        sp.add_argument("--steps", type=int, default=steps)
        sp.add_argument("--batch", type=int, default=8)
        sp.add_argument("--lr", type=float, default=None)
        sp.add_argument("--budget-seconds", type=float, default=None)
        sp.add_argument("--eval-interval", type=int, default=0)
        sp.add_argument("--alpha-e", type=float, default=1.0)
        sp.add_argument("--alpha-f", type=float, default=10.0)
        sp.add_argument("--log", default=None)

    def kd_flags(sp):
        sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
        sp.add_argument("--kd-terms", default="out,n2n,e2e,mlp:1")
        sp.add_argument("--data-fraction", type=float, default=0.015)
        sp.add_argument("--with-ground-truth", action="store_true")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--task", choices=["upstream", "downstream"], default="upstream")
    g.add_argument("--split", default="train")
    g.add_argument("--atoms-min", type=int, default=6)
    g.add_argument("--atoms-max", type=int, default=12)
    g.add_argument("--species", type=int, default=3)
    g.add_argument("--param-seed", type=int, default=0)
    g.add_argument("--suite", action="store_true", help="write the full upstream/downstream bundle into --out")
    g.add_argument("--downstream-count", type=int, default=None)
    g.add_argument("--eval-count", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("pretrain", help="train a model from scratch on upstream data")
    common(s)
    training(s, steps=2000)
    s.add_argument("--data", type=_existing, required=True)
    s.add_argument("--val", type=_existing, default=None)
    defaults = ModelConfig()
    s.add_argument("--b", type=int, default=defaults.b)
    s.add_argument("--m", type=int, default=defaults.m)
    s.add_argument("--d", type=int, default=defaults.d)
    s.add_argument("--d-e", dest="d_e", type=int, default=defaults.d_e)
    s.add_argument("--n-rbf", dest="n_rbf", type=int, default=defaults.n_rbf)
    s.add_argument("--cutoff", type=float, default=defaults.cutoff)
    s.add_argument("--species", type=int, default=defaults.species_count)
    s.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("relevance", help="GradCAM block relevance report")
    common(r)
    r.add_argument("--in", dest="inp", type=_existing, required=True)
    r.add_argument("--data", type=_existing, required=True)
    r.add_argument("--samples", type=int, default=1000)
    r.add_argument("--alpha-e", type=float, default=1.0)
    r.add_argument("--alpha-f", type=float, default=10.0)
    r.set_defaults(func=cmd_relevance)

    pr = sub.add_parser("prune", help="remove trailing interaction blocks")
    common(pr)
    pr.add_argument("--in", dest="inp", type=_existing, required=True)
    pr.add_argument("--blocks", type=int, required=True, help="interaction blocks to keep")
    pr.add_argument("--strategy", choices=["sliced", "random"], default="sliced")
    pr.set_defaults(func=cmd_prune)

    ab = sub.add_parser("ablate", help="remove one interaction block")
    common(ab)
    ab.add_argument("--in", dest="inp", type=_existing, required=True)
    ab.add_argument("--block", type=int, required=True)
    ab.add_argument("--strategy", choices=["sliced", "random"], default="sliced")
    ab.set_defaults(func=cmd_ablate)

    di = sub.add_parser("distill", help="distil a teacher into a reduced student")
    common(di)
    training(di)
    kd_flags(di)
    di.add_argument("--teacher", type=_existing, required=True)
    di.add_argument("--in", dest="inp", type=_existing, required=True)
    di.add_argument("--data", type=_existing, required=True)
    di.add_argument("--val", type=_existing, default=None)
    di.set_defaults(func=cmd_distill)

    for name, func, text in (("finetune", cmd_finetune, "fine-tune a checkpoint"),
                             ("scratch", cmd_scratch, "train the --in architecture from random init")):
        ft = sub.add_parser(name, help=text)
        common(ft)
        training(ft)
        ft.add_argument("--in", dest="inp", type=_existing, required=True)
        ft.add_argument("--data", type=_existing, required=True)
        ft.add_argument("--val", type=_existing, default=None)
        ft.add_argument("--test", type=_existing, default=None)
        ft.add_argument("--head-reset", action="store_true")
        ft.add_argument("--metrics", default=None)
        ft.set_defaults(func=func)

    ev = sub.add_parser("eval", help="force and energy MAE on a dataset")
    common(ev, out_required=False)
    ev.add_argument("--in", dest="inp", type=_existing, required=True)
    ev.add_argument("--data", type=_existing, required=True)
    ev.add_argument("--split", default=None)
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", help="inference throughput")
    common(be, out_required=False)
    be.add_argument("--in", dest="inp", type=_existing, required=True)
    be.add_argument("--data", type=_existing, required=True)
    be.add_argument("--warmup", type=int, default=1)
    be.add_argument("--passes", type=int, default=5)
    be.add_argument("--workers", type=int, default=1)
    be.set_defaults(func=cmd_bench)

    sw = sub.add_parser("sweep", help="run every reduction arm and write the result tables")
    common(sw)
    training(sw)
    kd_flags(sw)
    sw.add_argument("--teacher", type=_existing, required=True)
    sw.add_argument("--data-dir", type=_existing, required=True)
    sw.add_argument("--distill-steps", type=int, default=1000)
    sw.add_argument("--relevance-samples", type=int, default=1000)
    sw.add_argument("--bench-passes", type=int, default=5)
    sw.set_defaults(func=cmd_sweep)
    return p


def _manifest_path(args) -> Path:
    if not getattr(args, "out", None):
        return Path("run_manifest.json")
    out = Path(args.out)
    if args.command in ("sweep",) or (args.command == "gen" and args.suite):
        return out / "run_manifest.json"
    return out.with_name(out.name + ".run_manifest.json")


def write_run_manifest(args) -> None:
    path = _manifest_path(args)
    options = {k: v for k, v in vars(args).items() if k != "func"}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"version": __version__, "options": options}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if getattr(args, "seed", 0) < 0 or getattr(args, "seed", 0) >= 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(args)
        write_run_manifest(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
