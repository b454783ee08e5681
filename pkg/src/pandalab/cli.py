"""Command-line entry point: ``pandalab <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .backbone import load_backbone, save_backbone
from .metric import metric_eavg, metric_on, metric_ours, task_embedding
from .prompt import load_prompt, save_prompt
from .taskgen import export_split
from .train import KD_KINDS, TEACHER_KINDS, make_teacher, panda_train, prompt_tune, vanilla_pot

log = logging.getLogger("pandalab")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.default_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "kd_loss", None):
        cfg = replace(cfg, train=replace(cfg.train, kd_loss_kind=args.kd_loss))
    if getattr(args, "teacher", None):
        cfg = replace(cfg, train=replace(cfg.train, teacher_kind=args.teacher))
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, lam=args.lam))
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _backbone(args, cfg):
    if getattr(args, "backbone", None):
        return load_backbone(args.backbone)
    return harness.prepare_backbone(cfg)


def _out_dir(args, fallback: Path) -> Path:
    out = Path(args.out) if args.out else fallback
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_tasks(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, Path("."))
    seed = cfg.seeds[0]
    for tid in cfg.task_ids:
        ds = harness.Lab(cfg, None, seed).dataset(tid)
        export_split(ds.train, out / f"{tid}.train.txt")
        export_split(ds.dev, out / f"{tid}.dev.txt")
    harness.write_manifest(cfg, out)
    print(f"wrote {len(cfg.task_ids)} tasks to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, Path("."))
    bb = harness.prepare_backbone(cfg)
    save_backbone(bb, out / "backbone.bin")
    harness.write_manifest(cfg, out, {"backbone_checksum": bb.checksum()})
    print(f"backbone {bb.checksum()[:16]} -> {out / 'backbone.bin'}")
    return 0


def _target(args, cfg, bb):
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    lab = harness.Lab(cfg, bb, seed)
    return lab, lab.dataset(args.task)


def _finish(args, cfg, bb, prompt, curve, name: str) -> int:
    save_prompt(prompt, args.prompt_out)
    out = _out_dir(args, Path(args.prompt_out).resolve().parent)
    (out / f"{name}_curve.csv").write_text(curve.to_csv(), newline="\n")
    harness.write_manifest(cfg, out, {"backbone_checksum": bb.checksum()})
    print(f"{name}: first-epoch {curve.first_epoch_dev_accuracy:.4f} "
          f"best {curve.best_dev_accuracy:.4f} (epoch {curve.best_epoch + 1})")
    return 0


def cmd_tune(args) -> int:
    cfg = _config(args)
    bb = _backbone(args, cfg)
    lab, ds = _target(args, cfg, bb)
    prompt, _, curve = prompt_tune(bb, ds, lab.train_config(args.task))
    return _finish(args, cfg, bb, prompt, curve, "tune")


def cmd_transfer(args) -> int:
    cfg = _config(args)
    bb = _backbone(args, cfg)
    lab, ds = _target(args, cfg, bb)
    prompt, _, curve = vanilla_pot(bb, load_prompt(args.prompt_in[0]), ds, lab.train_config(args.task))
    return _finish(args, cfg, bb, prompt, curve, "transfer")


def cmd_panda(args) -> int:
    cfg = _config(args)
    bb = _backbone(args, cfg)
    lab, ds = _target(args, cfg, bb)
    source = load_prompt(args.prompt_in[0])
    if args.sim is not None:
        sim = args.sim
    else:
        # similarity against the target's own tuned prompt, both on their own samples
        src_task = source.task_id if source.task_id in cfg.task_ids else args.task
        e_s = task_embedding(bb, source, lab.sample(src_task))
        sim = metric_ours(e_s, lab.embedding(args.task))
    teacher = make_teacher(lab.train_config(args.task).teacher_kind, bb, source, ds, lab.train_config(args.task))
    prompt, _, curve = panda_train(bb, teacher, ds, sim, lab.train_config(args.task))
    print(f"sim {sim:.4f}")
    return _finish(args, cfg, bb, prompt, curve, "panda")


def cmd_metric(args) -> int:
    if len(args.prompt_in) != 2:
        raise SystemExit("metric needs exactly two --prompt-in files")
    cfg = _config(args)
    bb = _backbone(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    lab = harness.Lab(cfg, bb, seed)
    a, b = (load_prompt(p) for p in args.prompt_in)
    for p in (a, b):
        if p.task_id not in cfg.task_ids:
            raise SystemExit(f"prompt task {p.task_id!r} is not in the configured family")
    if args.metric == "ours":
        value = metric_ours(task_embedding(bb, a, lab.sample(a.task_id)),
                            task_embedding(bb, b, lab.sample(b.task_id)))
    elif args.metric == "eavg":
        value = metric_eavg(a, b)
    else:
        value = metric_on(bb, a, b, lab.probes(a.task_id, b.task_id))
    print(f"{args.metric}({a.task_id},{b.task_id}) = {value!r}")
    if args.out:
        out = _out_dir(args, Path("."))
        (out / "metric.csv").write_text(
            f"metric,source_id,target_id,value\n{args.metric},{a.task_id},{b.task_id},{value!r}\n",
            newline="\n")
        harness.write_manifest(cfg, out)
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    if not cfg.out_dir:
        raise SystemExit("matrix needs --out")
    if args.metric:
        cfg = replace(cfg, metrics=tuple(args.metric))
    reports, _ = harness.run_matrix(cfg, backbone=_backbone(args, cfg))
    print(f"{len(reports)} reports -> {cfg.out_dir}")
    return 0


def cmd_correlate(args) -> int:
    reports = harness.reports_from_csv(Path(args.reports).read_text())
    per_target, mean = harness.evaluate_correlation(reports, args.metric)
    lines = ["target_id,spearman"] + [f"{t},{v!r}" for t, v in sorted(per_target.items())]
    lines.append(f"mean,{mean!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args, Path("."))
        (out / f"correlation_{args.metric}.csv").write_text(text, newline="\n")
    sys.stdout.write(text)
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = _config(args)
    sweep = harness.sweep_lambda(cfg, backbone=_backbone(args, cfg))
    sys.stdout.write(sweep.to_csv())
    return 0


def cmd_sweep_samples(args) -> int:
    cfg = _config(args)
    sweep = harness.sweep_samples(cfg, backbone=_backbone(args, cfg))
    sys.stdout.write(sweep.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pandalab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, *, task=False, prompts=False, prompt_out=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--backbone", help="backbone checkpoint (default: build from config)")
        sp.add_argument("--workers", type=int)
        if task:
            sp.add_argument("--task", required=True, help="target task id")
        if prompts:
            sp.add_argument("--prompt-in", action="append", required=True, default=None)
        if prompt_out:
            sp.add_argument("--prompt-out", required=True)
        sp.set_defaults(func=fn)
        return sp

    add("gen-tasks", cmd_gen_tasks, "export the task family as text splits")
    add("pretrain", cmd_pretrain, "build (and optionally pretrain) the backbone checkpoint")
    add("tune", cmd_tune, "prompt-tune on one task", task=True, prompt_out=True)
    add("transfer", cmd_transfer, "vanilla prompt transfer to a target task",
        task=True, prompts=True, prompt_out=True)
    sp = add("panda", cmd_panda, "distillation-based prompt transfer",
             task=True, prompts=True, prompt_out=True)
    sp.add_argument("--teacher", choices=TEACHER_KINDS)
    sp.add_argument("--kd-loss", choices=KD_KINDS)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--sim", type=float, help="fixed similarity instead of computing it")
    sp = add("metric", cmd_metric, "score two saved prompts", prompts=True)
    sp.add_argument("--metric", choices=harness.METRICS, default="ours")
    sp = add("matrix", cmd_matrix, "all pairs x seeds: reports, matrices, curves")
    sp.add_argument("--metric", choices=harness.METRICS, action="append",
                    help="restrict the metrics computed (repeatable)")
    sp = sub.add_parser("correlate", help="Spearman of a metric against first-epoch transfer")
    sp.add_argument("--reports", required=True)
    sp.add_argument("--metric", choices=harness.METRICS, default="ours")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_correlate)
    sp = add("sweep-lambda", cmd_sweep_lambda, "distillation accuracy over the lambda grid")
    sp.add_argument("--teacher", choices=TEACHER_KINDS)
    sp.add_argument("--kd-loss", choices=KD_KINDS)
    add("sweep-samples", cmd_sweep_samples, "metric stability over representative-set sizes")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except harness.PairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
