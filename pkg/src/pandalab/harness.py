"""Experiment orchestration: transfer pairs, similarity matrices, sweeps.

A run is described by an :class:`ExperimentConfig`, read from a flat
``key = value`` text file. Every training job is deterministic given its
seed, so outputs do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import platform
import re
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .backbone import Backbone, BackboneConfig, build_backbone, pretrain_backbone
from .metric import (DegenerateError, SimilarityMatrix, TaskEmbedding, metric_eavg, metric_on,
                     metric_ours, spearman, task_embedding)
from .prompt import InitMode, SoftPrompt
from .taskgen import Dataset, Split, TaskSpec, gen_task, pretraining_corpus, representative_sample
from .train import (Head, TrainConfig, TrainCurve, make_teacher, panda_train, prompt_tune,
                    vanilla_pot)

log = logging.getLogger(__name__)

METRICS = ("ours", "eavg", "on")
METHODS = ("prompt_tune", "vanilla_pot", "panda")
DEFAULT_LAMBDAS = (0.01, 0.05, 0.5, 1.0, 5.0)
DEFAULT_NS = (50, 100, 200, 300)


@dataclass(frozen=True)
class FamilyTask:
    task_id: str
    theta: float = 0.0
    group: str = ""
    n_train: int = 200
    role: str = "both"  # source, target or both


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tasks: list[FamilyTask] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    family_id: int = 0
    n_dev: int = 300
    noise_rate: float = 0.0
    support: int = 2
    data_seed: int = 0
    metrics: tuple[str, ...] = METRICS
    sample_count: int = 100
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    sample_sizes: tuple[int, ...] = DEFAULT_NS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pretrain_steps: int = 0
    pretrain_lr: float = 3e-3
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("ExperimentConfig.seeds must be non-empty")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids in family")
        for m in self.metrics:
            if m not in METRICS:
                raise ValueError(f"unknown metric {m!r}")

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    @property
    def sources(self) -> list[str]:
        return [t.task_id for t in self.tasks if t.role in ("source", "both")]

    @property
    def targets(self) -> list[str]:
        return [t.task_id for t in self.tasks if t.role in ("target", "both")]

    @property
    def groups(self) -> dict[str, str]:
        return {t.task_id: t.group or t.task_id for t in self.tasks}

    def task(self, task_id: str) -> FamilyTask:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"unknown task {task_id!r}")

    def spec(self, task_id: str, seed: int) -> TaskSpec:
        t = self.task(task_id)
        index = self.task_ids.index(task_id)
        data_seed = int(np.random.SeedSequence([self.data_seed, seed, index]).generate_state(1)[0])
        return TaskSpec(task_id, family_id=self.family_id, theta=t.theta, noise_rate=self.noise_rate,
                        n_train=t.n_train, n_dev=self.n_dev, seed=data_seed,
                        seq_len=12, vocab_size=self.backbone.vocab_size, support=self.support)


# --- config file ---------------------------------------------------------

_ANGLE = re.compile(r"^\s*(?P<num>[0-9.]*)\s*\*?\s*pi\s*(?:/\s*(?P<den>[0-9.]+))?\s*$")


def parse_angle(text: str) -> float:
    """Float or a multiple of pi such as ``pi/2`` or ``3pi/8``."""
    m = _ANGLE.match(text)
    if m:
        num = float(m.group("num")) if m.group("num") else 1.0
        den = float(m.group("den")) if m.group("den") else 1.0
        return num * math.pi / den
    return float(text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(BackboneConfig):
        lines.append(f"backbone.{f.name} = {_fmt(getattr(cfg.backbone, f.name))}")
    for f in fields(TrainConfig):
        if f.name == "init":
            lines.append(f"train.init = {cfg.train.init.kind}:{cfg.train.init.std!r}:"
                         f"{cfg.train.init.density!r}:{cfg.train.init.value!r}")
        else:
            lines.append(f"train.{f.name} = {_fmt(getattr(cfg.train, f.name))}")
    for name in ("family_id", "n_dev", "noise_rate", "support", "data_seed", "metrics",
                 "sample_count", "lambdas", "sample_sizes", "seeds", "pretrain_steps",
                 "pretrain_lr", "workers"):
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    if cfg.out_dir is not None:
        lines.append(f"out_dir = {cfg.out_dir}")
    for t in cfg.tasks:
        lines.append(f"task.{t.task_id} = theta:{t.theta!r} group:{t.group} "
                     f"n_train:{t.n_train} role:{t.role}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Read the flat ``key = value`` format written by :func:`dump_config`.

    Unknown keys under ``manifest.`` are ignored so a manifest can be fed
    back in as a config.
    """
    bb, tr, top, tasks = {}, {}, {}, []
    bb_types = {f.name: f.type for f in fields(BackboneConfig)}
    tr_fields = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("manifest."):
            continue
        if key.startswith("backbone."):
            name = key.split(".", 1)[1]
            if name not in bb_types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            bb[name] = int(value)
        elif key.startswith("train."):
            name = key.split(".", 1)[1]
            if name not in tr_fields:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            tr[name] = value
        elif key.startswith("task."):
            opts = dict(item.split(":", 1) for item in value.split())
            tasks.append(FamilyTask(key.split(".", 1)[1], parse_angle(opts.get("theta", "0")),
                                    opts.get("group", ""), int(opts.get("n_train", 200)),
                                    opts.get("role", "both")))
        else:
            top[key] = value
    train_kwargs = {}
    for name, value in tr.items():
        if name == "init":
            kind, std, density, const = value.split(":")
            train_kwargs[name] = InitMode(kind, float(std), float(density), float(const))
        elif name in ("lr", "lam", "weight_decay", "teacher_fraction"):
            train_kwargs[name] = float(value)
        elif name in ("batch_size", "epochs", "seed", "prompt_len"):
            train_kwargs[name] = int(value)
        else:
            train_kwargs[name] = value
    kw = {}
    listy = {"metrics": str, "lambdas": float, "sample_sizes": int, "seeds": int}
    scalar = {"family_id": int, "n_dev": int, "noise_rate": float, "support": int, "data_seed": int,
              "sample_count": int, "pretrain_steps": int, "pretrain_lr": float, "workers": int,
              "out_dir": str}
    for key, value in top.items():
        if key in listy:
            kw[key] = tuple(listy[key](v.strip()) for v in value.split(",") if v.strip())
        elif key in scalar:
            kw[key] = scalar[key](value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return ExperimentConfig(backbone=BackboneConfig(**bb), tasks=tasks,
                            train=TrainConfig(**train_kwargs), **kw)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def config_hash(cfg: ExperimentConfig) -> str:
    text = dump_config(replace(cfg, out_dir=None, workers=1))
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(cfg: ExperimentConfig, out_dir, extra: dict | None = None) -> Path:
    """Config plus hash, seeds and versions; loadable again as a config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"manifest.config_hash = {config_hash(cfg)}",
             f"manifest.seeds = {_fmt(cfg.seeds)}",
             f"manifest.pandalab = {__version__}",
             f"manifest.numpy = {np.__version__}",
             f"manifest.python = {platform.python_version()}"]
    for k, v in (extra or {}).items():
        lines.append(f"manifest.{k} = {v}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n" + dump_config(replace(cfg, out_dir=None)), newline="\n")
    return path


# --- default family --------------------------------------------------------

DEFAULT_SOURCE_THETAS = (0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2)
DEFAULT_TARGET_THETAS = (0.0, math.pi / 4, math.pi / 2)


def default_train_config(**overrides) -> TrainConfig:
    """Input-concat prompts with a gentle learning rate.

    Slower steps keep the tuned prompt tied to its initialization less
    than to the task, which is what makes the CLS shift informative.
    """
    base = dict(prompt_mode="input_concat", lr=3e-3, epochs=20)
    base.update(overrides)
    return TrainConfig(**base)


def default_config(**overrides) -> ExperimentConfig:
    """Five sources and three targets along one rotation family.

    Sources have 200 training samples, targets 128 (the low-resource
    side of a transfer). Groups split the family at pi/4.
    """
    tasks = [FamilyTask(f"S{i}", th, "A" if th < math.pi / 4 else "B", 200, "source")
             for i, th in enumerate(DEFAULT_SOURCE_THETAS)]
    tasks += [FamilyTask(f"T{i}", th, "A" if th < math.pi / 4 else "B", 128, "target")
              for i, th in enumerate(DEFAULT_TARGET_THETAS)]
    kw = dict(tasks=tasks, train=default_train_config(), pretrain_steps=1000)
    kw.update(overrides)
    return ExperimentConfig(**kw)


# --- lab: cached per-seed artifacts ---------------------------------------

def prepare_backbone(cfg: ExperimentConfig) -> Backbone:
    bb = build_backbone(cfg.backbone)
    if cfg.pretrain_steps > 0:
        corpus = pretraining_corpus(4096, vocab_size=cfg.backbone.vocab_size, seed=cfg.backbone.seed)
        bb.unfreeze()
        pretrain_backbone(bb, corpus, cfg.pretrain_steps, lr=cfg.pretrain_lr, seed=cfg.backbone.seed)
    return bb


class Lab:
    """Per-seed cache of datasets, tuned prompts and task embeddings."""

    def __init__(self, cfg: ExperimentConfig, backbone: Backbone, seed: int):
        self.cfg, self.backbone, self.seed = cfg, backbone, seed
        self._data: dict[str, Dataset] = {}
        self._tuned: dict[str, tuple[SoftPrompt, Head, TrainCurve]] = {}
        self._emb: dict[tuple[str, int], TaskEmbedding] = {}

    def dataset(self, task_id: str) -> Dataset:
        if task_id not in self._data:
            self._data[task_id] = gen_task(self.cfg.spec(task_id, self.seed))
        return self._data[task_id]

    def train_config(self, task_id: str) -> TrainConfig:
        """Training config for runs on ``task_id``: the run seed mixed with the task's index.

        Every task gets its own prompt init, head init and batch order, and
        all target-side methods for one target share that stream.
        """
        index = self.cfg.task_ids.index(task_id)
        mixed = int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])
        return replace(self.cfg.train, seed=mixed)

    def tuned(self, task_id: str) -> tuple[SoftPrompt, Head, TrainCurve]:
        if task_id not in self._tuned:
            self._tuned[task_id] = prompt_tune(self.backbone, self.dataset(task_id),
                                               self.train_config(task_id))
        return self._tuned[task_id]

    def sample(self, task_id: str, n: int | None = None) -> Split:
        return representative_sample(self.dataset(task_id), n or self.cfg.sample_count, seed=self.seed)

    def embedding(self, task_id: str, n: int | None = None) -> TaskEmbedding:
        key = (task_id, n or self.cfg.sample_count)
        if key not in self._emb:
            self._emb[key] = task_embedding(self.backbone, self.tuned(task_id)[0], self.sample(task_id, n))
        return self._emb[key]

    def probes(self, a: str, b: str) -> np.ndarray:
        first, second = sorted((a, b), key=self.cfg.task_ids.index)
        if first == second:
            return self.sample(first).tokens
        return np.concatenate([self.sample(first).tokens, self.sample(second).tokens])

    def metric(self, name: str, a: str, b: str) -> float:
        if name == "ours":
            return metric_ours(self.embedding(a), self.embedding(b))
        if name == "eavg":
            return metric_eavg(self.tuned(a)[0], self.tuned(b)[0])
        if name == "on":
            return metric_on(self.backbone, self.tuned(a)[0], self.tuned(b)[0], self.probes(a, b))
        raise ValueError(f"unknown metric {name!r}")


# --- reports -------------------------------------------------------------

REPORT_FIELDS = (["source_id", "target_id", "seed", "metric_ours", "metric_eavg", "metric_on"]
                 + [f"{kind}_acc_{m}" for m in METHODS for kind in ("first_epoch", "final")])


@dataclass
class TransferReport:
    source_id: str
    target_id: str
    seed: int
    metrics: dict[str, float]
    first_epoch_acc: dict[str, float]
    final_acc: dict[str, float]
    curves: dict[str, TrainCurve] = field(default_factory=dict, repr=False, compare=False)

    def row(self) -> dict[str, object]:
        out: dict[str, object] = {"source_id": self.source_id, "target_id": self.target_id,
                                  "seed": self.seed}
        for m in METRICS:
            out[f"metric_{m}"] = self.metrics.get(m, float("nan"))
        for m in METHODS:
            out[f"first_epoch_acc_{m}"] = self.first_epoch_acc[m]
            out[f"final_acc_{m}"] = self.final_acc[m]
        return out


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def reports_to_csv(reports: Iterable[TransferReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        row = r.row()
        w.writerow([_cell(row[k]) for k in REPORT_FIELDS])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[TransferReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(TransferReport(
            row["source_id"], row["target_id"], int(row["seed"]),
            {m: float(row[f"metric_{m}"]) for m in METRICS},
            {m: float(row[f"first_epoch_acc_{m}"]) for m in METHODS},
            {m: float(row[f"final_acc_{m}"]) for m in METHODS}))
    return out


class PairError(RuntimeError):
    """A source-target job failed; carries the pair for the caller."""

    def __init__(self, source: str, target: str, seed: int, cause: BaseException):
        super().__init__(f"pair {source} -> {target} (seed {seed}) failed: {cause!r}")
        self.source, self.target, self.seed = source, target, seed


# --- protocols -----------------------------------------------------------

def run_pair(cfg: ExperimentConfig, source: str, target: str, seed: int,
             lab: Lab | None = None, backbone: Backbone | None = None) -> TransferReport:
    """Train source and target prompts, score the pair, and run the three target-side methods."""
    for t in (source, target):
        cfg.task(t)
    if lab is None:
        lab = Lab(cfg, backbone if backbone is not None else prepare_backbone(cfg), seed)
    bb, tcfg = lab.backbone, lab.train_config(target)
    before = bb.checksum()
    try:
        src_prompt = lab.tuned(source)[0]
        base_prompt, _, base_curve = lab.tuned(target)
        metrics = {m: lab.metric(m, source, target) for m in cfg.metrics}
        sim = metrics["ours"] if "ours" in metrics else lab.metric("ours", source, target)
        target_ds = lab.dataset(target)
        _, _, pot_curve = vanilla_pot(bb, src_prompt, target_ds, tcfg)
        teacher = make_teacher(tcfg.teacher_kind, bb, src_prompt, target_ds, tcfg)
        _, _, panda_curve = panda_train(bb, teacher, target_ds, sim, tcfg)
    except Exception as exc:
        raise PairError(source, target, seed, exc) from exc
    if bb.checksum() != before:
        raise RuntimeError("backbone weights changed during run_pair")
    curves = {"prompt_tune": base_curve, "vanilla_pot": pot_curve, "panda": panda_curve}
    return TransferReport(source, target, seed, metrics,
                          {k: c.first_epoch_dev_accuracy for k, c in curves.items()},
                          {k: c.best_dev_accuracy for k, c in curves.items()}, curves)


def _pairs(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    return [(s, t) for s in cfg.sources for t in cfg.targets]


def _lab(cfg, backbone, seed, labs):
    if labs is None:
        return Lab(cfg, backbone, seed)
    if seed not in labs:
        labs[seed] = Lab(cfg, backbone, seed)
    return labs[seed]


def _seed_job(args):
    cfg, backbone, seed, pairs, labs = args
    lab = _lab(cfg, backbone, seed, labs)
    done, failure = [], None
    for s, t in pairs:
        try:
            done.append(run_pair(cfg, s, t, seed, lab=lab))
        except PairError as exc:
            failure = exc
            break
    sims = {m: _matrix_values(lab, m) for m in cfg.metrics} if failure is None else {}
    return done, sims, failure


def _matrix_values(lab: Lab, metric: str) -> np.ndarray:
    ids = lab.cfg.task_ids
    n = len(ids)
    vals = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            vals[i, j] = vals[j, i] = lab.metric(metric, ids[i], ids[j])
    return vals


def _map(fn, jobs, workers: int):
    # shared in-process labs cannot cross a process boundary
    if workers <= 1 or len(jobs) <= 1 or jobs[0][-1] is not None:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_matrix(cfg: ExperimentConfig, backbone: Backbone | None = None,
               labs: dict[int, Lab] | None = None):
    """All source x target pairs over all seeds, plus one seed-averaged matrix per metric.

    Writes outputs when ``cfg.out_dir`` is set. If a pair fails, the
    reports completed so far are still written and the error names the pair.
    Passing a ``labs`` dict (seed -> Lab) reuses and fills per-seed caches;
    this runs in-process.
    """
    if len(cfg.tasks) < 2:
        raise ValueError("run_matrix needs at least two tasks")
    bb = backbone if backbone is not None else prepare_backbone(cfg)
    before = bb.checksum()
    pairs = _pairs(cfg)
    results = _map(_seed_job, [(cfg, bb, s, pairs, labs) for s in cfg.seeds], cfg.workers)
    reports = [r for done, _, _ in results for r in done]
    failure = next((f for _, _, f in results if f is not None), None)
    matrices = {}
    if failure is None:
        for m in cfg.metrics:
            vals = np.mean([sims[m] for _, sims, _ in results], axis=0)
            matrices[m] = SimilarityMatrix(cfg.task_ids, (vals + vals.T) / 2)
    if bb.checksum() != before:
        raise RuntimeError("backbone weights changed during run_matrix")
    if cfg.out_dir:
        write_outputs(cfg, reports, matrices, bb)
    if failure is not None:
        raise failure
    return reports, matrices


def write_outputs(cfg: ExperimentConfig, reports: Sequence[TransferReport],
                  matrices: dict[str, SimilarityMatrix], backbone: Backbone | None = None) -> None:
    out = Path(cfg.out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "reports.csv").write_text(reports_to_csv(reports), newline="\n")
    for name, mat in matrices.items():
        (out / f"matrix_{name}.csv").write_text(mat.to_csv(), newline="\n")
        (out / f"heatmap_{name}.csv").write_text(mat.to_long_csv(), newline="\n")
    for r in reports:
        for method, curve in r.curves.items():
            (out / "curves" / f"{r.source_id}__{r.target_id}_{r.seed}_{method}.csv").write_text(
                curve.to_csv(), newline="\n")
    extra = {"backbone_checksum": backbone.checksum()} if backbone is not None else None
    write_manifest(cfg, out, extra)


def evaluate_correlation(reports: Sequence[TransferReport], metric_name: str):
    """Per-target Spearman between a metric and first-epoch vanilla-PoT accuracy.

    Computed per (target, seed) over the sources, then averaged over seeds.
    Constant columns are skipped with a warning. Returns
    ``(per_target, mean)``.
    """
    cells: dict[tuple[str, int], list[TransferReport]] = {}
    for r in reports:
        cells.setdefault((r.target_id, r.seed), []).append(r)
    per_target: dict[str, list[float]] = {}
    for (target, seed), rows in sorted(cells.items()):
        if len(rows) < 2:
            raise ValueError(f"target {target!r} needs at least 2 sources for a rank correlation")
        rows = sorted(rows, key=lambda r: r.source_id)
        xs = [r.metrics[metric_name] for r in rows]
        ys = [r.first_epoch_acc["vanilla_pot"] for r in rows]
        try:
            rho = spearman(xs, ys)
        except DegenerateError:
            warnings.warn(f"constant column for target {target!r} seed {seed} "
                          f"(metric {metric_name}); excluded", RuntimeWarning, stacklevel=2)
            continue
        per_target.setdefault(target, []).append(rho)
    means = {t: float(np.mean(v)) for t, v in per_target.items()}
    overall = float(np.mean(list(means.values()))) if means else float("nan")
    return means, overall


@dataclass
class LambdaSweep:
    pairs: list[tuple[str, str]]
    lambdas: list[float]
    acc: np.ndarray  # [pairs x lambdas], mean over seeds
    baseline: np.ndarray  # [pairs], mean prompt_tune accuracy
    sims: np.ndarray  # [pairs], mean similarity used for the KD weight

    def column(self, lam: float) -> np.ndarray:
        return self.acc[:, self.lambdas.index(lam)]

    def to_csv(self) -> str:
        head = ["source_id", "target_id", "sim", "prompt_tune"] + [f"lambda={l!r}" for l in self.lambdas]
        rows = [",".join(head)]
        for (s, t), sim, base, accs in zip(self.pairs, self.sims, self.baseline, self.acc):
            rows.append(",".join([s, t, repr(float(sim)), repr(float(base))]
                                 + [repr(float(a)) for a in accs]))
        return "\n".join(rows) + "\n"


def _lambda_job(args):
    cfg, bb, seed, pairs, lambdas, labs = args
    lab = _lab(cfg, bb, seed, labs)
    acc = np.zeros((len(pairs), len(lambdas)))
    base, sims = np.zeros(len(pairs)), np.zeros(len(pairs))
    for i, (s, t) in enumerate(pairs):
        ds = lab.dataset(t)
        src = lab.tuned(s)[0]
        base[i] = lab.tuned(t)[2].best_dev_accuracy
        sims[i] = lab.metric("ours", s, t)
        tcfg = lab.train_config(t)
        teacher = make_teacher(tcfg.teacher_kind, bb, src, ds, tcfg)
        for j, lam in enumerate(lambdas):
            _, _, curve = panda_train(bb, teacher, ds, sims[i], replace(tcfg, lam=lam))
            acc[i, j] = curve.best_dev_accuracy
    return acc, base, sims


def sweep_lambda(cfg: ExperimentConfig, lambdas: Sequence[float] | None = None,
                 pairs: Sequence[tuple[str, str]] | None = None,
                 backbone: Backbone | None = None, labs: dict[int, Lab] | None = None) -> LambdaSweep:
    """Distillation accuracy per weighting factor and pair, averaged over seeds."""
    lambdas = list(cfg.lambdas if lambdas is None else lambdas)
    if not lambdas or any(l < 0 for l in lambdas):
        raise ValueError("lambda grid must be non-empty and non-negative")
    pairs = list(pairs or _pairs(cfg))
    bb = backbone if backbone is not None else prepare_backbone(cfg)
    before = bb.checksum()
    results = _map(_lambda_job, [(cfg, bb, s, pairs, lambdas, labs) for s in cfg.seeds], cfg.workers)
    sweep = LambdaSweep(pairs, lambdas, np.mean([r[0] for r in results], axis=0),
                        np.mean([r[1] for r in results], axis=0),
                        np.mean([r[2] for r in results], axis=0))
    if bb.checksum() != before:
        raise RuntimeError("backbone weights changed during sweep_lambda")
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "sweep_lambda.csv").write_text(sweep.to_csv(), newline="\n")
        write_manifest(cfg, cfg.out_dir, {"backbone_checksum": bb.checksum()})
    return sweep


@dataclass
class SampleSweep:
    pairs: list[tuple[str, str]]
    ns: list[int]
    values: np.ndarray  # [pairs x ns], mean over seeds
    std: np.ndarray  # [pairs], std across ns of the per-seed values, averaged over seeds

    def to_csv(self) -> str:
        head = ["source_id", "target_id"] + [f"n={n}" for n in self.ns] + ["std"]
        rows = [",".join(head)]
        for (s, t), vals, sd in zip(self.pairs, self.values, self.std):
            rows.append(",".join([s, t] + [repr(float(v)) for v in vals] + [repr(float(sd))]))
        return "\n".join(rows) + "\n"


def _samples_job(args):
    cfg, bb, seed, pairs, ns, labs = args
    lab = _lab(cfg, bb, seed, labs)
    vals = np.zeros((len(pairs), len(ns)))
    for i, (s, t) in enumerate(pairs):
        for j, n in enumerate(ns):
            vals[i, j] = metric_ours(lab.embedding(s, n), lab.embedding(t, n))
    return vals


def sweep_samples(cfg: ExperimentConfig, ns: Sequence[int] | None = None,
                  pairs: Sequence[tuple[str, str]] | None = None,
                  backbone: Backbone | None = None, labs: dict[int, Lab] | None = None) -> SampleSweep:
    """Our metric per representative-set size, with the per-pair spread across sizes."""
    ns = list(cfg.sample_sizes if ns is None else ns)
    if max(ns) > cfg.n_dev:
        raise ValueError(f"sample size {max(ns)} exceeds the dev split size {cfg.n_dev}")
    pairs = list(pairs or [(s, t) for s in cfg.sources for t in cfg.targets if s != t])
    bb = backbone if backbone is not None else prepare_backbone(cfg)
    results = _map(_samples_job, [(cfg, bb, s, pairs, ns, labs) for s in cfg.seeds], cfg.workers)
    stack = np.array(results)
    sweep = SampleSweep(pairs, ns, stack.mean(axis=0), stack.std(axis=2).mean(axis=0))
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out_dir) / "sweep_samples.csv").write_text(sweep.to_csv(), newline="\n")
        write_manifest(cfg, cfg.out_dir, {"backbone_checksum": bb.checksum()})
    return sweep


def _teacher_job(args):
    cfg, bb, seed, pairs, kinds, labs = args
    lab = _lab(cfg, bb, seed, labs)
    acc = np.zeros((len(pairs), len(kinds)))
    for i, (s, t) in enumerate(pairs):
        ds, src = lab.dataset(t), lab.tuned(s)[0]
        sim = lab.metric("ours", s, t)
        for j, kind in enumerate(kinds):
            tcfg = replace(lab.train_config(t), teacher_kind=kind)
            teacher = make_teacher(kind, bb, src, ds, tcfg)
            acc[i, j] = panda_train(bb, teacher, ds, sim, tcfg)[2].best_dev_accuracy
    return acc


def compare_teachers(cfg: ExperimentConfig, kinds: Sequence[str] = ("target_like", "source", "random"),
                     pairs: Sequence[tuple[str, str]] | None = None,
                     backbone: Backbone | None = None,
                     labs: dict[int, Lab] | None = None) -> dict[str, float]:
    """Mean distillation accuracy per teacher kind over pairs and seeds."""
    kinds = list(kinds)
    pairs = list(pairs or _pairs(cfg))
    bb = backbone if backbone is not None else prepare_backbone(cfg)
    results = _map(_teacher_job, [(cfg, bb, s, pairs, kinds, labs) for s in cfg.seeds], cfg.workers)
    means = np.mean(results, axis=(0, 1))
    return {k: float(v) for k, v in zip(kinds, means)}
