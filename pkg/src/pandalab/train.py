"""Prompt-tuning, vanilla prompt transfer and distillation-based transfer.

The backbone is never updated here: its weights enter the graph as
constants, and only the soft prompt and the classification head carry
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .prompt import (DEFAULT_PROMPT_LEN, PREFIX, InitMode, Origin, PromptLayout, SoftPrompt,
                     clone_for_transfer, init_prompt)
from .taskgen import Dataset, Split, batches
from .tensor import Tensor

KD_KINDS = ("mse", "kl", "ce")
TEACHER_KINDS = ("source", "target_like", "random")
KD_EPS = 1e-12


@dataclass
class Head:
    weight: np.ndarray  # [d_model x num_classes]
    bias: np.ndarray  # [num_classes]

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def copy(self) -> Head:
        return Head(self.weight.copy(), self.bias.copy())


def init_head(d_model: int, num_classes: int, seed) -> Head:
    if num_classes < 2:
        raise ValueError("a classification head needs >= 2 classes")
    rng = np.random.default_rng(seed)
    return Head(rng.normal(0.0, 0.02, size=(d_model, num_classes)), np.zeros(num_classes))


class AdamW:
    """Adam with decoupled weight decay over dicts of numpy arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None]) -> None:
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k!r}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamW) -> AdamW:
    state.step(params, grads)
    return state


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    kd_loss_kind: str = "mse"
    lam: float = 0.05
    teacher_kind: str = "target_like"
    weight_decay: float = 0.0
    prompt_len: int = DEFAULT_PROMPT_LEN
    prompt_mode: str = PREFIX
    init: InitMode = field(default_factory=InitMode)
    teacher_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.kd_loss_kind not in KD_KINDS:
            raise ValueError(f"kd_loss_kind must be one of {KD_KINDS}")
        if self.teacher_kind not in TEACHER_KINDS:
            raise ValueError(f"teacher_kind must be one of {TEACHER_KINDS}")

    @property
    def teacher_epochs(self) -> int:
        return max(1, int(round(self.teacher_fraction * self.epochs)))


@dataclass
class TrainCurve:
    losses: list[float] = field(default_factory=list)
    dev_accuracy: list[float] = field(default_factory=list)

    @property
    def first_epoch_dev_accuracy(self) -> float:
        return self.dev_accuracy[0]

    @property
    def best_dev_accuracy(self) -> float:
        return max(self.dev_accuracy)

    @property
    def best_epoch(self) -> int:
        return int(np.argmax(self.dev_accuracy))

    def to_csv(self) -> str:
        rows = ["epoch,loss,dev_acc"]
        rows += [f"{i + 1},{l!r},{a!r}" for i, (l, a) in enumerate(zip(self.losses, self.dev_accuracy))]
        return "\n".join(rows) + "\n"


@dataclass
class Teacher:
    """Frozen teacher network: backbone, prompt and its own head."""

    backbone: Backbone
    prompt: SoftPrompt
    head: Head


def _seeds(seed: int):
    prompt_ss, head_ss, order_ss = np.random.SeedSequence(seed).spawn(3)
    return prompt_ss, head_ss, order_ss


def _epoch_seeds(order_ss, epochs: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(order_ss).integers(0, 2**63 - 1, size=epochs)]


def logits(backbone: Backbone, prompt: SoftPrompt | None, head: Head, tokens,
           u: Tensor | None = None, w: Tensor | None = None, b: Tensor | None = None) -> Tensor:
    """Head logits on CLS; pass graph leaves ``u``, ``w``, ``b`` to train them."""
    if prompt is not None and u is None:
        u = Tensor(prompt.params)
    packed = None if prompt is None else (prompt.mode, u)
    h = backbone.cls(tokens, packed)
    return T.linear(h, Tensor(head.weight) if w is None else w, Tensor(head.bias) if b is None else b)


def predict_proba(backbone: Backbone, prompt: SoftPrompt | None, head: Head, tokens,
                  chunk: int = 512) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = []
    with T.no_grad():
        for s in range(0, len(tokens), chunk):
            out.append(T.softmax(logits(backbone, prompt, head, tokens[s:s + chunk])).data)
    return np.concatenate(out, axis=0)


def accuracy(backbone: Backbone, prompt: SoftPrompt | None, head: Head, split: Split) -> float:
    pred = predict_proba(backbone, prompt, head, split.tokens).argmax(axis=1)
    return float(np.mean(pred == split.labels))


def kd_loss(p_teacher, p_student, kind: str = "mse") -> Tensor:
    """Distillation loss between teacher and student class distributions [N x C].

    mse: mean over samples of the summed squared difference; kl: mean
    KL(teacher || student); ce: mean cross-entropy of the student against
    the teacher's soft targets. Student probabilities are clamped at 1e-12
    inside logs. Only the student receives gradient.
    """
    pt = np.asarray(p_teacher.data if isinstance(p_teacher, Tensor) else p_teacher, dtype=np.float64)
    ps = T.as_tensor(p_student)
    if pt.shape != ps.shape or pt.ndim != 2:
        raise ValueError(f"kd_loss: shape mismatch teacher {pt.shape} vs student {ps.shape}")
    for name, p in (("teacher", pt), ("student", ps.data)):
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError(f"kd_loss: {name} rows must sum to 1")
    if kind == "mse":
        return T.mean(T.tsum(T.square(T.sub(ps, pt)), axis=1))
    logs = T.log(ps, floor=KD_EPS)
    cross = T.mean(T.tsum(T.mul(logs, -pt), axis=1))
    if kind == "ce":
        return cross
    if kind == "kl":
        safe = np.where(pt > 0, pt, 1.0)
        entropy = float(np.mean(np.sum(np.where(pt > 0, pt * np.log(safe), 0.0), axis=1)))
        return T.add(cross, entropy)
    raise ValueError(f"unknown kd loss kind {kind!r}")


def _check_task(task: Dataset) -> None:
    if len(np.unique(task.train.labels)) < 2:
        raise ValueError(f"task {task.task_id!r}: training split has a single class")
    if len(task.dev) == 0:
        raise ValueError(f"task {task.task_id!r}: empty dev split")


def _fit(backbone: Backbone, task: Dataset, config: TrainConfig, prompt: SoftPrompt, head: Head,
         order_ss, *, epochs: int | None = None, train_prompt: bool = True,
         teacher_probs: np.ndarray | None = None, kd_weight: float = 0.0):
    """Shared loop: AdamW on (prompt, head), best-dev selection, earliest tie wins."""
    if not backbone.frozen:
        raise RuntimeError("training requires a frozen backbone")
    epochs = config.epochs if epochs is None else epochs
    before = backbone.checksum()
    params = {"w": head.weight, "b": head.bias}
    if train_prompt and prompt is not None:
        params["u"] = prompt.params
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    use_kd = teacher_probs is not None and kd_weight > 0.0
    curve = TrainCurve()
    best = None
    for epoch_seed in _epoch_seeds(order_ss, epochs):
        total, count = 0.0, 0
        for batch in batches(task.train, config.batch_size, epoch_seed):
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = total_loss(backbone, prompt, head, batch.tokens, batch.labels,
                              leaves.get("u"), leaves["w"], leaves["b"],
                              teacher_probs[batch.index] if use_kd else None,
                              kd_weight, config.kd_loss_kind)
            loss.backward()
            opt.step(params, {k: t.grad for k, t in leaves.items()})
            total += loss.item() * batch.batch_size
            count += batch.batch_size
        curve.losses.append(total / count)
        acc = accuracy(backbone, prompt, head, task.dev)
        curve.dev_accuracy.append(acc)
        if best is None or acc > best[0]:
            best = (acc, None if prompt is None else prompt.params.copy(), head.copy())
    if backbone.checksum() != before:
        raise RuntimeError("backbone weights changed during training")
    out_prompt = None
    if prompt is not None:
        out_prompt = SoftPrompt(prompt.layout, best[1], prompt.origin, prompt.task_id)
    return out_prompt, best[2], curve


def _layout(backbone: Backbone, config: TrainConfig) -> PromptLayout:
    return PromptLayout.for_backbone(backbone.config, config.prompt_mode)


def prompt_tune(backbone: Backbone, task: Dataset, config: TrainConfig):
    """Train a fresh soft prompt and head on ``task``; returns (prompt, head, curve)."""
    _check_task(task)
    prompt_ss, head_ss, order_ss = _seeds(config.seed)
    prompt = init_prompt(config.init, _layout(backbone, config), prompt_ss, config.prompt_len)
    prompt.task_id = task.task_id
    head = init_head(backbone.config.d_model, task.num_classes, head_ss)
    return _fit(backbone, task, config, prompt, head, order_ss)


def vanilla_pot(backbone: Backbone, source_prompt: SoftPrompt, target_task: Dataset,
                config: TrainConfig):
    """Initialize from the source prompt, then prompt-tune on the target with a fresh head."""
    _check_task(target_task)
    prompt = clone_for_transfer(source_prompt, _layout(backbone, replace(config, prompt_mode=source_prompt.mode)))
    prompt.task_id = target_task.task_id
    _, head_ss, order_ss = _seeds(config.seed)
    head = init_head(backbone.config.d_model, target_task.num_classes, head_ss)
    return _fit(backbone, target_task, config, prompt, head, order_ss)


def fit_head(backbone: Backbone, prompt: SoftPrompt | None, task: Dataset, config: TrainConfig,
             epochs: int) -> tuple[Head, TrainCurve]:
    """Train only a head on top of a fixed prompt."""
    _check_task(task)
    _, head_ss, order_ss = _seeds(config.seed + 1)
    head = init_head(backbone.config.d_model, task.num_classes, head_ss)
    fixed = prompt.copy() if prompt is not None else None
    _, best_head, curve = _fit(backbone, task, config, fixed, head, order_ss,
                               epochs=epochs, train_prompt=False)
    return best_head, curve


def make_target_like_teacher(backbone: Backbone, source_prompt: SoftPrompt, target_task: Dataset,
                             config: TrainConfig, teacher_epochs: int | None = None):
    """Briefly tune the source prompt on the target task to get an intermediate teacher.

    ``teacher_epochs`` defaults to ``config.teacher_epochs``. With 0 the
    prompt is left as is and only a head is fitted on the target labels.
    """
    epochs = config.teacher_epochs if teacher_epochs is None else teacher_epochs
    if epochs < 0:
        raise ValueError("teacher_epochs must be >= 0")
    if epochs == 0:
        head, _ = fit_head(backbone, source_prompt, target_task, config, config.teacher_epochs)
        prompt = source_prompt.copy()
    else:
        sub = replace(config, epochs=epochs, seed=config.seed + 1)
        prompt, head, _ = vanilla_pot(backbone, source_prompt, target_task, sub)
    prompt.origin = Origin("target_like", source_prompt.task_id)
    return prompt, head


def make_teacher(kind: str, backbone: Backbone, source_prompt: SoftPrompt, target_task: Dataset,
                 config: TrainConfig) -> Teacher:
    """Teacher per kind: target_like, source (prompt kept, head fitted) or random prompt."""
    if kind == "target_like":
        prompt, head = make_target_like_teacher(backbone, source_prompt, target_task, config)
    elif kind == "source":
        prompt = source_prompt.copy()
        head, _ = fit_head(backbone, prompt, target_task, config, config.teacher_epochs)
    elif kind == "random":
        layout = source_prompt.layout
        prompt = init_prompt(config.init, layout, np.random.SeedSequence([config.seed, 0xBAD]),
                             source_prompt.prompt_len)
        head, _ = fit_head(backbone, prompt, target_task, config, config.teacher_epochs)
    else:
        raise ValueError(f"unknown teacher kind {kind!r}")
    return Teacher(backbone, prompt, head)


def panda_train(student_backbone: Backbone, teacher: Teacher, target_task: Dataset, sim: float,
                config: TrainConfig):
    """Train a fresh student prompt with label loss plus similarity-weighted distillation.

    Loss is ``ce + lam * max(sim, 0) * kd``. The teacher may sit on a
    different backbone as long as its head predicts the target's classes.
    With zero distillation weight this is exactly ``prompt_tune``.
    """
    _check_task(target_task)
    if teacher.head.num_classes != target_task.num_classes:
        raise ValueError(f"teacher head predicts {teacher.head.num_classes} classes but task "
                         f"{target_task.task_id!r} has {target_task.num_classes}")
    if teacher.head.weight.shape[0] != teacher.backbone.config.d_model:
        raise ValueError("teacher head does not match the teacher backbone width")
    kd_weight = config.lam * max(float(sim), 0.0)
    prompt_ss, head_ss, order_ss = _seeds(config.seed)
    prompt = init_prompt(config.init, _layout(student_backbone, config), prompt_ss, config.prompt_len)
    prompt.task_id = target_task.task_id
    head = init_head(student_backbone.config.d_model, target_task.num_classes, head_ss)
    probs = None
    if kd_weight > 0.0:
        t_before = (teacher.backbone.checksum(), teacher.prompt.params.tobytes(),
                    teacher.head.weight.tobytes(), teacher.head.bias.tobytes())
        probs = predict_proba(teacher.backbone, teacher.prompt, teacher.head, target_task.train.tokens)
    out = _fit(student_backbone, target_task, config, prompt, head, order_ss,
               teacher_probs=probs, kd_weight=kd_weight)
    if kd_weight > 0.0:
        t_after = (teacher.backbone.checksum(), teacher.prompt.params.tobytes(),
                   teacher.head.weight.tobytes(), teacher.head.bias.tobytes())
        if t_after != t_before:
            raise RuntimeError("teacher changed during distillation")
    return out


def total_loss(backbone: Backbone, prompt: SoftPrompt, head: Head, batch_tokens, batch_labels,
               u: Tensor, w: Tensor, b: Tensor, teacher_probs=None, kd_weight: float = 0.0,
               kind: str = "mse") -> Tensor:
    """Label loss plus optional weighted distillation term for one batch."""
    z = logits(backbone, prompt, head, batch_tokens, u=u, w=w, b=b)
    loss = T.cross_entropy(z, batch_labels)
    if teacher_probs is not None and kd_weight > 0:
        loss = T.add(loss, T.mul(kd_loss(teacher_probs, T.softmax(z), kind), kd_weight))
    return loss
