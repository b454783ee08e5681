"""Soft-prompt parameters: layouts, initialization, transfer copies and files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INPUT_CONCAT = "input_concat"
PREFIX = "prefix"
MODES = (INPUT_CONCAT, PREFIX)
DEFAULT_PROMPT_LEN = 20

PROMPT_MAGIC = b"PANDAPRM"
PROMPT_VERSION = 1
_ORIGIN_KINDS = ("random", "transferred", "target_like")


@dataclass(frozen=True)
class PromptLayout:
    """Where a prompt goes and the backbone dims it must match."""

    mode: str
    d_model: int
    n_layers: int = 1
    n_heads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}; expected one of {MODES}")
        if min(self.d_model, self.n_layers, self.n_heads) < 1:
            raise ValueError("prompt layout dims must be >= 1")

    @classmethod
    def for_backbone(cls, config, mode: str = PREFIX) -> PromptLayout:
        return cls(mode, config.d_model, config.n_layers, config.n_heads)

    def shape(self, prompt_len: int) -> tuple[int, ...]:
        if self.mode == INPUT_CONCAT:
            return (prompt_len, self.d_model)
        return (self.n_layers, 2, prompt_len, self.d_model)


@dataclass(frozen=True)
class Origin:
    kind: str = "random"
    source: str | None = None

    def __post_init__(self):
        if self.kind not in _ORIGIN_KINDS:
            raise ValueError(f"unknown origin kind {self.kind!r}")


@dataclass
class SoftPrompt:
    layout: PromptLayout
    params: np.ndarray
    origin: Origin = Origin()
    task_id: str | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim < 2 or self.params.shape != self.layout.shape(self.params.shape[-2]):
            raise ValueError(f"params shape {self.params.shape} does not fit layout {self.layout}")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("prompt params must be finite")

    @property
    def mode(self) -> str:
        return self.layout.mode

    @property
    def prompt_len(self) -> int:
        return self.params.shape[-2]

    def token_vectors(self) -> np.ndarray:
        """One row per prompt position: [prompt_len x features]."""
        if self.mode == INPUT_CONCAT:
            return self.params
        return np.moveaxis(self.params, 2, 0).reshape(self.prompt_len, -1)

    def copy(self) -> SoftPrompt:
        return SoftPrompt(self.layout, self.params.copy(), self.origin, self.task_id)


@dataclass(frozen=True)
class InitMode:
    kind: str = "normal"
    std: float = 0.02
    density: float = 1.0
    value: float = 0.0

    @classmethod
    def normal(cls, std: float = 0.02) -> InitMode:
        return cls("normal", std=std)

    @classmethod
    def sparse(cls, density: float = 0.1, std: float = 0.02) -> InitMode:
        return cls("sparse", std=std, density=density)

    @classmethod
    def constant(cls, value: float = 0.0) -> InitMode:
        return cls("constant", value=value)

    def __post_init__(self):
        if self.kind not in ("normal", "sparse", "constant"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if self.std <= 0:
            raise ValueError("std must be positive")


def init_prompt(init: InitMode, layout: PromptLayout, seed: int,
                prompt_len: int = DEFAULT_PROMPT_LEN) -> SoftPrompt:
    if prompt_len < 1:
        raise ValueError("prompt_len must be >= 1")
    shape = layout.shape(prompt_len)
    rng = np.random.default_rng(seed)
    if init.kind == "constant":
        params = np.full(shape, float(init.value))
    elif init.kind == "normal":
        params = rng.normal(0.0, init.std, size=shape)
    else:
        keep = rng.random(shape) < init.density
        params = np.where(keep, rng.normal(0.0, init.std, size=shape), 0.0)
    return SoftPrompt(layout, params, Origin("random"))


def clone_for_transfer(source: SoftPrompt, target_layout: PromptLayout | None = None) -> SoftPrompt:
    """Deep copy of a trained prompt, marked as transferred from its task."""
    if target_layout is not None and target_layout != source.layout:
        raise ValueError(f"cannot transfer prompt with layout {source.layout} onto {target_layout}")
    return SoftPrompt(source.layout, source.params.copy(), Origin("transferred", source.task_id))


def _pack_str(s: str | None) -> bytes:
    raw = b"" if s is None else s.encode("utf-8")
    return struct.pack("<BH", s is not None, len(raw)) + raw


def save_prompt(p: SoftPrompt, path) -> None:
    lay = p.layout
    body = [
        PROMPT_MAGIC,
        struct.pack("<H", PROMPT_VERSION),
        struct.pack("<B", MODES.index(lay.mode)),
        struct.pack("<4I", p.prompt_len, lay.d_model, lay.n_layers, lay.n_heads),
        np.ascontiguousarray(p.params, dtype="<f8").tobytes(),
        struct.pack("<B", _ORIGIN_KINDS.index(p.origin.kind)),
        _pack_str(p.origin.source),
        _pack_str(p.task_id),
    ]
    Path(path).write_bytes(b"".join(body))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.off, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated prompt file")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str | None:
        present, n = self.unpack("<BH")
        raw = self.take(n)
        return raw.decode("utf-8") if present else None


def load_prompt(path) -> SoftPrompt:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(PROMPT_MAGIC)) != PROMPT_MAGIC:
        raise ValueError(f"{path}: not a prompt file (bad magic)")
    (version,) = r.unpack("<H")
    if version != PROMPT_VERSION:
        raise ValueError(f"{path}: prompt file version {version} is not supported "
                         f"(this build reads version {PROMPT_VERSION})")
    (mode_idx,) = r.unpack("<B")
    if mode_idx >= len(MODES):
        raise ValueError(f"{path}: bad prompt mode byte {mode_idx}")
    plen, d_model, n_layers, n_heads = r.unpack("<4I")
    layout = PromptLayout(MODES[mode_idx], d_model, n_layers, n_heads)
    shape = layout.shape(plen)
    count = int(np.prod(shape))
    params = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    (kind_idx,) = r.unpack("<B")
    if kind_idx >= len(_ORIGIN_KINDS):
        raise ValueError(f"{path}: bad origin byte {kind_idx}")
    origin = Origin(_ORIGIN_KINDS[kind_idx], r.string())
    task_id = r.string()
    if r.off != len(r.blob):
        raise ValueError(f"{path}: trailing bytes in prompt file")
    return SoftPrompt(layout, params, origin, task_id)
