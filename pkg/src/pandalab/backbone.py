"""A small pre-LN transformer encoder used as the frozen language model.

Token id 0 is the CLS token and always sits at position 0; the last id of
the vocabulary is reserved as the mask token for optional pretraining.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLS_ID = 0
CHECKPOINT_MAGIC = b"PANDALAB\0"
CHECKPOINT_VERSION = 1
_CONFIG_STRUCT = struct.Struct("<6IQ")
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneConfig.{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("BackboneConfig.vocab_size must leave room for CLS and mask ids")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1


# weight names in checkpoint order, per layer then final
_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def _weight_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        for k in _LAYER_KEYS:
            shapes[f"layer{i}.{k}"] = per_layer[k]
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    return shapes


@dataclass
class EncodeOutput:
    h_cls: np.ndarray
    all_hidden: list[np.ndarray] | None = None
    ffn_activations: list[np.ndarray] | None = None


@dataclass
class Backbone:
    config: BackboneConfig
    weights: dict[str, np.ndarray]
    frozen: bool = True
    _handles: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def unfreeze(self) -> None:
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in _weight_shapes(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def params(self, trainable: bool = False) -> dict[str, Tensor]:
        """Weights wrapped as graph leaves; constants unless ``trainable``."""
        if trainable:
            return {k: Tensor(v, requires_grad=True) for k, v in self.weights.items()}
        if not self._handles:
            self._handles = {k: Tensor(v) for k, v in self.weights.items()}
        return self._handles

    def forward(self, tokens, prompt=None, params=None, capture: bool = False,
                cls_only: bool = False):
        """Run the encoder on a [B x S] id batch.

        ``prompt`` is ``None`` or a ``(mode, Tensor)`` pair. Returns the final
        normalized hidden states [B x S' x d] plus the captured per-layer
        residual states and post-GELU FFN activations (empty unless
        ``capture``). With ``cls_only`` the last layer is evaluated for the
        CLS row alone, so the returned states have a single position.
        """
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError("tokens must be a non-empty id sequence or batch of sequences")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        W = self.params() if params is None else params
        B, S = ids.shape
        mode, u = prompt if prompt is not None else (None, None)
        plen = 0 if u is None else u.shape[-2]
        if S + plen > cfg.max_seq_len:
            raise ValueError(f"sequence length {S} + prompt {plen} exceeds max_seq_len {cfg.max_seq_len}")

        x = T.embedding(W["tok_emb"], ids)
        if mode == "input_concat":
            if u.shape != (plen, cfg.d_model):
                raise ValueError(f"prompt shape {u.shape} does not match d_model {cfg.d_model}")
            up = T.expand(T.reshape(u, (1, plen, cfg.d_model)), (B, plen, cfg.d_model))
            x = T.concat([x[:, :1], up, x[:, 1:]], axis=1)
            S = S + plen
        elif mode == "prefix":
            want = (cfg.n_layers, 2, plen, cfg.d_model)
            if u.shape != want:
                raise ValueError(f"prefix prompt shape {u.shape} does not match {want}")
        elif mode is not None:
            raise ValueError(f"unknown prompt mode {mode!r}")
        x = x + W["pos_emb"][:S]

        H, dh = cfg.n_heads, cfg.d_head
        hidden, acts = [], []
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            # only the CLS row of the last layer feeds the output unless capturing
            last_cls = cls_only and not capture and i == cfg.n_layers - 1
            Sq = 1 if last_cls else S
            a = T.layer_norm(x, W[p + "ln1_g"], W[p + "ln1_b"])
            aq = a[:, :1] if last_cls else a
            q = _heads(T.linear(aq, W[p + "wq"], W[p + "bq"]), B, Sq, H, dh)
            k = _heads(T.linear(a, W[p + "wk"], W[p + "bk"]), B, S, H, dh)
            v = _heads(T.linear(a, W[p + "wv"], W[p + "bv"]), B, S, H, dh)
            if mode == "prefix":
                pk = T.transpose(T.reshape(u[i, 0], (1, plen, H, dh)), (0, 2, 1, 3))
                pv = T.transpose(T.reshape(u[i, 1], (1, plen, H, dh)), (0, 2, 1, 3))
                k = T.concat([T.expand(pk, (B, H, plen, dh)), k], axis=2)
                v = T.concat([T.expand(pv, (B, H, plen, dh)), v], axis=2)
            scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
            ctx = T.matmul(T.softmax(scores), v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Sq, cfg.d_model))
            if last_cls:
                x = x[:, :1]
            x = x + T.linear(ctx, W[p + "wo"], W[p + "bo"])
            f = T.layer_norm(x, W[p + "ln2_g"], W[p + "ln2_b"])
            g = T.gelu(T.linear(f, W[p + "w1"], W[p + "b1"]))
            x = x + T.linear(g, W[p + "w2"], W[p + "b2"])
            if capture:
                hidden.append(x.data)
                acts.append(g.data)
        out = T.layer_norm(x, W["lnf_g"], W["lnf_b"])
        return out, hidden, acts

    def cls(self, tokens, prompt=None, params=None) -> Tensor:
        """CLS hidden state [B x d] as a graph node."""
        out, _, _ = self.forward(tokens, prompt, params, cls_only=True)
        return out[:, 0]


def _heads(x: Tensor, B: int, S: int, H: int, dh: int) -> Tensor:
    return T.transpose(T.reshape(x, (B, S, H, dh)), (0, 2, 1, 3))


def build_backbone(config: BackboneConfig) -> Backbone:
    """Seeded normal(0, 0.02) initialization; LN gains 1, biases 0. Returned frozen."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in _weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            weights[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.normal(0.0, INIT_STD, size=shape)
    return Backbone(config, weights, frozen=True)


def encode(backbone: Backbone, tokens, prompt=None, capture_activations: bool = False) -> EncodeOutput:
    """Encode one sequence (or a batch) and return the CLS state.

    ``prompt`` is a ``SoftPrompt`` or ``None``; without one this is the
    plain model path.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    packed = None
    if prompt is not None:
        if prompt.layout.d_model != backbone.config.d_model:
            raise ValueError(f"prompt d_model {prompt.layout.d_model} does not match "
                             f"backbone d_model {backbone.config.d_model}")
        packed = (prompt.layout.mode, Tensor(prompt.params))
    with T.no_grad():
        out, hidden, acts = backbone.forward(ids, packed, capture=capture_activations,
                                             cls_only=True)
    h = out.data[:, 0]
    if single:
        h = h[0]
        hidden = [a[0] for a in hidden]
        acts = [a[0] for a in acts]
    return EncodeOutput(h, hidden if capture_activations else None,
                        acts if capture_activations else None)


def markov_corpus(n_seqs: int, seq_len: int = 12, n_symbols: int = 26, seed: int = 0,
                  first_id: int = 1) -> np.ndarray:
    """Synthetic pretraining stream: CLS + a sparse first-order Markov chain."""
    rng = np.random.default_rng(seed)
    trans = rng.dirichlet(np.full(n_symbols, 0.1), size=n_symbols)
    seqs = np.empty((n_seqs, seq_len), dtype=np.int64)
    state = rng.integers(n_symbols, size=n_seqs)
    for j in range(seq_len):
        seqs[:, j] = state
        u = rng.random(n_seqs)[:, None]
        state = (u > np.cumsum(trans[state], axis=1)).sum(axis=1).clip(max=n_symbols - 1)
    return np.concatenate([np.zeros((n_seqs, 1), dtype=np.int64), seqs + first_id], axis=1)


def pretrain_backbone(backbone: Backbone, corpus, steps: int, batch_size: int = 32,
                      lr: float = 1e-3, mask_rate: float = 0.15, seed: int = 0) -> list[float]:
    """Masked-token pretraining with an output layer tied to the token embeddings.

    The backbone must be unfrozen by the caller; it is frozen again on
    return (also on error). Returns the per-step loss stream.
    """
    from .train import AdamW

    if backbone.frozen:
        raise RuntimeError("pretrain_backbone needs an unfrozen backbone; call unfreeze() first")
    cfg = backbone.config
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    try:
        corpus = np.asarray(corpus, dtype=np.int64)
        if corpus.ndim != 2 or len(corpus) == 0:
            raise ValueError("pretraining corpus is empty")
        if steps <= 0:
            return losses
        opt = AdamW(lr=lr)
        for _ in range(steps):
            batch = corpus[rng.integers(len(corpus), size=batch_size)]
            mask = rng.random(batch.shape) < mask_rate
            mask[:, 0] = False
            if not mask.any():
                mask[0, 1 + rng.integers(batch.shape[1] - 1)] = True
            inp = np.where(mask, cfg.mask_id, batch)
            W = backbone.params(trainable=True)
            out, _, _ = backbone.forward(inp, params=W)
            rows, cols = np.nonzero(mask)
            logits = T.matmul(out[rows, cols], T.transpose(W["tok_emb"]))
            loss = T.cross_entropy(logits, batch[rows, cols])
            loss.backward()
            losses.append(loss.item())
            opt.step(backbone.weights, {k: W[k].grad for k in W})
        backbone._handles = {}
        return losses
    finally:
        backbone.freeze()


def save_backbone(backbone: Backbone, path) -> None:
    cfg = backbone.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(_CONFIG_STRUCT.pack(cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
                                     cfg.d_ff, cfg.max_seq_len, cfg.seed))
        for name in _weight_shapes(cfg):
            fh.write(np.ascontiguousarray(backbone.weights[name], dtype="<f8").tobytes())


def load_backbone(path) -> Backbone:
    blob = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a backbone checkpoint (bad magic)")
    if len(blob) < n + 2 + _CONFIG_STRUCT.size:
        raise ValueError(f"{path}: truncated backbone checkpoint")
    (version,) = struct.unpack_from("<H", blob, n)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: backbone checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    cfg = BackboneConfig(*_CONFIG_STRUCT.unpack_from(blob, n + 2))
    cfg.validate()
    off = n + 2 + _CONFIG_STRUCT.size
    weights = {}
    for name, shape in _weight_shapes(cfg).items():
        size = int(np.prod(shape)) * 8
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated backbone checkpoint")
        weights[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).astype(np.float64).reshape(shape)
        off += size
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in backbone checkpoint")
    return Backbone(cfg, weights, frozen=True)


def config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
