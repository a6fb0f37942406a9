"""Attention-only causal transformer (1 or 2 layers) with a forward trace and hooks.

Layers are 0-indexed in code: layer 0 is the first attention layer ("L1"),
layer 1 the second ("L2"). Parameters live in a flat ``name -> ndarray``
dict so checkpoints, Adam state and transplants can all key on names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence as Seq

import numpy as np

from . import engine as E
from .data import LABEL_POS, QUERY_POS, SEQ_LEN, Batch, ClassBank, embed_tokens

INIT_SCALE = 0.02


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 8
    label_vocab: int = 12800
    d_in: int = 64
    positional: str = "learned"  # or "sinusoidal"
    seq_len: int = SEQ_LEN

    def __post_init__(self):
        if self.num_layers not in (1, 2):
            raise ValueError("num_layers must be 1 or 2")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.seq_len != SEQ_LEN:
            raise ValueError(f"seq_len is fixed at {SEQ_LEN}")
        if self.positional not in ("learned", "sinusoidal"):
            raise ValueError("positional must be 'learned' or 'sinusoidal'")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, dh = cfg.d_model, cfg.num_heads, cfg.d_head
    shapes = {
        "embed.exemplar": (cfg.d_in, d),
        "embed.label": (cfg.label_vocab, d),
    }
    if cfg.positional == "learned":
        shapes["embed.pos"] = (cfg.seq_len, d)
    for l in range(cfg.num_layers):
        shapes[f"layers.{l}.W_Q"] = (H, d, dh)
        shapes[f"layers.{l}.W_K"] = (H, d, dh)
        shapes[f"layers.{l}.W_V"] = (H, d, dh)
        shapes[f"layers.{l}.W_O"] = (H, dh, d)
    shapes["unembed"] = (d, cfg.label_vocab)
    return shapes


def lower_names(cfg: ModelConfig) -> list[str]:
    """Embeddings plus the first attention layer."""
    return [n for n in param_shapes(cfg) if n.startswith("embed.") or n.startswith("layers.0.")]


def upper_names(cfg: ModelConfig) -> list[str]:
    """Everything after the first attention layer (second layer and unembedding)."""
    low = set(lower_names(cfg))
    return [n for n in param_shapes(cfg) if n not in low]


def partition(cfg: ModelConfig, which: str | None) -> list[str]:
    if which in (None, "none", "NONE"):
        return []
    which = which.upper()
    if which == "LOWER":
        return lower_names(cfg)
    if which == "UPPER":
        return upper_names(cfg)
    raise ValueError(f"unknown partition {which!r}")


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        name: (INIT_SCALE * rng.standard_normal(shape)).astype(dtype)
        for name, shape in param_shapes(cfg).items()
    }


def sinusoidal(seq_len: int, d: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((seq_len, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def causal_mask(T: int = SEQ_LEN) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


# --------------------------------------------------------------------- hooks


@dataclass(frozen=True)
class ZeroHead:
    """Zero a head's output.

    ``into`` picks which readers lose it: ``"all"``, ``"layers"`` (inputs of
    later layers only) or ``"output"`` (the final residual read by the
    unembedding only).
    """

    layer: int
    head: int
    into: str = "all"


@dataclass(frozen=True, eq=False)
class ClampPattern:
    """Overwrite attention rows of one head.

    ``pattern`` is (len(rows), T) or (B, len(rows), T); ``rows`` defaults to
    every query position. Rows must be causal probability vectors.
    """

    layer: int
    head: int
    pattern: np.ndarray
    rows: tuple[int, ...] | None = None


@dataclass(frozen=True, eq=False)
class FreezeFromCache:
    """Replace ``component`` of a layer with the value recorded in ``cache``.

    component is one of patterns, values, keys, queries, head_outputs.
    """

    component: str
    layer: int
    cache: "ForwardTrace"
    heads: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Temperature:
    """Divide one head's attention logits by ``T``; optionally restrict the
    query row's support to label positions."""

    layer: int
    head: int
    T: float
    label_only: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class BlockAttnEdge:
    """Mask attention edges p -> p-1 ("prev") or p -> p ("self", p >= 1)."""

    layer: int
    relation: str = "prev"
    heads: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ZeroEmbedding:
    """Zero the token+position embedding; ``into="output"`` removes only the
    embedding -> unembedding path (zero-direct-path)."""

    into: str = "all"


def ZeroDirectPath() -> ZeroEmbedding:
    return ZeroEmbedding(into="output")


COMPONENTS = ("patterns", "values", "keys", "queries", "head_outputs")
_INTO = ("all", "layers", "output")


@dataclass
class ForwardTrace:
    """Per-layer arrays are indexed ``[layer]`` with a (B, H, ...) layout."""

    patterns: list[np.ndarray] = field(default_factory=list)  # (B,H,T,T)
    queries: list[np.ndarray] = field(default_factory=list)  # (B,H,T,dh)
    keys: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    head_outputs: list[np.ndarray] = field(default_factory=list)  # (B,H,T,d)
    final_contrib: list[np.ndarray] = field(default_factory=list)  # (B,H,d) at query pos
    direct: np.ndarray | None = None  # (B,d) embedding term of the final residual
    final_resid: np.ndarray | None = None  # (B,d)

    def component(self, name: str, layer: int) -> np.ndarray:
        if name not in COMPONENTS:
            raise ValueError(f"unknown component {name!r}")
        return getattr(self, name)[layer]


def freeze_all(cache: ForwardTrace, layers: Iterable[int],
               components: Iterable[str] = COMPONENTS) -> list[FreezeFromCache]:
    return [FreezeFromCache(c, l, cache) for l in layers for c in components]


class _LayerHooks:
    """Hooks for one layer, resolved into masks and replacement arrays."""

    def __init__(self, hooks, layer: int, B: int, H: int, T: int, dtype):
        self.inv_temp = None
        self.extra_mask = None
        self.clamps: list[ClampPattern] = []
        self.freezes: dict[str, list[FreezeFromCache]] = {}
        self.zero_layers = None
        self.zero_output = None
        for h in hooks:
            if getattr(h, "layer", None) != layer:
                continue
            if isinstance(h, ZeroHead):
                if h.into not in _INTO:
                    raise ValueError(f"bad ZeroHead.into {h.into!r}")
                if h.into in ("all", "layers"):
                    self.zero_layers = _ones_h(self.zero_layers, H, dtype)
                    self.zero_layers[0, h.head] = 0
                if h.into in ("all", "output"):
                    self.zero_output = _ones_h(self.zero_output, H, dtype)
                    self.zero_output[0, h.head] = 0
            elif isinstance(h, Temperature):
                if self.inv_temp is None:
                    self.inv_temp = np.ones((1, H, 1, 1), dtype=dtype)
                self.inv_temp[0, h.head] /= h.T
                if h.label_only:
                    m = self._mask(H, T)
                    m[h.head, QUERY_POS, :] = False
                    m[h.head, QUERY_POS, list(LABEL_POS)] = True
            elif isinstance(h, BlockAttnEdge):
                m = self._mask(H, T)
                heads = range(H) if h.heads is None else h.heads
                for p in range(1, T):
                    if h.relation == "prev":
                        m[list(heads), p, p - 1] = False
                    elif h.relation == "self":
                        m[list(heads), p, p] = False
                    else:
                        raise ValueError(f"unknown relation {h.relation!r}")
            elif isinstance(h, ClampPattern):
                self.clamps.append(h)
            elif isinstance(h, FreezeFromCache):
                if h.component not in COMPONENTS:
                    raise ValueError(f"unknown component {h.component!r}")
                self.freezes.setdefault(h.component, []).append(h)
            else:
                raise TypeError(f"unsupported hook {h!r}")
        self.B, self.H, self.T = B, H, T

    def _mask(self, H, T):
        if self.extra_mask is None:
            self.extra_mask = np.ones((H, T, T), dtype=bool)
        return self.extra_mask

    def freeze(self, name: str, x: E.Tensor, layer: int) -> E.Tensor:
        for h in self.freezes.get(name, ()):
            cached = h.cache.component(name, layer)
            if cached.shape != x.shape:
                raise ValueError(
                    f"cache shape {cached.shape} does not match {name} shape {x.shape}"
                )
            cached = cached.astype(x.dtype, copy=False)
            if h.heads is None:
                x = E.Tensor(cached)
            else:
                keep = np.ones((1, x.shape[1]) + (1,) * (x.data.ndim - 2), dtype=x.dtype)
                keep[0, list(h.heads)] = 0
                x = E.add(E.mul(x, keep), cached * (1 - keep))
        return x

    def clamp(self, A: E.Tensor) -> E.Tensor:
        for h in self.clamps:
            B, H, T = A.shape[0], A.shape[1], A.shape[-1]
            rows = tuple(range(T)) if h.rows is None else tuple(h.rows)
            pat = np.asarray(h.pattern, dtype=A.dtype)
            if pat.ndim == 2:
                pat = np.broadcast_to(pat, (B,) + pat.shape)
            if pat.shape != (B, len(rows), T):
                raise ValueError(f"clamp pattern shape {pat.shape} != {(B, len(rows), T)}")
            validate_rows(pat, rows)
            keep = np.ones((1, H, T, 1), dtype=A.dtype)
            keep[0, h.head, list(rows)] = 0
            new = np.zeros(A.shape, dtype=A.dtype)
            new[:, h.head, list(rows)] = pat
            A = E.add(E.mul(A, keep), new)
        return A


def validate_rows(pat: np.ndarray, rows: Seq[int], atol: float = 1e-6) -> None:
    if (pat < 0).any():
        raise ValueError("clamped attention has negative weights")
    if not np.allclose(pat.sum(axis=-1), 1.0, atol=atol):
        raise ValueError("clamped attention rows must sum to 1")
    T = pat.shape[-1]
    for j, r in enumerate(rows):
        if (pat[..., j, r + 1:] != 0).any():
            raise ValueError("clamped attention violates causality")


def _ones_h(cur, H, dtype):
    return np.ones((1, H, 1, 1), dtype=dtype) if cur is None else cur


# ------------------------------------------------------------------- forward


class Model:
    """Bundles a config with a parameter dict; ``params`` arrays are the live weights."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["unembed"].dtype

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, bank: ClassBank, batch: Batch, hooks: Seq = (), trace: bool = False,
                tensors: dict[str, E.Tensor] | None = None):
        """Return ``(logits (B, C) Tensor, ForwardTrace or None)``.

        Pass ``tensors`` (name -> Tensor wrapping the params) to differentiate.
        """
        ex, labels = embed_tokens(bank, batch)
        return forward_arrays(self.cfg, self.params, ex, labels, hooks, trace, tensors)


def forward(model: Model, bank: ClassBank, batch: Batch, hooks: Seq = (), trace: bool = True):
    return model.forward(bank, batch, hooks, trace)


_P_EX = np.zeros((SEQ_LEN, 3))
_P_EX[[0, 2, 4], [0, 1, 2]] = 1
_P_LAB = np.zeros((SEQ_LEN, 2))
_P_LAB[[1, 3], [0, 1]] = 1


def forward_arrays(cfg: ModelConfig, params, ex: np.ndarray, labels: np.ndarray,
                   hooks: Seq = (), want_trace: bool = False,
                   tensors: dict[str, E.Tensor] | None = None):
    hooks = list(hooks)
    dtype = params["unembed"].dtype
    P = tensors if tensors is not None else {k: E.Tensor(v) for k, v in params.items()}
    B, T, H, dh = ex.shape[0], cfg.seq_len, cfg.num_heads, cfg.d_head

    # token placement: exemplars -> positions 0, 2, 4; labels -> 1, 3
    x_ex = E.matmul(E.Tensor(ex.astype(dtype, copy=False)), P["embed.exemplar"])
    x_lab = E.gather(P["embed.label"], labels)
    x0 = E.add(E.matmul(E.Tensor(_P_EX.astype(dtype)), x_ex),
               E.matmul(E.Tensor(_P_LAB.astype(dtype)), x_lab))
    if cfg.positional == "learned":
        x0 = E.add(x0, P["embed.pos"])
    else:
        x0 = E.add(x0, E.Tensor(sinusoidal(T, cfg.d_model).astype(dtype)))

    x_layers, x_out = x0, x0
    for h in hooks:
        if isinstance(h, ZeroEmbedding):
            if h.into not in ("all", "output"):
                raise ValueError(f"bad ZeroEmbedding.into {h.into!r}")
            zero = E.Tensor(np.zeros(x0.shape, dtype=dtype))
            x_out = zero
            if h.into == "all":
                x_layers = zero

    tr = ForwardTrace() if want_trace else None
    final = E.take(x_out, QUERY_POS, axis=1)
    if tr is not None:
        tr.direct = final.data.copy()
    base_mask = causal_mask(T)
    inv_sqrt = 1.0 / math.sqrt(dh)

    for l in range(cfg.num_layers):
        lh = _LayerHooks(hooks, l, B, H, T, dtype)
        xin = E.reshape(x_layers, (B, 1, T, cfg.d_model))
        q = lh.freeze("queries", E.matmul(xin, P[f"layers.{l}.W_Q"]), l)
        k = lh.freeze("keys", E.matmul(xin, P[f"layers.{l}.W_K"]), l)
        v = lh.freeze("values", E.matmul(xin, P[f"layers.{l}.W_V"]), l)
        scores = E.scale(E.matmul(q, E.swapaxes(k)), inv_sqrt)
        if lh.inv_temp is not None:
            scores = E.mul(scores, lh.inv_temp)
        mask = base_mask if lh.extra_mask is None else (base_mask & lh.extra_mask)
        A = E.masked_softmax(scores, mask)
        A = lh.clamp(A)
        A = lh.freeze("patterns", A, l)
        z = E.matmul(A, v)
        out = lh.freeze("head_outputs", E.matmul(z, P[f"layers.{l}.W_O"]), l)

        out_layers = out if lh.zero_layers is None else E.mul(out, lh.zero_layers)
        out_final = out if lh.zero_output is None else E.mul(out, lh.zero_output)
        contrib = E.take(out_final, QUERY_POS, axis=2)  # (B,H,d)
        final = E.add(final, E.sum(contrib, axis=1))
        if l + 1 < cfg.num_layers:
            x_layers = E.add(x_layers, E.sum(out_layers, axis=1))
        if tr is not None:
            tr.patterns.append(A.data)
            tr.queries.append(q.data)
            tr.keys.append(k.data)
            tr.values.append(v.data)
            tr.head_outputs.append(out.data)
            tr.final_contrib.append(contrib.data)

    logits = E.matmul(final, P["unembed"])
    if tr is not None:
        tr.final_resid = final.data
    return logits, tr


# ------------------------------------------------------------------- metrics


def in_context_accuracy(logits, context_labels: np.ndarray, target: np.ndarray,
                        per_seq: bool = False):
    """Accuracy of the argmax restricted to the two in-context labels.

    Ties go to the first context label.
    """
    x = logits.data if isinstance(logits, E.Tensor) else np.asarray(logits)
    x = np.atleast_2d(x)
    ctx = np.atleast_2d(np.asarray(context_labels))
    target = np.atleast_1d(np.asarray(target))
    if ctx.shape[1] != 2:
        raise ValueError("exactly two context labels per sequence")
    if not (ctx == target[:, None]).any(axis=1).all():
        raise ValueError("target is not among the context labels")
    rows = np.arange(x.shape[0])
    pick = ctx[rows, np.argmax(x[rows[:, None], ctx], axis=1)]
    hits = (pick == target).astype(np.float64)
    return hits if per_seq else float(hits.mean())


def plain_accuracy(logits, target: np.ndarray, per_seq: bool = False):
    """Unrestricted argmax accuracy; ties go to the lowest label index."""
    x = logits.data if isinstance(logits, E.Tensor) else np.asarray(logits)
    x = np.atleast_2d(x)
    hits = (np.argmax(x, axis=1) == np.atleast_1d(target)).astype(np.float64)
    return hits if per_seq else float(hits.mean())


def mean_loss(logits, target: np.ndarray) -> float:
    x = logits.data if isinstance(logits, E.Tensor) else np.asarray(logits)
    lsm = E.log_softmax_np(x.astype(np.float64))
    return float(-lsm[np.arange(x.shape[0]), target].mean())
