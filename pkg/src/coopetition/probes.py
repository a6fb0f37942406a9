"""Mechanistic probes over a trained model.

Every probe samples its own data from ``seed``, runs one or two forward passes
with hooks, and returns a :class:`ProbeReport`. Correct/incorrect label
positions always come from the episode's answer keys, never from the model.
Parameters are made read-only for the duration of a probe.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence as Seq

import numpy as np
from scipy import stats

from .data import (
    LABEL_POS,
    QUERY_POS,
    Batch,
    ClassBank,
    EvalKind,
    force_label_position,
    label_positions,
    sample_batch,
    scoring_answer,
)
from .model import (
    BlockAttnEdge,  # noqa: F401 - re-exported for probe campaigns
    ClampPattern,
    FreezeFromCache,
    ForwardTrace,
    Model,
    Temperature,
    ZeroEmbedding,
    ZeroHead,
    in_context_accuracy,
)

PRESERVABLE = ("patterns", "keys", "queries", "values")
CHUNK = 500


@dataclass
class ProbeReport:
    """``rows`` holds per-head or per-sequence records, ``summary`` the aggregates.

    Each summary entry is ``(value, n)`` so every mean carries its sample size.
    """

    probe: str
    rows: list[dict] = field(default_factory=list)
    summary: dict[str, tuple[float, int]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    tag: str = ""  # distinguishes variants of one probe (head, preserve set, ...)

    def value(self, key: str) -> float:
        return self.summary[key][0]

    def file_stem(self) -> str:
        ckpt = str(self.provenance.get("checkpoint", "model"))
        return f"{ckpt}__{self.probe}" + (f"__{self.tag}" if self.tag else "")

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows_path = out / f"{self.file_stem()}.csv"
        summ_path = out / f"{self.file_stem()}__summary.csv"
        prov = {f"prov_{k}": v for k, v in self.provenance.items()}
        with open(rows_path, "w", newline="") as fh:
            if self.rows:
                cols = list(self.rows[0]) + list(prov)
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for r in self.rows:
                    w.writerow({**_fmt_row(r), **prov})
        with open(summ_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "key", "value", "n"] + list(prov))
            for k, (v, n) in self.summary.items():
                w.writerow([self.probe, k, repr(float(v)), n] + list(prov.values()))
        return rows_path, summ_path


def _fmt_row(r: dict) -> dict:
    return {k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()}


def param_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def read_only(model: Model):
    """Any write to the parameters inside the block raises."""
    prev = {k: p.flags.writeable for k, p in model.params.items()}
    for p in model.params.values():
        p.flags.writeable = False
    try:
        yield model
    finally:
        for k, p in model.params.items():
            if prev[k]:
                p.flags.writeable = True


def _prov(checkpoint, kind, n, seed, **extra) -> dict:
    kind = kind.value if isinstance(kind, EvalKind) else kind
    return {"checkpoint": checkpoint, "kind": kind, "n": n, "seed": seed, **extra}


def _batch(kind, bank: ClassBank, n: int, seed: int) -> Batch:
    return sample_batch(EvalKind(kind), bank, np.random.default_rng(seed), n)


def _chunks(batch: Batch, chunk: int = CHUNK):
    for i in range(0, len(batch), chunk):
        yield batch.subset(slice(i, i + chunk))


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()) if x.size else float("nan"), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def _need_layers(model: Model, k: int, probe: str):
    if model.cfg.num_layers < k:
        raise ValueError(f"{probe} needs a model with at least {k} layers")


def _check_head(model: Model, head: int):
    if not 0 <= head < model.cfg.num_heads:
        raise ValueError(f"head {head} out of range [0, {model.cfg.num_heads})")


def patterns(model: Model, bank: ClassBank, batch: Batch, layer: int, hooks: Seq = ()) -> np.ndarray:
    """Attention patterns (B, H, T, T) of one layer."""
    parts = []
    for sub in _chunks(batch):
        _, tr = model.forward(bank, sub, hooks, trace=True)
        parts.append(tr.patterns[layer])
    return np.concatenate(parts, axis=0)


def two_pass_hits(model: Model, bank: ClassBank, batch: Batch, answer: np.ndarray,
                  make_hooks: Callable[[ForwardTrace], list]) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-sequence in-context hits for the clean pass and the hooked pass.

    ``make_hooks`` receives the clean pass's trace (for freeze-from-cache
    hooks). Also returns the max absolute logit difference between passes.
    """
    base, hooked, max_diff = [], [], 0.0
    for i, sub in enumerate(_chunks(batch)):
        a = answer[i * CHUNK: i * CHUNK + len(sub)]
        lg0, tr = model.forward(bank, sub, (), trace=True)
        lg1, _ = model.forward(bank, sub, make_hooks(tr))
        base.append(in_context_accuracy(lg0, sub.labels, a, per_seq=True))
        hooked.append(in_context_accuracy(lg1, sub.labels, a, per_seq=True))
        max_diff = max(max_diff, float(np.max(np.abs(lg1.data - lg0.data))))
    return np.concatenate(base), np.concatenate(hooked), max_diff


def hooked_hits(model: Model, bank: ClassBank, batch: Batch, answer: np.ndarray,
                hooks: Seq) -> np.ndarray:
    out = []
    for i, sub in enumerate(_chunks(batch)):
        a = answer[i * CHUNK: i * CHUNK + len(sub)]
        lg, _ = model.forward(bank, sub, hooks)
        out.append(in_context_accuracy(lg, sub.labels, a, per_seq=True))
    return np.concatenate(out)


def _deltas(A_query: np.ndarray, batch: Batch, answer: np.ndarray) -> np.ndarray:
    """(B, H) attention to the correct label position minus the other label position."""
    cp, op = label_positions(batch, answer)
    rows = np.arange(len(batch))
    return A_query[rows, :, cp] - A_query[rows, :, op]


# ---------------------------------------------------------------------- probes


def attention_profile(model: Model, bank: ClassBank, kind=EvalKind.EVAL_CIWL, layer: int = -1,
                      n: int = 2000, seed: int = 0, label_pos: int | None = None,
                      checkpoint: str = "model") -> ProbeReport:
    """Mean attention from the query position to each position, per head.

    ``label_pos`` (1 or 3) forces the scoring answer's label to that position.
    The delta (correct minus incorrect label position) is omitted for kinds
    whose answer is not in context.
    """
    kind = EvalKind(kind)
    layer = range(model.cfg.num_layers)[layer]
    batch = _batch(kind, bank, n, seed)
    answer = scoring_answer(batch)
    if label_pos is not None:
        batch = force_label_position(batch, answer, label_pos)
    with read_only(model):
        A = patterns(model, bank, batch, layer)[:, :, QUERY_POS, :]  # (B,H,T)
    in_ctx = (batch.labels == answer[:, None]).any(axis=1).all()
    D = _deltas(A, batch, answer) if in_ctx else None
    rep = ProbeReport("attention_profile", provenance=_prov(
        checkpoint, kind, n, seed, layer=layer, label_pos=label_pos or "free"),
        tag=f"{kind.value}_L{layer}_pos{label_pos or 'free'}")
    for h in range(A.shape[1]):
        row = {"layer": layer, "head": h}
        row.update({f"pos{p}": float(A[:, h, p].mean()) for p in range(A.shape[2])})
        if D is not None:
            row["delta"], row["delta_se"] = _mean_se(D[:, h])
        row["n"] = len(batch)
        rep.rows.append(row)
        if D is not None:
            rep.summary[f"delta_head{h}"] = (row["delta"], len(batch))
    if D is not None:
        rep.summary["delta_mean"] = (float(D.mean()), D.size)
    return rep


def induction_strength(model: Model, bank: ClassBank, n: int = 2000, seed: int = 0,
                       layer: int = 1, checkpoint: str = "model") -> ProbeReport:
    """Per L2 head: mean attention delta toward the ICL-correct label on EVAL_FLIP data."""
    _need_layers(model, 2, "induction_strength")
    batch = _batch(EvalKind.EVAL_FLIP, bank, n, seed)
    with read_only(model):
        A = patterns(model, bank, batch, layer)[:, :, QUERY_POS, :]
    D = _deltas(A, batch, batch.answer_icl)
    rep = ProbeReport("induction_strength",
                      provenance=_prov(checkpoint, EvalKind.EVAL_FLIP, n, seed, layer=layer))
    for h in range(D.shape[1]):
        m, se = _mean_se(D[:, h])
        rep.rows.append({"layer": layer, "head": h, "strength": m, "se": se, "n": n})
        rep.summary[f"head{h}"] = (m, n)
    rep.summary["mean"] = (float(D.mean()), D.size)
    return rep


def clamp_patterns(batch: Batch, answer: np.ndarray, w: float, T: int = 5) -> np.ndarray:
    """(B, 1, T) query rows with w on the correct label position and 1 - w on the other."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"clamp weight {w} outside [0, 1]")
    cp, op = label_positions(batch, answer)
    pat = np.zeros((len(batch), 1, T))
    rows = np.arange(len(batch))
    pat[rows, 0, cp] = w
    pat[rows, 0, op] += 1.0 - w
    return pat


def clamp_sweep(model: Model, bank: ClassBank, head: int, w_grid: Iterable[float],
                n: int = 2000, seed: int = 0, layer: int = 1,
                checkpoint: str = "model") -> ProbeReport:
    """EVAL_CIWL in-context accuracy with only ``head`` active in ``layer`` and its
    query row clamped to w / 1 - w on the correct / incorrect label."""
    _need_layers(model, layer + 1, "clamp_sweep")
    _check_head(model, head)
    w_grid = [float(w) for w in w_grid]
    for w in w_grid:
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"clamp weight {w} outside [0, 1]")
    batch = _batch(EvalKind.EVAL_CIWL, bank, n, seed)
    answer = batch.answer_ciwl
    others = [ZeroHead(layer, h) for h in range(model.cfg.num_heads) if h != head]
    rep = ProbeReport("clamp_sweep", provenance=_prov(
        checkpoint, EvalKind.EVAL_CIWL, n, seed, layer=layer, head=head), tag=f"L{layer}h{head}")
    accs = []
    with read_only(model):
        for w in w_grid:
            hits = []
            for i, sub in enumerate(_chunks(batch)):
                a = answer[i * CHUNK: i * CHUNK + len(sub)]
                pat = clamp_patterns(sub, a, w, model.cfg.seq_len)
                hooks = others + [ClampPattern(layer, head, pat, rows=(QUERY_POS,))]
                lg, _ = model.forward(bank, sub, hooks)
                hits.append(in_context_accuracy(lg, sub.labels, a, per_seq=True))
            m, se = _mean_se(np.concatenate(hits))
            accs.append(m)
            rep.rows.append({"head": head, "w": w, "accuracy": m, "se": se, "n": n})
    rho = stats.spearmanr(w_grid, accs).statistic if len(set(accs)) > 1 else float("nan")
    rep.summary["spearman"] = (float(rho), len(w_grid))
    rep.summary["acc_w0"] = (accs[w_grid.index(0.0)] if 0.0 in w_grid else float("nan"), n)
    rep.summary["acc_w1"] = (accs[w_grid.index(1.0)] if 1.0 in w_grid else float("nan"), n)
    return rep


def preserve_set(spec) -> frozenset[str]:
    """Parse a preserve set: ``"all"``, ``"none"``, ``"all-but-values"``, or names.

    ``"all"`` is {patterns, keys, queries, values}. ``"all-but-X"`` keeps
    keys, queries and values minus X and lets patterns be recomputed, so
    dropping keys or queries really changes the attention pattern;
    ``"all-but-patterns"`` keeps only values.
    """
    if isinstance(spec, str):
        s = spec.strip().lower()
        if s == "all":
            return frozenset(PRESERVABLE)
        if s in ("none", ""):
            return frozenset()
        if s.startswith("all-but-"):
            x = s[len("all-but-"):]
            if x not in PRESERVABLE:
                raise ValueError(f"invalid preserve set {spec!r}")
            if x == "patterns":
                return frozenset({"values"})
            return frozenset({"keys", "queries", "values"} - {x})
        spec = [p.strip() for p in s.split(",")]
    out = frozenset(spec)
    bad = out - set(PRESERVABLE)
    if bad:
        raise ValueError(f"invalid preserve set members {sorted(bad)}; valid: {PRESERVABLE}")
    return out


def composition_ablation(model: Model, bank: ClassBank, preserve, n: int = 2000,
                         seed: int = 0, checkpoint: str = "model") -> ProbeReport:
    """Zero every L1 head's output into later layers, restoring ``preserve`` in
    every later layer from an unhooked pass. L1's direct path to the output is
    untouched so ablations isolate composition."""
    _need_layers(model, 2, "composition_ablation")
    keep = preserve_set(preserve)
    L, H = model.cfg.num_layers, model.cfg.num_heads
    batch = _batch(EvalKind.EVAL_CIWL, bank, n, seed)

    def hooks(cache):
        hs = [ZeroHead(0, h, into="layers") for h in range(H)]
        return hs + [FreezeFromCache(c, l, cache) for l in range(1, L) for c in sorted(keep)]

    with read_only(model):
        base, abl, diff = two_pass_hits(model, bank, batch, batch.answer_ciwl, hooks)
    members = "+".join(sorted(keep)) or "none"
    # tag by the name the caller used, e.g. "all-but-values"
    name = preserve.strip().lower() if isinstance(preserve, str) and "," not in preserve else members
    rep = ProbeReport("composition_ablation", provenance=_prov(
        checkpoint, EvalKind.EVAL_CIWL, n, seed, preserve=members), tag=name)
    return _ablation_report(rep, base, abl, diff)


def _ablation_report(rep: ProbeReport, base, abl, diff) -> ProbeReport:
    n = len(base)
    b, bse = _mean_se(base)
    a, ase = _mean_se(abl)
    rep.rows.append({"baseline": b, "baseline_se": bse, "ablated": a, "ablated_se": ase,
                     "drop": b - a, "max_logit_diff": diff, "n": n})
    rep.summary.update(baseline=(b, n), ablated=(a, n), drop=(b - a, n), max_logit_diff=(diff, n))
    return rep


def l1_output_ablation(model: Model, bank: ClassBank, n: int = 2000, seed: int = 0,
                       checkpoint: str = "model") -> ProbeReport:
    """Remove L1 heads' contributions to the final residual; later layers still see them."""
    _need_layers(model, 2, "l1_output_ablation")
    batch = _batch(EvalKind.EVAL_CIWL, bank, n, seed)
    hooks = [ZeroHead(0, h, into="output") for h in range(model.cfg.num_heads)]
    with read_only(model):
        base, abl, diff = two_pass_hits(model, bank, batch, batch.answer_ciwl, lambda _: hooks)
    rep = ProbeReport("l1_output_ablation",
                      provenance=_prov(checkpoint, EvalKind.EVAL_CIWL, n, seed))
    return _ablation_report(rep, base, abl, diff)


DIRECT_MODES = ("heads_only", "embed_only")


def direct_path_ablation(model: Model, bank: ClassBank, mode: str, n: int = 2000, seed: int = 0,
                         checkpoint: str = "model") -> ProbeReport:
    """``heads_only``: embeddings zeroed, every layer's patterns and values
    restored from the clean pass. ``embed_only``: every head zeroed."""
    if mode not in DIRECT_MODES:
        raise ValueError(f"mode must be one of {DIRECT_MODES}")
    L, H = model.cfg.num_layers, model.cfg.num_heads
    batch = _batch(EvalKind.EVAL_CIWL, bank, n, seed)

    def hooks(cache):
        if mode == "embed_only":
            return [ZeroHead(l, h) for l in range(L) for h in range(H)]
        return [ZeroEmbedding("all")] + [
            FreezeFromCache(c, l, cache) for l in range(L) for c in ("patterns", "values")]

    with read_only(model):
        base, abl, diff = two_pass_hits(model, bank, batch, batch.answer_ciwl, hooks)
    rep = ProbeReport(f"direct_path_{mode}",
                      provenance=_prov(checkpoint, EvalKind.EVAL_CIWL, n, seed, mode=mode))
    return _ablation_report(rep, base, abl, diff)


def temperature_probe(model: Model, bank: ClassBank, head: int, T_grid: Iterable[float],
                      all_heads_active: bool = False, n: int = 2000, seed: int = 0,
                      layer: int = 1, label_only: bool = True,
                      checkpoint: str = "model") -> ProbeReport:
    """EVAL_CIWL in-context accuracy vs the attention temperature of one head."""
    _need_layers(model, layer + 1, "temperature_probe")
    _check_head(model, head)
    T_grid = [float(t) for t in T_grid]
    if any(not t > 0 for t in T_grid):
        raise ValueError("temperatures must be positive")
    batch = _batch(EvalKind.EVAL_CIWL, bank, n, seed)
    others = [] if all_heads_active else [
        ZeroHead(layer, h) for h in range(model.cfg.num_heads) if h != head]
    rep = ProbeReport("temperature_probe", provenance=_prov(
        checkpoint, EvalKind.EVAL_CIWL, n, seed, layer=layer, head=head,
        all_heads_active=all_heads_active, label_only=label_only),
        tag=f"L{layer}h{head}_{'all' if all_heads_active else 'solo'}")
    accs = []
    with read_only(model):
        for T in T_grid:
            hooks = others + [Temperature(layer, head, T, label_only)]
            m, se = _mean_se(hooked_hits(model, bank, batch, batch.answer_ciwl, hooks))
            accs.append(m)
            rep.rows.append({"head": head, "T": T, "accuracy": m, "se": se, "n": n})
    if len(T_grid) > 1 and len(set(accs)) > 1:
        rho = stats.spearmanr(T_grid, accs).statistic
    else:
        rho = float("nan")
    rep.summary["spearman_T"] = (float(rho), len(T_grid))
    return rep


def per_seq_attention_scatter(model: Model, bank: ClassBank, heads: tuple[int, int],
                              n: int = 2000, seed: int = 0, layer: int = 1,
                              kind=EvalKind.EVAL_CIWL, checkpoint: str = "model") -> ProbeReport:
    """Per-sequence (delta_i, delta_j) for two heads of one layer."""
    i, j = heads
    _need_layers(model, layer + 1, "per_seq_attention_scatter")
    _check_head(model, i)
    _check_head(model, j)
    kind = EvalKind(kind)
    batch = _batch(kind, bank, n, seed)
    answer = scoring_answer(batch)
    with read_only(model):
        A = patterns(model, bank, batch, layer)[:, :, QUERY_POS, :]
    D = _deltas(A, batch, answer)
    rep = ProbeReport("per_seq_attention_scatter", provenance=_prov(
        checkpoint, kind, n, seed, layer=layer, head_i=i, head_j=j), tag=f"L{layer}h{i}h{j}")
    for s in range(len(batch)):
        rep.rows.append({"seq": s, "delta_i": float(D[s, i]), "delta_j": float(D[s, j])})
    di, dj = D[:, i], D[:, j]
    if np.ptp(di) > 0 and np.ptp(dj) > 0:
        rho = float(stats.spearmanr(di, dj).statistic)
    else:
        rho = 1.0 if np.array_equal(di, dj) else float("nan")
    rep.summary.update(
        spearman=(rho, n),
        mean_abs_diff=(float(np.abs(di - dj).mean()), n),
        mean_delta_i=(float(di.mean()), n),
        mean_delta_j=(float(dj.mean()), n),
    )
    return rep


def l1_attention_summary(model: Model, bank: ClassBank,
                         kinds: Iterable = (EvalKind.EVAL_ICL, EvalKind.EVAL_CIWL, EvalKind.EVAL_FLIP),
                         n: int = 2000, seed: int = 0, layer: int = 0,
                         checkpoint: str = "model") -> ProbeReport:
    """Per L1 head and kind: mean attention from label positions to the previous token and to self."""
    kinds = [EvalKind(k) for k in kinds]
    rep = ProbeReport("l1_attention_summary", provenance=_prov(
        checkpoint, "+".join(k.value for k in kinds), n, seed, layer=layer))
    pos = np.asarray(LABEL_POS)
    with read_only(model):
        for kind in kinds:
            A = patterns(model, bank, _batch(kind, bank, n, seed), layer)
            prev_p = A[:, :, pos, pos - 1].mean(axis=0)  # (H, len(pos))
            self_p = A[:, :, pos, pos].mean(axis=0)
            prev, self_ = prev_p.mean(axis=1), self_p.mean(axis=1)
            for h in range(A.shape[1]):
                row = {"kind": kind.value, "head": h, "prev": float(prev[h]),
                       "self": float(self_[h])}
                for j, p in enumerate(LABEL_POS):
                    row[f"prev_pos{p}"] = float(prev_p[h, j])
                    row[f"self_pos{p}"] = float(self_p[h, j])
                row["n"] = n
                rep.rows.append(row)
                rep.summary[f"{kind.value}_head{h}_prev"] = (float(prev[h]), n)
                rep.summary[f"{kind.value}_head{h}_self"] = (float(self_[h]), n)
    return rep


PROBES = {
    "profile": attention_profile,
    "induction": induction_strength,
    "clamp": clamp_sweep,
    "composition": composition_ablation,
    "l1_output": l1_output_ablation,
    "direct_path": direct_path_ablation,
    "temperature": temperature_probe,
    "scatter": per_seq_attention_scatter,
    "l1_attention": l1_attention_summary,
}
