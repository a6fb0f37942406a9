"""Training campaigns: Adam on a sequence stream, evaluator suites, checkpoints.

A run directory looks like::

    run/
      config.cfg          resolved TrainConfig (flat key/value)
      VERSION
      metrics.csv         step,sequences_seen,evaluator,metric,value
      checkpoints/step_000012345.ckpt
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence as Seq

import numpy as np

from . import __version__
from . import checkpoint as ckio
from . import config as cfgio
from . import engine as E
from .data import EVALUATORS, TRAIN_KINDS, Batch, ClassBank, EvalKind, build_class_bank, \
    sample_batch, scoring_answer
from .model import BlockAttnEdge, Model, ModelConfig, ZeroHead, in_context_accuracy, \
    mean_loss, param_shapes, partition, plain_accuracy

log = logging.getLogger(__name__)

DEFAULT_EVALUATORS = tuple(k.value for k in EVALUATORS) + ("BURSTY",)
METRICS_HEADER = ["step", "sequences_seen", "evaluator", "metric", "value"]


@dataclass
class BankConfig:
    num_classes: int = 12800
    exemplars_per_class: int = 20
    d_in: int = 64
    sigma: float = 0.1
    seed: int = 0


@dataclass
class InitConfig:
    """fresh: new weights from ``TrainConfig.model_seed``; checkpoint: resume
    ``path`` (params, Adam, rng, step); transplant: compose LOWER params from
    ``lower_from`` and UPPER from ``upper_from`` (either may be none = fresh).
    A transplant with both sources equal continues a checkpoint's weights as
    a new run (fresh Adam, step 0), e.g. on a different data stream."""

    kind: str = "fresh"
    path: str | None = None
    lower_from: str | None = None
    upper_from: str | None = None


@dataclass
class PersistentHooks:
    block_prev_layers: tuple = ()  # layers whose heads may not attend to the previous token
    zero_heads: tuple = ()  # [[layer, head], ...] ablated at every step

    def hooks(self, cfg: ModelConfig) -> list:
        out = [BlockAttnEdge(int(l), "prev") for l in self.block_prev_layers]
        out += [ZeroHead(int(l), int(h)) for l, h in self.zero_heads]
        for l, h in self.zero_heads:
            if not (0 <= int(l) < cfg.num_layers and 0 <= int(h) < cfg.num_heads):
                raise ValueError(f"zero_heads entry {(l, h)} out of range")
        return out


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    init: InitConfig = field(default_factory=InitConfig)
    persist: PersistentHooks = field(default_factory=PersistentHooks)
    data_kind: str = "BURSTY"
    batch_size: int = 32
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_sequences: int = 24_000_000
    frozen: str = "none"
    model_seed: int = 0
    data_seed: int = 0
    eval_seed: int = 12345
    eval_n: int = 2000
    evaluators: tuple = DEFAULT_EVALUATORS
    eval_ratio: float = 1.1  # geometric spacing of eval points in sequences seen
    checkpoint_ratio: float = 1.5
    first_sequences: int = 3200  # first nonzero eval/checkpoint point
    precision: int = 32

    def __post_init__(self):
        self.frozen = "none" if self.frozen is None else self.frozen
        self.model.label_vocab = self.bank.num_classes
        self.model.d_in = self.bank.d_in
        if EvalKind(self.data_kind) not in TRAIN_KINDS:
            raise ValueError(f"data_kind must be one of {[k.value for k in TRAIN_KINDS]}")
        if self.precision not in E.DTYPES:
            raise ValueError("precision must be 32 or 64")
        partition(self.model, self.frozen)  # validates

    @property
    def total_steps(self) -> int:
        return math.ceil(self.total_sequences / self.batch_size)

    @property
    def dtype(self):
        return E.DTYPES[self.precision]

    def flat(self) -> dict:
        return cfgio.flatten(self)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        return cfgio.unflatten(cls, flat)


def make_bank(cfg: TrainConfig) -> ClassBank:
    b = cfg.bank
    return build_class_bank(b.num_classes, b.exemplars_per_class, b.d_in, b.sigma, b.seed,
                            dtype=cfg.dtype)


def geometric_steps(total_steps: int, batch_size: int, first_sequences: int,
                    ratio: float) -> list[int]:
    """Step 0, then steps at sequences seen = first * ratio**k, then the final step."""
    steps = {0, total_steps}
    s = float(first_sequences)
    while True:
        st = math.ceil(s / batch_size)
        if st >= total_steps:
            break
        steps.add(st)
        s *= ratio
    return sorted(steps)


# -------------------------------------------------------------------- metrics


class MetricsLog:
    def __init__(self, rows: Iterable[tuple] = ()):
        self.rows: list[tuple[int, int, str, str, float]] = list(rows)

    def add(self, step: int, seqs: int, results: dict[str, dict[str, float]]):
        for ev, metrics in results.items():
            for name, val in metrics.items():
                self.rows.append((step, seqs, ev, name, float(val)))

    def __len__(self):
        return len(self.rows)

    def steps(self) -> list[int]:
        return sorted({r[0] for r in self.rows})

    def series(self, evaluator: str, metric: str) -> tuple[np.ndarray, np.ndarray]:
        pts = [(r[1], r[4]) for r in self.rows if r[2] == evaluator and r[3] == metric]
        if not pts:
            return np.zeros(0), np.zeros(0)
        x, y = zip(*pts)
        return np.asarray(x, dtype=float), np.asarray(y, dtype=float)

    def at(self, step: int) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for r in self.rows:
            if r[0] == step:
                out.setdefault(r[2], {})[r[3]] = r[4]
        return out

    @staticmethod
    def format_row(row) -> list[str]:
        step, seqs, ev, name, val = row
        return [str(step), str(seqs), ev, name, repr(float(val))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow(self.format_row(r))

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if header != METRICS_HEADER:
                raise ValueError(f"unexpected metrics header {header}")
            return cls((int(a), int(b), c, d, float(e)) for a, b, c, d, e in rd)


# ---------------------------------------------------------------- evaluation


def make_eval_sets(bank: ClassBank, evaluators: Seq[str], n: int, seed: int) -> dict[str, Batch]:
    """One fixed batch per evaluator; each evaluator has its own seeded stream."""
    if n < 1:
        raise ValueError("n_per_eval must be >= 1")
    out = {}
    for ev in evaluators:
        rng = np.random.default_rng([seed, zlib.crc32(str(ev).encode())])
        out[ev] = sample_batch(ev, bank, rng, n)
    return out


def batched_logits(model: Model, bank: ClassBank, batch: Batch, hooks: Seq = (),
                   chunk: int = 500) -> np.ndarray:
    parts = []
    for i in range(0, len(batch), chunk):
        sub = batch.subset(slice(i, i + chunk))
        lg, _ = model.forward(bank, sub, hooks)
        parts.append(lg.data)
    return np.concatenate(parts, axis=0)


def evaluate_batch(model: Model, bank: ClassBank, batch: Batch, hooks: Seq = ()) -> dict:
    logits = batched_logits(model, bank, batch, hooks)
    ans = scoring_answer(batch)
    res = {"plain_accuracy": plain_accuracy(logits, ans), "loss": mean_loss(logits, ans)}
    if batch.kind is not EvalKind.EVAL_IWL:
        res["in_context_accuracy"] = in_context_accuracy(logits, batch.labels, ans)
    return res


def eval_suite(model: Model, bank: ClassBank, evaluators: Seq[str] = DEFAULT_EVALUATORS,
               n_per_eval: int = 2000, seed: int = 12345, hooks: Seq = (),
               eval_sets: dict[str, Batch] | None = None) -> dict[str, dict[str, float]]:
    """Per evaluator: in-context accuracy (not for EVAL_IWL), plain accuracy and loss.

    Scoring keys: answer_icl for EVAL_ICL/EVAL_FLIP, answer_ciwl for
    EVAL_CIWL, answer_train for EVAL_IWL and BURSTY.
    """
    if eval_sets is None:
        eval_sets = make_eval_sets(bank, evaluators, n_per_eval, seed)
    return {ev: evaluate_batch(model, bank, eval_sets[ev], hooks) for ev in evaluators}


# ------------------------------------------------------------------- training


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_checkpoint: Path | None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    metrics: MetricsLog
    model: Model
    adam: E.AdamState
    step: int
    checkpoints: list[Path]


def _compose_params(cfg: TrainConfig, dtype) -> dict[str, np.ndarray]:
    init = cfg.init
    params = Model.init(cfg.model, cfg.model_seed, dtype).params
    if init.kind == "fresh":
        return params
    if init.kind == "transplant":
        for which, path in (("LOWER", init.lower_from), ("UPPER", init.upper_from)):
            if not path:
                continue
            src = ckio.load(path).params
            names = partition(cfg.model, which)
            _check_compatible(params, src, names)
            for n in names:
                params[n] = src[n].astype(dtype)
        return params
    raise ValueError(f"unknown init kind {init.kind!r}")


def _check_compatible(params, src, names):
    for n in names:
        if n not in src or src[n].shape != params[n].shape:
            raise ValueError(f"incompatible transplant source for '{n}'")


def train(cfg: TrainConfig, out_dir=None, callback: Callable | None = None) -> TrainResult:
    """Run Adam on ``cfg.data_kind`` sequences, evaluating and checkpointing on schedule.

    Frozen partitions still take part in forward/backward; their gradients
    are discarded and their Adam moments never move.
    """
    dtype = cfg.dtype
    bank = make_bank(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfgio.dumps(cfg.flat()), encoding="utf-8")
        (out / "VERSION").write_text(__version__ + "\n")

    start_step = 0
    data_rng = np.random.default_rng(cfg.data_seed)
    if cfg.init.kind == "checkpoint":
        ck = ckio.load(cfg.init.path)
        params = {k: v.astype(dtype) for k, v in ck.params.items()}
        adam = E.AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                           t=ck.adam_t, m=dict(ck.adam_m), v=dict(ck.adam_v))
        if not adam.m:
            adam = E.AdamState.zeros_like(params, lr=cfg.lr, beta1=cfg.beta1,
                                          beta2=cfg.beta2, eps=cfg.eps)
        if ck.rng_state:
            data_rng.bit_generator.state = ck.rng_state
        start_step = ck.step
    else:
        params = _compose_params(cfg, dtype)
        adam = E.AdamState.zeros_like(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                      eps=cfg.eps)
    if set(params) != set(param_shapes(cfg.model)):
        raise ValueError("parameter set does not match the model config")
    model = Model(cfg.model, params)
    frozen = partition(cfg.model, cfg.frozen)
    hooks = cfg.persist.hooks(cfg.model)

    total = cfg.total_steps
    B = cfg.batch_size
    eval_steps = set(geometric_steps(total, B, cfg.first_sequences, cfg.eval_ratio))
    ckpt_steps = set(geometric_steps(total, B, cfg.first_sequences, cfg.checkpoint_ratio))
    eval_steps |= ckpt_steps  # every checkpoint has a metrics row
    eval_sets = make_eval_sets(bank, cfg.evaluators, cfg.eval_n, cfg.eval_seed)
    metrics = MetricsLog()
    saved: list[Path] = []
    flat = cfg.flat()
    metrics_path = out / "metrics.csv" if out is not None else None
    if metrics_path is not None and (start_step == 0 or not metrics_path.exists()):
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    def record(step):
        res = eval_suite(model, bank, cfg.evaluators, eval_sets=eval_sets, hooks=hooks)
        n0 = len(metrics.rows)
        metrics.add(step, step * B, res)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                w = csv.writer(fh)
                for r in metrics.rows[n0:]:
                    w.writerow(MetricsLog.format_row(r))
        if callback is not None:
            callback(step, res, model)

    def checkpoint(step):
        if out is None:
            return
        ck = ckio.Checkpoint(config=flat, step=step, params=model.params, adam_m=adam.m,
                             adam_v=adam.v, adam_t=adam.t,
                             rng_state=data_rng.bit_generator.state)
        saved.append(ckio.save(ck, out / "checkpoints" / ckio.checkpoint_name(step)))

    if start_step == 0:
        record(0)
        checkpoint(0)
    step = start_step
    while step < total:
        batch = sample_batch(cfg.data_kind, bank, data_rng, B)
        tens = {k: E.Tensor(v, requires_grad=k not in frozen) for k, v in params.items()}
        try:
            with E.Tape() as tape:
                logits, _ = model.forward(bank, batch, hooks, tensors=tens)
                loss = E.cross_entropy(logits, batch.target)
            grads = E.backward(tape, loss, tens)
        except E.NonFiniteError as err:
            last = saved[-1] if saved else None
            raise TrainingAborted(f"step {step}: {err}", last) from err
        E.adam_step(params, grads, adam, skip=frozen)
        step += 1
        if step in eval_steps:
            record(step)
            log.info("step %d seqs %d loss %.4f", step, step * B, loss.item())
        if step in ckpt_steps:
            checkpoint(step)
    return TrainResult(metrics, model, adam, step, saved)


def load_model(path, dtype=None) -> tuple[Model, TrainConfig, ClassBank, int]:
    ck = ckio.load(path)
    cfg = TrainConfig.from_flat(ck.config)
    dtype = dtype or cfg.dtype
    params = {k: v.astype(dtype) for k, v in ck.params.items()}
    bank = build_class_bank(cfg.bank.num_classes, cfg.bank.exemplars_per_class, cfg.bank.d_in,
                            cfg.bank.sigma, cfg.bank.seed, dtype=dtype)
    return Model(cfg.model, params), cfg, bank, ck.step


def weight_transplant_eval(run_dir, part: str, source_step: int | None = None,
                           evaluators: Seq[str] = DEFAULT_EVALUATORS, n_per_eval: int = 2000,
                           seed: int = 12345) -> MetricsLog:
    """Re-evaluate every checkpoint of a run with one partition swapped in.

    part="UPPER-from-final": UPPER weights from the last checkpoint.
    part="LOWER-from-step": LOWER weights from checkpoint ``source_step``,
    applied to checkpoints at or after that step.
    """
    paths = ckio.list_checkpoints(run_dir)
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    ckpts = [ckio.load(p) for p in paths]
    cfg = TrainConfig.from_flat(ckpts[0].config)
    for c in ckpts[1:]:
        if TrainConfig.from_flat(c.config).model != cfg.model:
            raise ValueError("checkpoints come from incompatible configs")
    bank = make_bank(cfg)
    eval_sets = make_eval_sets(bank, evaluators, n_per_eval, seed)
    if part.upper().startswith("UPPER"):
        src, names, targets = ckpts[-1], partition(cfg.model, "UPPER"), ckpts
    elif part.upper().startswith("LOWER"):
        if source_step is None:
            raise ValueError("LOWER transplant needs source_step")
        match = [c for c in ckpts if c.step == source_step]
        if not match:
            raise ValueError(f"no checkpoint at step {source_step}")
        src, names = match[0], partition(cfg.model, "LOWER")
        targets = [c for c in ckpts if c.step >= source_step]
    else:
        raise ValueError(f"unknown transplant part {part!r}")
    out = MetricsLog()
    for c in targets:
        params = dict(c.params)
        for n in names:
            if src.params[n].shape != params[n].shape:
                raise ValueError(f"incompatible shapes for '{n}'")
            params[n] = src.params[n]
        res = eval_suite(Model(cfg.model, params), bank, evaluators, eval_sets=eval_sets)
        out.add(c.step, c.step * cfg.batch_size, res)
    return out


def compose(lower: dict[str, np.ndarray], upper: dict[str, np.ndarray],
            cfg: ModelConfig) -> dict[str, np.ndarray]:
    params = {n: lower[n] for n in partition(cfg, "LOWER")}
    params.update({n: upper[n] for n in partition(cfg, "UPPER")})
    return params
