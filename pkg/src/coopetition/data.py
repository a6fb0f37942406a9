"""Synthetic few-shot episodes: a frozen class/exemplar bank and the sequence samplers.

Every episode is five tokens ``[x1, l1, x2, l2, xq]``: exemplars at positions
0, 2, 4 and labels at positions 1, 3 (0-based; the query is read at 4).
Exemplar vectors come from unit-norm Gaussian class prototypes plus frozen
per-exemplar Gaussian noise, standing in for image embeddings.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

SEQ_LEN = 5
EXEMPLAR_POS = (0, 2, 4)
LABEL_POS = (1, 3)
QUERY_POS = 4


class EvalKind(str, enum.Enum):
    BURSTY = "BURSTY"
    MATCHED_BURSTY = "MATCHED_BURSTY"
    ICL_ONLY = "ICL_ONLY"
    CIWL_ONLY = "CIWL_ONLY"
    EVAL_ICL = "EVAL_ICL"
    EVAL_IWL = "EVAL_IWL"
    EVAL_CIWL = "EVAL_CIWL"
    EVAL_FLIP = "EVAL_FLIP"


TRAIN_KINDS = (EvalKind.BURSTY, EvalKind.MATCHED_BURSTY, EvalKind.ICL_ONLY, EvalKind.CIWL_ONLY)
EVALUATORS = (EvalKind.EVAL_ICL, EvalKind.EVAL_IWL, EvalKind.EVAL_CIWL, EvalKind.EVAL_FLIP)

_NEEDS_THREE = {EvalKind.CIWL_ONLY, EvalKind.EVAL_CIWL, EvalKind.EVAL_IWL}


@dataclass
class ClassBank:
    num_classes: int
    exemplars_per_class: int
    d_in: int
    sigma: float
    seed: int
    prototypes: np.ndarray  # (C, d_in), unit norm
    vectors: np.ndarray  # (C, E, d_in)
    label_map: np.ndarray  # (C,) class -> trained label

    def config(self) -> dict:
        return dict(
            num_classes=self.num_classes,
            exemplars_per_class=self.exemplars_per_class,
            d_in=self.d_in,
            sigma=self.sigma,
            seed=self.seed,
        )


def build_class_bank(
    num_classes: int,
    exemplars_per_class: int,
    d_in: int = 64,
    sigma: float = 0.1,
    seed: int = 0,
    dtype=np.float32,
) -> ClassBank:
    """Sample prototypes and per-exemplar noise once; the result is frozen.

    Generation is in float64 and cast to ``dtype`` so the bank is identical
    across precisions up to rounding.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if exemplars_per_class < 1:
        raise ValueError("need at least 1 exemplar per class")
    if d_in < 1:
        raise ValueError("d_in must be positive")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    proto = rng.standard_normal((num_classes, d_in))
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    noise = rng.standard_normal((num_classes, exemplars_per_class, d_in))
    vectors = proto[:, None, :] + sigma * noise
    return ClassBank(
        num_classes=num_classes,
        exemplars_per_class=exemplars_per_class,
        d_in=d_in,
        sigma=float(sigma),
        seed=seed,
        prototypes=proto.astype(dtype),
        vectors=vectors.astype(dtype),
        label_map=np.arange(num_classes),
    )


@dataclass
class Sequence:
    """One episode. Undefined answers are -1."""

    kind: EvalKind
    classes: tuple[int, int, int]
    exemplars: tuple[int, int, int]
    labels: tuple[int, int]
    answer_icl: int
    answer_ciwl: int
    answer_train: int

    @property
    def context_labels(self) -> set[int]:
        return set(self.labels)

    @property
    def tokens(self) -> list:
        (c1, c2, cq), (e1, e2, eq) = self.classes, self.exemplars
        return [(c1, e1), self.labels[0], (c2, e2), self.labels[1], (cq, eq)]


@dataclass
class Batch:
    """Column-oriented batch of episodes of one kind.

    ``classes``/``exemplars`` are (B, 3) for positions 0, 2, 4; ``labels`` is
    (B, 2) for positions 1, 3. ``target`` is what the training loss uses.
    """

    kind: EvalKind
    classes: np.ndarray
    exemplars: np.ndarray
    labels: np.ndarray
    answer_icl: np.ndarray
    answer_ciwl: np.ndarray
    answer_train: np.ndarray

    def __len__(self):
        return self.classes.shape[0]

    @property
    def target(self) -> np.ndarray:
        return training_target(self)

    def __getitem__(self, i: int) -> Sequence:
        return Sequence(
            kind=self.kind,
            classes=tuple(int(x) for x in self.classes[i]),
            exemplars=tuple(int(x) for x in self.exemplars[i]),
            labels=tuple(int(x) for x in self.labels[i]),
            answer_icl=int(self.answer_icl[i]),
            answer_ciwl=int(self.answer_ciwl[i]),
            answer_train=int(self.answer_train[i]),
        )

    def subset(self, idx) -> "Batch":
        return Batch(
            self.kind,
            self.classes[idx],
            self.exemplars[idx],
            self.labels[idx],
            self.answer_icl[idx],
            self.answer_ciwl[idx],
            self.answer_train[idx],
        )


def scoring_answer(batch: Batch) -> np.ndarray:
    """The answer key an evaluator is scored against."""
    k = batch.kind
    if k in (EvalKind.EVAL_ICL, EvalKind.EVAL_FLIP, EvalKind.ICL_ONLY):
        return batch.answer_icl
    if k in (EvalKind.EVAL_CIWL, EvalKind.CIWL_ONLY):
        return batch.answer_ciwl
    return batch.answer_train


training_target = scoring_answer


def _two_distinct(rng, C: int, n: int) -> np.ndarray:
    a = rng.integers(0, C, n)
    b = (a + rng.integers(1, C, n)) % C
    return np.stack([a, b], axis=1)


def _three_distinct(rng, C: int, n: int) -> np.ndarray:
    out = np.empty((n, 3), dtype=np.int64)
    out[:, :2] = _two_distinct(rng, C, n)
    # rejection for the third; at most a couple of rounds for any C >= 3
    third = rng.integers(0, C, n)
    bad = (third == out[:, 0]) | (third == out[:, 1])
    while bad.any():
        third[bad] = rng.integers(0, C, int(bad.sum()))
        bad = (third == out[:, 0]) | (third == out[:, 1])
    out[:, 2] = third
    return out


def _distinct_exemplar(rng, E: int, other: np.ndarray) -> np.ndarray:
    if E == 1:
        return np.zeros_like(other)
    return (other + rng.integers(1, E, other.shape[0])) % E


def sample_batch(kind, bank: ClassBank, rng: np.random.Generator, n: int) -> Batch:
    """Sample ``n`` independent episodes of ``kind``; see :class:`EvalKind`."""
    kind = EvalKind(kind)
    C, E = bank.num_classes, bank.exemplars_per_class
    if kind in _NEEDS_THREE and C < 3:
        raise ValueError(f"{kind.value} needs at least 3 classes")
    lab = bank.label_map
    rows = np.arange(n)
    undefined = np.full(n, -1, dtype=np.int64)
    exemplars = rng.integers(0, E, (n, 3))

    if kind in (EvalKind.BURSTY, EvalKind.MATCHED_BURSTY, EvalKind.ICL_ONLY,
                EvalKind.EVAL_ICL, EvalKind.EVAL_FLIP):
        ctx = _two_distinct(rng, C, n)
        which = rng.integers(0, 2, n)  # context slot holding the query class
        qc = ctx[rows, which]
        classes = np.column_stack([ctx, qc])
        if kind is EvalKind.MATCHED_BURSTY:
            exemplars[:, 2] = exemplars[rows, which]
        else:
            exemplars[:, 2] = _distinct_exemplar(rng, E, exemplars[rows, which])
        trained = lab[ctx]
        if kind in (EvalKind.BURSTY, EvalKind.MATCHED_BURSTY):
            labels = trained
            ans = lab[qc]
            return Batch(kind, classes, exemplars, labels, ans, ans.copy(), ans.copy())
        if kind is EvalKind.ICL_ONLY:
            labels = _two_distinct(rng, C, n)
            return Batch(kind, classes, exemplars, labels, labels[rows, which], undefined,
                         undefined.copy())
        if kind is EvalKind.EVAL_ICL:
            first = rng.integers(0, 2, n)
            labels = np.column_stack([first, 1 - first])
            return Batch(kind, classes, exemplars, labels, labels[rows, which], undefined,
                         lab[qc])
        # EVAL_FLIP: each context exemplar carries the other's trained label
        labels = trained[:, ::-1].copy()
        return Batch(kind, classes, exemplars, labels, labels[rows, which], lab[qc], lab[qc])

    # query class absent from context
    cls3 = _three_distinct(rng, C, n)
    ctx, qc = cls3[:, :2], cls3[:, 2]
    classes = np.column_stack([ctx, qc])
    labels = lab[ctx].copy()
    if kind is EvalKind.EVAL_IWL:
        return Batch(kind, classes, exemplars, labels, undefined, undefined.copy(), lab[qc])
    slot = rng.integers(0, 2, n)
    labels[rows, slot] = lab[qc]
    return Batch(kind, classes, exemplars, labels, undefined, lab[qc], lab[qc])


def sample_sequence(kind, bank: ClassBank, rng: np.random.Generator) -> Sequence:
    return sample_batch(kind, bank, rng, 1)[0]


def force_label_position(batch: Batch, answer: np.ndarray, position: int) -> Batch:
    """Swap context pairs so the label equal to ``answer`` sits at token ``position`` (1 or 3)."""
    if position not in LABEL_POS:
        raise ValueError("label position must be 1 or 3")
    slot = LABEL_POS.index(position)
    cur = np.argmax(batch.labels == answer[:, None], axis=1)
    if not (batch.labels[np.arange(len(batch)), cur] == answer).all():
        raise ValueError("answer label missing from context")
    swap = cur != slot
    out = batch.subset(slice(None))
    out.classes = batch.classes.copy()
    out.exemplars = batch.exemplars.copy()
    out.labels = batch.labels.copy()
    out.classes[swap, :2] = batch.classes[swap, 1::-1]
    out.exemplars[swap, :2] = batch.exemplars[swap, 1::-1]
    out.labels[swap] = batch.labels[swap, ::-1]
    return out


def embed_tokens(bank: ClassBank, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Exemplar vectors (B, 3, d_in) for positions 0, 2, 4 and label ids (B, 2)."""
    C, E = bank.num_classes, bank.exemplars_per_class
    c, e = batch.classes, batch.exemplars
    if c.min() < 0 or c.max() >= C or e.min() < 0 or e.max() >= E:
        raise IndexError("dangling class/exemplar reference")
    if batch.labels.min() < 0 or batch.labels.max() >= C:
        raise IndexError("label id outside the label vocabulary")
    return bank.vectors[c, e], batch.labels


def label_positions(batch: Batch, answer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Token positions of the label equal to ``answer`` and of the other context label."""
    hit = batch.labels == answer[:, None]
    if not hit.any(axis=1).all():
        raise ValueError("answer label missing from context")
    slot = np.argmax(hit, axis=1)
    pos = np.asarray(LABEL_POS)
    return pos[slot], pos[1 - slot]


def export_csv(batch: Batch, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "class0", "exemplar0", "label1", "class2", "exemplar2", "label3",
                    "query_class", "query_exemplar", "answer_icl", "answer_ciwl", "answer_train"])
        for i in range(len(batch)):
            c, e, l = batch.classes[i], batch.exemplars[i], batch.labels[i]
            w.writerow([batch.kind.value, c[0], e[0], l[0], c[1], e[1], l[1], c[2], e[2],
                        batch.answer_icl[i], batch.answer_ciwl[i], batch.answer_train[i]])
