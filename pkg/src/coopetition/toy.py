"""Tensor-product toy model of two racing mechanisms with shared and exclusive parts.

Loss on four learned vectors a, b, c, d with fixed targets a*, b*, c*, d*::

    mech1 = ||a* x b* x c* - a x b x c||^2      (fast mechanism, exclusive part a)
    mech2 = ||d* x b* x c* - d x b x c||^2      (slow mechanism, exclusive part d)
    comp  = ||a x d||^2
    total = (mech1 + mu1) * mech2 + alpha * comp

where x is the outer product and ``||.||`` the Frobenius norm. With the
scaled norm (default) each squared norm is divided by its tensor's element
count. Everything is evaluated through the rank-one identities
``||x y z||^2 = |x|^2 |y|^2 |z|^2`` and ``<u v w, x y z> = (u.x)(v.y)(w.z)``,
so no tensor is ever materialised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import engine as E

THETA_LOW = 0.5
THETA_HIGH = 0.9


class ToyDiverged(FloatingPointError):
    def __init__(self, step: int, trace: "ToyTrace"):
        super().__init__(f"toy model diverged at step {step}")
        self.step = step
        self.trace = trace

    def __reduce__(self):
        return type(self), (self.step, self.trace)


@dataclass
class ToyConfig:
    dims: tuple = (20, 20, 20, 160)  # (a, b, c, d)
    mu1: float = 0.1
    alpha: float = 0.1
    lr: float = 1.0
    steps: int = 40_000
    seed: int = 0
    scaled_norm: bool = True
    scale_competition: bool = True
    record_norms: bool = False
    theta_low: float = THETA_LOW
    theta_high: float = THETA_HIGH

    def __post_init__(self):
        self.dims = tuple(int(x) for x in self.dims)
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ValueError("dims must be four positive extents (a, b, c, d)")
        if self.mu1 < 0 or self.alpha < 0:
            raise ValueError("mu1 and alpha must be nonnegative")


@dataclass
class ToyState:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    a_star: np.ndarray
    b_star: np.ndarray
    c_star: np.ndarray
    d_star: np.ndarray

    @classmethod
    def random(cls, cfg: ToyConfig) -> "ToyState":
        """Targets first, then learned vectors; every entry i.i.d. N(0, 1)."""
        rng = np.random.default_rng(cfg.seed)
        targets = [rng.standard_normal(n) for n in cfg.dims]
        learned = [rng.standard_normal(n) for n in cfg.dims]
        return cls(*learned, *targets)

    def learned(self):
        return self.a, self.b, self.c, self.d

    def copy(self) -> "ToyState":
        return ToyState(*(np.array(x, dtype=np.float64) for x in (
            self.a, self.b, self.c, self.d, self.a_star, self.b_star, self.c_star, self.d_star)))


def _norms(cfg: ToyConfig):
    da, db, dc, dd = cfg.dims
    if not cfg.scaled_norm:
        return 1.0, 1.0, 1.0
    n3 = float(da * dd) if cfg.scale_competition else 1.0
    return float(da * db * dc), float(dd * db * dc), n3


def plateaus(state: ToyState, cfg: ToyConfig) -> tuple[float, float]:
    """mech1 at a = 0 and mech2 at d = 0: the scaled ||a* b* c*||^2 and ||d* b* c*||^2."""
    n1, n2, _ = _norms(cfg)
    bc = (state.b_star @ state.b_star) * (state.c_star @ state.c_star)
    return (state.a_star @ state.a_star) * bc / n1, (state.d_star @ state.d_star) * bc / n2


def toy_loss(state: ToyState, cfg: ToyConfig) -> tuple[float, float, float, float]:
    """Return ``(total, mech1, mech2, competition)``."""
    return _loss_and_grad(state, cfg, want_grad=False)[0]


def toy_grad(state: ToyState, cfg: ToyConfig):
    """Analytic gradient of the total loss w.r.t. (a, b, c, d)."""
    return _loss_and_grad(state, cfg, want_grad=True)[1]


def _loss_and_grad(s: ToyState, cfg: ToyConfig, want_grad: bool):
    n1, n2, n3 = _norms(cfg)
    a, b, c, d = s.a, s.b, s.c, s.d
    As, Bs, Cs, Ds = s.a_star, s.b_star, s.c_star, s.d_star
    aa, bb, cc, dd = a @ a, b @ b, c @ c, d @ d
    pa, pb, pc, pd = As @ a, Bs @ b, Cs @ c, Ds @ d
    sbc = (Bs @ Bs) * (Cs @ Cs)
    m1 = ((As @ As) * sbc - 2.0 * pa * pb * pc + aa * bb * cc) / n1
    m2 = ((Ds @ Ds) * sbc - 2.0 * pd * pb * pc + dd * bb * cc) / n2
    m1, m2 = max(m1, 0.0), max(m2, 0.0)  # cancellation can leave -1e-16
    comp = aa * dd / n3
    w1 = m1 + cfg.mu1
    total = w1 * m2 + cfg.alpha * comp
    if not want_grad:
        return (total, m1, m2, comp), None
    # d mech1 / d(a, b, c) and d mech2 / d(d, b, c)
    g1a = 2.0 * (bb * cc * a - pb * pc * As) / n1
    g1b = 2.0 * (aa * cc * b - pa * pc * Bs) / n1
    g1c = 2.0 * (aa * bb * c - pa * pb * Cs) / n1
    g2d = 2.0 * (bb * cc * d - pb * pc * Ds) / n2
    g2b = 2.0 * (dd * cc * b - pd * pc * Bs) / n2
    g2c = 2.0 * (dd * bb * c - pd * pb * Cs) / n2
    ga = m2 * g1a + cfg.alpha * 2.0 * dd * a / n3
    gd = w1 * g2d + cfg.alpha * 2.0 * aa * d / n3
    gb = m2 * g1b + w1 * g2b
    gc = m2 * g1c + w1 * g2c
    return (total, m1, m2, comp), (ga, gb, gc, gd)


def toy_step(state: ToyState, cfg: ToyConfig) -> ToyState:
    """One simultaneous full-gradient step on a, b, c, d (targets untouched)."""
    ga, gb, gc, gd = toy_grad(state, cfg)
    new = ToyState(state.a - cfg.lr * ga, state.b - cfg.lr * gb, state.c - cfg.lr * gc,
                   state.d - cfg.lr * gd, state.a_star, state.b_star, state.c_star, state.d_star)
    for x in new.learned():
        if not np.isfinite(x).all():
            raise FloatingPointError("non-finite toy state")
    return new


@dataclass
class ToyTrace:
    """Rows are recorded before each step, plus the final state (steps + 1 rows)."""

    mech1: np.ndarray
    mech2: np.ndarray
    competition: np.ndarray
    total: np.ndarray
    plateau1: float
    plateau2: float
    config: ToyConfig
    norms: np.ndarray | None = None  # (steps+1, 4) |a|, |b|, |c|, |d|
    final_state: ToyState | None = None

    def __len__(self):
        return len(self.total)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mech1", "mech2", "competition", "total"])
            for t in range(len(self.total)):
                w.writerow([t, repr(float(self.mech1[t])), repr(float(self.mech2[t])),
                            repr(float(self.competition[t])), repr(float(self.total[t]))])


def toy_run(cfg: ToyConfig, state: ToyState | None = None) -> ToyTrace:
    """Plain gradient descent from ``state`` (default: random init from ``cfg.seed``)."""
    s = ToyState.random(cfg) if state is None else state.copy()
    p1, p2 = plateaus(s, cfg)
    T = cfg.steps
    rec = np.empty((T + 1, 4))
    norms = np.empty((T + 1, 4)) if cfg.record_norms else None
    lr = cfg.lr
    a, b, c, d = s.a.copy(), s.b.copy(), s.c.copy(), s.d.copy()
    for t in range(T + 1):
        s.a, s.b, s.c, s.d = a, b, c, d
        (total, m1, m2, comp), g = _loss_and_grad(s, cfg, want_grad=t < T)
        rec[t] = m1, m2, comp, total
        if norms is not None:
            norms[t] = [np.sqrt(x @ x) for x in (a, b, c, d)]
        if not np.isfinite(total):
            tr = _trace(rec[: t + 1], p1, p2, cfg, None if norms is None else norms[: t + 1])
            raise ToyDiverged(t, tr)
        if t == T:
            break
        ga, gb, gc, gd = g
        a = a - lr * ga
        b = b - lr * gb
        c = c - lr * gc
        d = d - lr * gd
    tr = _trace(rec, p1, p2, cfg, norms)
    tr.final_state = s
    return tr


def _trace(rec, p1, p2, cfg, norms) -> ToyTrace:
    return ToyTrace(rec[:, 0].copy(), rec[:, 1].copy(), rec[:, 2].copy(), rec[:, 3].copy(),
                    float(p1), float(p2), cfg, norms)


# ------------------------------------------------------------ brute-force oracle


def outer3(x, y, z) -> np.ndarray:
    return np.einsum("i,j,k->ijk", x, y, z)


def materialized_loss(s: ToyState, cfg: ToyConfig) -> tuple[float, float, float, float]:
    """Same loss with the tensors built explicitly (slow; small dims only)."""
    n1, n2, n3 = _norms(cfg)
    m1 = np.sum((outer3(s.a_star, s.b_star, s.c_star) - outer3(s.a, s.b, s.c)) ** 2) / n1
    m2 = np.sum((outer3(s.d_star, s.b_star, s.c_star) - outer3(s.d, s.b, s.c)) ** 2) / n2
    comp = np.sum(np.outer(s.a, s.d) ** 2) / n3
    return (m1 + cfg.mu1) * m2 + cfg.alpha * comp, m1, m2, comp


def engine_loss(s: ToyState, cfg: ToyConfig, tensors) -> E.Tensor:
    """Materialised loss built from engine primitives, for autodiff cross-checks."""
    a, b, c, d = tensors
    n1, n2, n3 = _norms(cfg)

    def outer(x, y, z):
        xy = E.matmul(E.reshape(x, (-1, 1)), E.reshape(y, (1, -1)))
        return E.matmul(E.reshape(xy, (-1, 1)), E.reshape(z, (1, -1)))

    def sq(x):
        return E.sum(E.mul(x, x))

    t1 = outer3(s.a_star, s.b_star, s.c_star).reshape(-1, s.c_star.size)
    t2 = outer3(s.d_star, s.b_star, s.c_star).reshape(-1, s.c_star.size)
    m1 = E.scale(sq(E.add(E.Tensor(t1), E.neg(outer(a, b, c)))), 1.0 / n1)
    m2 = E.scale(sq(E.add(E.Tensor(t2), E.neg(outer(d, b, c)))), 1.0 / n2)
    ad = E.matmul(E.reshape(a, (-1, 1)), E.reshape(d, (1, -1)))
    comp = E.scale(sq(ad), 1.0 / n3)
    return E.add(E.mul(E.add(m1, cfg.mu1), m2), E.scale(comp, cfg.alpha))


# -------------------------------------------------------------------- signatures


def plateau_stuck(tr: ToyTrace, frac: float | None = None) -> bool:
    """Neither mechanism ever got below ``frac`` (default theta_low) of its plateau value."""
    frac = tr.config.theta_low if frac is None else frac
    r1 = np.min(tr.mech1) / tr.plateau1
    r2 = np.min(tr.mech2) / tr.plateau2
    return bool(min(r1, r2) > frac)


def is_transient(tr: ToyTrace, theta_low: float | None = None,
                 theta_high: float | None = None) -> bool:
    """mech1 learned (min < theta_low) and then lost (final > theta_high * plateau)."""
    lo = tr.config.theta_low if theta_low is None else theta_low
    hi = tr.config.theta_high if theta_high is None else theta_high
    if plateau_stuck(tr):
        return False
    return bool(tr.mech1.min() < lo and tr.mech1[-1] > hi * tr.plateau1)


def mech2_settled(tr: ToyTrace, mech2_final: float = 0.05, comp_final: float = 1e-2) -> bool:
    """mech2 learned and the competition term resolved at the end of the run."""
    return bool(tr.mech2[-1] < mech2_final and tr.competition[-1] < comp_final)


def mech1_persists(tr: ToyTrace, final_below: float = 0.05) -> bool:
    """mech1 ends learned while mech2 is pushed back up (mu1 = 0 regime)."""
    m2_back = tr.mech2[-1] > tr.mech2[0] or tr.mech2[-1] > tr.config.theta_high * tr.plateau2
    return bool(tr.mech1[-1] < final_below and m2_back)


def find_divot(series: np.ndarray, window: int | None = 100, rise: float = 1.02,
               fall: float = 0.98, floor: float = 1e-3) -> int | None:
    """First local increase of ``series`` after its first descent, or None.

    With a window w: some t with ``x[t+w] > rise * x[t]`` after the first t with
    ``x[t+w] < fall * x[t]``. With ``window=None``: the series climbs ``rise``
    times above its running minimum after first falling below ``fall * x[0]``.
    Points below ``floor * x[0]`` are ignored so converged tails cannot trigger.
    """
    x = np.asarray(series, dtype=float)
    lim = floor * x[0] if x.size else 0.0
    if window is None:
        desc = np.nonzero(x < fall * x[0])[0] if x.size else []
        if len(desc) == 0:
            return None
        t0 = desc[0]
        run_min = np.minimum.accumulate(x[t0:])
        hit = np.nonzero((x[t0:] > rise * run_min) & (run_min > lim))[0]
        return int(t0 + hit[0]) if hit.size else None
    if x.size <= window:
        return None
    lo, hi = x[:-window], x[window:]
    valid = lo > lim
    desc = np.nonzero(valid & (hi < fall * lo))[0]
    if desc.size == 0:
        return None
    t0 = desc[0]
    up = np.nonzero(valid[t0:] & (hi[t0:] > rise * lo[t0:]))[0]
    return int(t0 + up[0]) if up.size else None


@dataclass
class SweepResult:
    traces: list[ToyTrace]
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def summarize(tr: ToyTrace, window: int | None = 100) -> dict:
    divot = find_divot(tr.mech2, window)
    return dict(
        seed=tr.config.seed,
        mu1=tr.config.mu1,
        alpha=tr.config.alpha,
        dims="x".join(str(x) for x in tr.config.dims),
        plateau_stuck=plateau_stuck(tr),
        transient=is_transient(tr),
        mech2_settled=mech2_settled(tr),
        divot=divot is not None,
        divot_step=-1 if divot is None else divot,
        mech1_persists=mech1_persists(tr),
        mech1_min=float(tr.mech1.min()),
        mech1_argmin=int(tr.mech1.argmin()),
        mech1_final=float(tr.mech1[-1]),
        mech2_final=float(tr.mech2[-1]),
        competition_final=float(tr.competition[-1]),
        plateau1=tr.plateau1,
        plateau2=tr.plateau2,
    )


def _run_one(cfg: ToyConfig) -> ToyTrace:
    return toy_run(cfg)


def toy_sweep(configs: Iterable[ToyConfig], workers: int = 1,
              window: int | None = 100) -> SweepResult:
    """Run every config and flag transience, divot and plateau-stuck signatures."""
    configs = list(configs)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            traces = list(ex.map(_run_one, configs))
    else:
        traces = [toy_run(c) for c in configs]
    return SweepResult(traces, [summarize(t, window) for t in traces])


def seeds_configs(base: ToyConfig, seeds: Iterable[int]) -> list[ToyConfig]:
    from dataclasses import replace

    return [replace(base, seed=int(s)) for s in seeds]


def write_outputs(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for tr in result.traces:
        tr.to_csv(out / f"trace_seed{tr.config.seed}.csv")
    result.to_csv(out / "summary.csv")
