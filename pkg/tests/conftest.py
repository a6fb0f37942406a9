import numpy as np
import pytest

from coopetition.data import build_class_bank
from coopetition.model import Model, ModelConfig


def small_cfg(**kw) -> ModelConfig:
    base = dict(num_layers=2, d_model=16, num_heads=4, label_vocab=16, d_in=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cfg():
    return small_cfg()


@pytest.fixture
def bank():
    return build_class_bank(16, 4, d_in=8, sigma=0.1, seed=0, dtype=np.float64)


@pytest.fixture
def model(cfg):
    return Model.init(cfg, seed=0, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturbed(model: Model, scale: float = 0.5, seed: int = 7) -> Model:
    """A model with large random weights so attention is far from uniform."""
    r = np.random.default_rng(seed)
    return Model(model.cfg, {k: v + scale * r.standard_normal(v.shape) for k, v in model.params.items()})


def induction_model(s1: float = 10.0, s2: float = 8.0) -> Model:
    """Hand-built 2-layer ICL circuit for C=16, d_in=16, d_model=64, 4 heads.

    Residual layout: exemplar 0:16, label one-hot 16:32, position one-hot
    32:37, copied previous exemplar 48:64. L1 head 0 attends to the previous
    token and copies its exemplar; L2 head 0 matches the query exemplar to
    those copies and moves the label found there to the output.
    """
    cfg = ModelConfig(num_layers=2, d_model=64, num_heads=4, label_vocab=16, d_in=16)
    p = {k: np.zeros_like(v, dtype=np.float64) for k, v in Model.init(cfg, 0, np.float64).params.items()}
    EX, LAB, POS, COPY = slice(0, 16), slice(16, 32), 32, slice(48, 64)
    eye = np.eye(16)
    p["embed.exemplar"][:, EX] = eye
    p["embed.label"][:, LAB] = eye
    p["embed.pos"][np.arange(5), POS + np.arange(5)] = 1.0
    for t in range(5):
        p["layers.0.W_Q"][0, POS + t, t] = s1
    for t in range(4):
        p["layers.0.W_K"][0, POS + t, t + 1] = s1
    p["layers.0.W_V"][0, EX, :] = eye
    p["layers.0.W_O"][0, :, COPY] = eye
    p["layers.1.W_Q"][0, EX, :] = s2 * eye
    p["layers.1.W_K"][0, COPY, :] = s2 * eye
    p["layers.1.W_V"][0, LAB, :] = eye
    p["layers.1.W_O"][0, :, LAB] = eye
    p["unembed"][LAB, :] = eye
    return Model(cfg, p)


# acceptance criterion -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s} {detail}")
