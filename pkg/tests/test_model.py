import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopetition import engine as E
from coopetition.data import EvalKind, QUERY_POS, build_class_bank, sample_batch
from coopetition.model import (
    BlockAttnEdge,
    ClampPattern,
    FreezeFromCache,
    Model,
    ModelConfig,
    Temperature,
    ZeroDirectPath,
    ZeroEmbedding,
    ZeroHead,
    freeze_all,
    in_context_accuracy,
    init_params,
    param_shapes,
    partition,
    plain_accuracy,
)

from conftest import induction_model, perturbed, small_cfg


def _batch(bank, kind=EvalKind.BURSTY, n=24, seed=0):
    return sample_batch(kind, bank, np.random.default_rng(seed), n)


def test_init_deterministic(cfg):
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(init_params(cfg, 4)["unembed"], a["unembed"])


def test_param_count_closed_form():
    cfg = ModelConfig()
    d, C, din, L, T = 64, 12800, 64, 2, 5
    expected = din * d + C * d + T * d + L * 4 * d * d + d * C
    assert Model.init(cfg, 0).num_params() == expected


def test_one_layer_has_no_layer_two():
    names = param_shapes(small_cfg(num_layers=1))
    assert not any(n.startswith("layers.1.") for n in names)


def test_partition_names(cfg):
    lower, upper = partition(cfg, "LOWER"), partition(cfg, "UPPER")
    assert set(lower) | set(upper) == set(param_shapes(cfg)) and not set(lower) & set(upper)
    assert "unembed" in upper and "layers.0.W_Q" in lower
    assert partition(cfg, "none") == []
    with pytest.raises(ValueError):
        partition(cfg, "MIDDLE")


def test_empty_hooks_bitwise(model, bank):
    b = _batch(bank)
    l1, _ = model.forward(bank, b)
    l2, _ = model.forward(bank, b, hooks=[])
    np.testing.assert_array_equal(l1.data, l2.data)


def test_zero_everything_gives_zero_logits(model, bank):
    cfg = model.cfg
    hooks = [ZeroHead(l, h) for l in range(cfg.num_layers) for h in range(cfg.num_heads)]
    lg, _ = model.forward(bank, _batch(bank), hooks + [ZeroDirectPath()])
    assert (lg.data == 0).all()


def test_freeze_all_from_self_identity(bank):
    m = perturbed(Model.init(small_cfg(), 0, np.float64))
    b = _batch(bank)
    lg, tr = m.forward(bank, b, trace=True)
    lg2, _ = m.forward(bank, b, freeze_all(tr, range(m.cfg.num_layers)))
    assert np.abs(lg2.data - lg.data).max() <= 1e-6


def test_trace_additivity(bank):
    m = perturbed(Model.init(small_cfg(), 0, np.float64))
    _, tr = m.forward(bank, _batch(bank), trace=True)
    total = tr.direct + sum(c.sum(axis=1) for c in tr.final_contrib)
    assert np.abs(total - tr.final_resid).max() <= 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_causality_under_hooks(seed):
    bank = build_class_bank(16, 4, 8, seed=0, dtype=np.float64)
    m = perturbed(Model.init(small_cfg(), 0, np.float64), seed=seed)
    b = _batch(bank, seed=seed)
    hooks = [Temperature(1, 0, 0.3), BlockAttnEdge(0, "prev"), ZeroHead(0, 2)]
    _, tr = m.forward(bank, b, hooks, trace=True)
    upper = np.triu(np.ones((5, 5), bool), 1)
    for A in tr.patterns:
        assert (A[..., upper] == 0).all()
        np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-9)


def test_label_permutation_equivariance(model, bank):
    perm = np.random.default_rng(0).permutation(model.cfg.label_vocab)
    b = _batch(bank)
    lg, _ = model.forward(bank, b)
    p = dict(model.params)
    p["embed.label"] = model.params["embed.label"][perm]
    p["unembed"] = model.params["unembed"][:, perm]
    b2 = b.subset(slice(None))
    inv = np.argsort(perm)
    b2.labels = inv[b.labels]
    lg2, _ = Model(model.cfg, p).forward(bank, b2)
    np.testing.assert_allclose(lg2.data, lg.data[:, perm], atol=1e-12)


def test_full_model_gradient_check():
    cfg = small_cfg(label_vocab=16, d_model=16, num_heads=4, d_in=8)
    bank = build_class_bank(16, 3, 8, seed=0, dtype=np.float64)
    m = perturbed(Model.init(cfg, 0, np.float64), scale=0.3)
    b = _batch(bank, n=6)

    def loss_value():
        lg, _ = m.forward(bank, b)
        return E.cross_entropy(lg, b.target).item()

    tens = {k: E.Tensor(v, requires_grad=True) for k, v in m.params.items()}
    with E.Tape() as tape:
        lg, _ = m.forward(bank, b, tensors=tens)
        loss = E.cross_entropy(lg, b.target)
    grads = E.backward(tape, loss, tens)
    for k, p in m.params.items():
        num = E.numerical_grad(loss_value, p)
        assert E.relative_error(grads[k], num) <= 1e-4, k


def test_clamp_validation(model, bank):
    b = _batch(bank, n=4)
    bad_sum = np.array([[0.5, 0.2, 0, 0, 0]])
    with pytest.raises(ValueError):
        model.forward(bank, b, [ClampPattern(1, 0, bad_sum, rows=(QUERY_POS,))])
    acausal = np.array([[0.5, 0.5, 0, 0, 0]])
    with pytest.raises(ValueError):
        model.forward(bank, b, [ClampPattern(1, 0, acausal, rows=(0,))])
    neg = np.array([[1.5, -0.5, 0, 0, 0]])
    with pytest.raises(ValueError):
        model.forward(bank, b, [ClampPattern(1, 0, neg, rows=(QUERY_POS,))])


def test_clamp_sets_pattern(model, bank):
    b = _batch(bank, n=4)
    row = np.array([[0, 0.7, 0, 0.3, 0]])
    _, tr = model.forward(bank, b, [ClampPattern(1, 2, row, rows=(QUERY_POS,))], trace=True)
    np.testing.assert_allclose(tr.patterns[1][:, 2, QUERY_POS], np.broadcast_to(row, (4, 5)))


def test_cache_shape_mismatch(model, bank):
    _, tr = model.forward(bank, _batch(bank, n=4), trace=True)
    with pytest.raises(ValueError):
        model.forward(bank, _batch(bank, n=5), [FreezeFromCache("values", 1, tr)])


def test_zero_head_routes(bank):
    m = perturbed(Model.init(small_cfg(), 0, np.float64))
    b = _batch(bank)
    _, base = m.forward(bank, b, trace=True)
    _, out_only = m.forward(bank, b, [ZeroHead(0, 1, "output")], trace=True)
    _, lay_only = m.forward(bank, b, [ZeroHead(0, 1, "layers")], trace=True)
    # "output": later layers see the head, final residual does not
    np.testing.assert_allclose(out_only.patterns[1], base.patterns[1])
    assert (out_only.final_contrib[0][:, 1] == 0).all()
    # "layers": final residual keeps it, later layers do not
    np.testing.assert_allclose(lay_only.final_contrib[0], base.final_contrib[0])
    assert not np.allclose(lay_only.patterns[1], base.patterns[1])


def test_block_prev_edge(model, bank):
    _, tr = model.forward(bank, _batch(bank), [BlockAttnEdge(0, "prev")], trace=True)
    A = tr.patterns[0]
    for p in range(1, 5):
        assert (A[:, :, p, p - 1] == 0).all()
    with pytest.raises(ValueError):
        model.forward(bank, _batch(bank), [BlockAttnEdge(0, "next")])


def test_temperature_label_only_support(model, bank):
    _, tr = model.forward(bank, _batch(bank), [Temperature(1, 3, 0.5, label_only=True)], trace=True)
    row = tr.patterns[1][:, 3, QUERY_POS]
    assert (row[:, [0, 2, 4]] == 0).all()
    np.testing.assert_allclose(row[:, [1, 3]].sum(-1), 1.0)
    with pytest.raises(ValueError):
        Temperature(1, 0, 0.0)


def test_temperature_one_is_identity(model, bank):
    b = _batch(bank)
    lg, _ = model.forward(bank, b)
    lg2, _ = model.forward(bank, b, [Temperature(1, 0, 1.0)])
    np.testing.assert_allclose(lg2.data, lg.data, atol=1e-12)


def test_zero_embedding_all(model, bank):
    _, tr = model.forward(bank, _batch(bank), [ZeroEmbedding("all")], trace=True)
    assert (tr.direct == 0).all()
    # zero input -> uniform causal attention
    np.testing.assert_allclose(tr.patterns[0][0, 0, 4], 0.2)


def test_in_context_accuracy_examples():
    rng = np.random.default_rng(0)
    C, n = 50, 10_000
    logits = rng.standard_normal((n, C))
    ctx = np.stack([rng.integers(0, 25, n), rng.integers(25, 50, n)], 1)
    tgt = ctx[np.arange(n), rng.integers(0, 2, n)]
    assert abs(in_context_accuracy(logits, ctx, tgt) - 0.5) <= 0.015
    boosted = logits.copy()
    boosted[np.arange(n), tgt] += 10
    assert in_context_accuracy(boosted, ctx, tgt) == 1.0
    with pytest.raises(ValueError):
        in_context_accuracy(logits[:2], np.array([[0, 1], [0, 1]]), np.array([0, 7]))


def test_in_context_tie_goes_to_first_context_label():
    logits = np.zeros((1, 4))
    assert in_context_accuracy(logits, np.array([[2, 1]]), np.array([2])) == 1.0


def test_plain_accuracy_examples():
    C = 12800
    rng = np.random.default_rng(0)
    n = 2000
    acc = plain_accuracy(rng.standard_normal((n, C), dtype=np.float32), rng.integers(0, C, n))
    assert acc <= 1 / C + 3 * np.sqrt(1 / C / n)
    onehot = np.eye(5)[[1, 3]]
    assert plain_accuracy(onehot, np.array([1, 3])) == 1.0
    assert plain_accuracy(np.zeros((1, 5)), np.array([0])) == 1.0  # lowest index wins ties


def test_flip_complementarity(model, bank):
    b = _batch(bank, EvalKind.EVAL_FLIP, n=200)
    lg, _ = model.forward(bank, b)
    a_icl = in_context_accuracy(lg, b.labels, b.answer_icl)
    a_ciwl = in_context_accuracy(lg, b.labels, b.answer_ciwl)
    assert abs(a_icl - (1 - a_ciwl)) < 1e-12


def test_sinusoidal_positions_have_no_param():
    cfg = small_cfg(positional="sinusoidal")
    assert "embed.pos" not in param_shapes(cfg)
    bank = build_class_bank(16, 4, 8, seed=0)
    lg, _ = Model.init(cfg, 0).forward(bank, _batch(bank))
    assert lg.shape == (24, 16)


@pytest.mark.parametrize("kind", [EvalKind.EVAL_ICL, EvalKind.ICL_ONLY, EvalKind.EVAL_FLIP])
def test_hand_built_induction_circuit(kind):
    m = induction_model()
    bank = build_class_bank(16, 10, 16, seed=0, dtype=np.float64)
    b = _batch(bank, kind, n=2000)
    lg, _ = m.forward(bank, b)
    assert in_context_accuracy(lg, b.labels, b.answer_icl) >= 0.99
    # without the previous-token head the second layer has nothing to match
    lg, _ = m.forward(bank, b, [ZeroHead(0, 0)])
    assert abs(in_context_accuracy(lg, b.labels, b.answer_icl) - 0.5) <= 3 * np.sqrt(0.25 / 2000)
