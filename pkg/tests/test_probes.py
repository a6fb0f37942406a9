import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopetition import probes as P
from coopetition.data import EvalKind, build_class_bank, sample_batch
from coopetition.model import Model, ZeroDirectPath

from conftest import induction_model, perturbed, small_cfg


@pytest.fixture(scope="module")
def pbank():
    return build_class_bank(40, 4, 8, sigma=0.1, seed=0, dtype=np.float64)


@pytest.fixture(scope="module")
def rand_model():
    return perturbed(Model.init(small_cfg(label_vocab=40), 0, np.float64), scale=0.4)


def uniform_model(L=2):
    """W_Q = 0 makes every attention row uniform over its causal prefix."""
    m = Model.init(small_cfg(label_vocab=40, num_layers=L), 0, np.float64)
    for l in range(L):
        m.params[f"layers.{l}.W_Q"][:] = 0
    return m


def attend_pos1_model():
    """Layer-2 head 0 attends from the query to position 1 only."""
    m = Model.init(small_cfg(label_vocab=40), 0, np.float64)
    p = m.params
    p["embed.exemplar"][:] = 0
    p["embed.label"][:] = 0
    p["embed.pos"][:] = 0
    p["embed.pos"][4, 0] = 1.0
    p["embed.pos"][1, 1] = 1.0
    p["layers.0.W_O"][:] = 0
    p["layers.1.W_Q"][:] = 0
    p["layers.1.W_K"][:] = 0
    p["layers.1.W_Q"][0, 0, 0] = 30.0
    p["layers.1.W_K"][0, 1, 0] = 30.0
    return m


def test_profile_uniform():
    rep = P.attention_profile(uniform_model(), build_class_bank(40, 4, 8, seed=0), n=50)
    for row in rep.rows:
        for p in range(5):
            assert abs(row[f"pos{p}"] - 0.2) < 1e-12
        assert abs(row["delta"]) < 1e-12


def test_profile_peak_follows_label_position(pbank):
    m = attend_pos1_model()
    at1 = P.attention_profile(m, pbank, label_pos=1, n=100).rows[0]
    at3 = P.attention_profile(m, pbank, label_pos=3, n=100).rows[0]
    assert at1["pos1"] > 0.99 and at1["delta"] > 0.99
    assert at3["delta"] < -0.99


def test_profile_rows_sum_to_one(rand_model, pbank):
    rep = P.attention_profile(rand_model, pbank, n=100)
    for row in rep.rows:
        assert abs(sum(row[f"pos{p}"] for p in range(5)) - 1) < 1e-9


def test_profile_iwl_has_no_delta(rand_model, pbank):
    rep = P.attention_profile(rand_model, pbank, kind=EvalKind.EVAL_IWL, n=50)
    assert "delta" not in rep.rows[0]


def test_delta_hand_built():
    b = sample_batch(EvalKind.EVAL_FLIP, build_class_bank(10, 2, 4, seed=0),
                     np.random.default_rng(0), 20)
    cp, op = P.label_positions(b, b.answer_icl)
    A = np.zeros((20, 1, 5))
    A[np.arange(20), 0, cp] = 0.7
    A[np.arange(20), 0, op] = 0.1
    A[:, 0, 0] += 0.2
    np.testing.assert_allclose(P._deltas(A, b, b.answer_icl), 0.6)
    A[np.arange(20), 0, cp] = 0.4
    A[np.arange(20), 0, op] = 0.4
    np.testing.assert_allclose(P._deltas(A, b, b.answer_icl), 0.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_induction_in_range(seed):
    bank = build_class_bank(40, 4, 8, seed=0, dtype=np.float64)
    m = perturbed(Model.init(small_cfg(label_vocab=40), 0, np.float64), scale=2.0, seed=seed)
    rep = P.induction_strength(m, bank, n=40, seed=seed)
    assert all(-1 <= r["strength"] <= 1 for r in rep.rows)


def test_induction_needs_two_layers(pbank):
    with pytest.raises(ValueError):
        P.induction_strength(uniform_model(L=1), pbank, n=10)


def test_clamp_weight_range(rand_model, pbank):
    with pytest.raises(ValueError):
        P.clamp_sweep(rand_model, pbank, 0, [0.0, 1.2], n=10)
    with pytest.raises(ValueError):
        P.clamp_sweep(rand_model, pbank, 0, [-0.1], n=10)


def test_clamp_patterns_valid(pbank):
    b = sample_batch(EvalKind.EVAL_CIWL, pbank, np.random.default_rng(0), 30)
    pat = P.clamp_patterns(b, b.answer_ciwl, 0.8)
    np.testing.assert_allclose(pat.sum(-1), 1.0)
    assert (pat >= 0).all() and (pat[:, 0, [0, 2, 4]] == 0).all()


def test_clamp_half_on_label_symmetric_model(pbank):
    m = Model.init(small_cfg(label_vocab=40), 3, np.float64)
    m.params["embed.exemplar"][:] = 0
    m.params["embed.pos"][:] = 0
    m.params["layers.0.W_O"][:] = 0
    n = 2000
    acc = P.clamp_sweep(m, pbank, 0, [0.5], n=n).rows[0]["accuracy"]
    assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_preserve_set_parsing():
    assert P.preserve_set("all") == frozenset(P.PRESERVABLE)
    assert P.preserve_set("all-but-values") == {"keys", "queries"}
    assert P.preserve_set("all-but-keys") == {"queries", "values"}
    assert P.preserve_set("all-but-patterns") == {"values"}
    assert P.preserve_set("keys,values") == {"keys", "values"}
    assert P.preserve_set("none") == frozenset()
    for bad in ("weights", "all-but-weights", ["keys", "mlp"]):
        with pytest.raises(ValueError):
            P.preserve_set(bad)


def test_composition_full_preserve_identity(rand_model, pbank):
    rep = P.composition_ablation(rand_model, pbank, "all", n=200)
    assert rep.value("max_logit_diff") <= 1e-6 and rep.value("drop") == 0
    rep = P.composition_ablation(rand_model, pbank, ["keys", "queries", "values"], n=200)
    assert rep.value("max_logit_diff") <= 1e-6


def test_composition_partial_changes_logits(rand_model, pbank):
    rep = P.composition_ablation(rand_model, pbank, "all-but-values", n=100)
    assert rep.value("max_logit_diff") > 1e-6


def test_composition_errors(rand_model, pbank):
    with pytest.raises(ValueError):
        P.composition_ablation(rand_model, pbank, "bogus", n=10)
    with pytest.raises(ValueError):
        P.composition_ablation(uniform_model(L=1), pbank, "all", n=10)


def test_direct_path_heads_only_matches_zero_direct_path(rand_model, pbank):
    rep = P.direct_path_ablation(rand_model, pbank, "heads_only", n=200)
    b = sample_batch(EvalKind.EVAL_CIWL, pbank, np.random.default_rng(0), 200)
    hits = P.hooked_hits(rand_model, pbank, b, b.answer_ciwl, [ZeroDirectPath()])
    assert abs(hits.mean() - rep.value("ablated")) < 1e-12


@pytest.mark.parametrize("mode", P.DIRECT_MODES)
def test_direct_path_untrained_near_chance(mode):
    # per-class logit biases are fixed by the init, so chance needs many classes
    bank = build_class_bank(2000, 4, 8, seed=0, dtype=np.float64)
    m = Model.init(small_cfg(label_vocab=2000), 0, np.float64)
    n = 2000
    acc = P.direct_path_ablation(m, bank, mode, n=n).value("ablated")
    assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_direct_path_bad_mode(rand_model, pbank):
    with pytest.raises(ValueError):
        P.direct_path_ablation(rand_model, pbank, "both", n=10)


def test_temperature_identity_and_errors(rand_model, pbank):
    base = P.composition_ablation(rand_model, pbank, "all", n=300).value("baseline")
    rep = P.temperature_probe(rand_model, pbank, 2, [1.0], all_heads_active=True,
                              label_only=False, n=300)
    assert rep.rows[0]["accuracy"] == base
    with pytest.raises(ValueError):
        P.temperature_probe(rand_model, pbank, 0, [0.0], n=10)


def test_scatter_identical_heads_on_diagonal(pbank):
    m = perturbed(Model.init(small_cfg(label_vocab=40), 0, np.float64))
    for w in ("W_Q", "W_K", "W_V", "W_O"):
        m.params[f"layers.1.{w}"][0] = m.params[f"layers.1.{w}"][1]
    rep = P.per_seq_attention_scatter(m, pbank, (0, 1), n=200)
    assert rep.value("mean_abs_diff") == 0.0 and rep.value("spearman") == 1.0


def test_scatter_untrained_near_origin(pbank):
    m = Model.init(small_cfg(label_vocab=40), 0, np.float64)
    rep = P.per_seq_attention_scatter(m, pbank, (0, 1), n=200)
    assert max(abs(r["delta_i"]) + abs(r["delta_j"]) for r in rep.rows) < 0.01


def test_l1_summary_uniform(pbank):
    rep = P.l1_attention_summary(uniform_model(), pbank, n=30)
    for row in rep.rows:
        assert abs(row["prev_pos1"] - 1 / 2) < 1e-12 and abs(row["self_pos1"] - 1 / 2) < 1e-12
        assert abs(row["prev_pos3"] - 1 / 4) < 1e-12 and abs(row["self_pos3"] - 1 / 4) < 1e-12


def test_probes_never_mutate(rand_model, pbank):
    before = P.param_checksum(rand_model)
    P.attention_profile(rand_model, pbank, n=20)
    P.induction_strength(rand_model, pbank, n=20)
    P.clamp_sweep(rand_model, pbank, 1, [0, 1], n=20)
    P.composition_ablation(rand_model, pbank, "all-but-keys", n=20)
    P.l1_output_ablation(rand_model, pbank, n=20)
    P.direct_path_ablation(rand_model, pbank, "heads_only", n=20)
    P.temperature_probe(rand_model, pbank, 0, [0.5], n=20)
    P.per_seq_attention_scatter(rand_model, pbank, (0, 2), n=20)
    P.l1_attention_summary(rand_model, pbank, n=20)
    assert P.param_checksum(rand_model) == before
    assert all(p.flags.writeable for p in rand_model.params.values())


def test_read_only_blocks_writes(rand_model):
    with P.read_only(rand_model):
        with pytest.raises(ValueError):
            rand_model.params["unembed"][0, 0] = 1.0


def test_per_sequence_records_reproducible(rand_model, pbank):
    a = P.per_seq_attention_scatter(rand_model, pbank, (0, 1), n=50, seed=4).rows
    b = P.per_seq_attention_scatter(rand_model, pbank, (0, 1), n=50, seed=4).rows
    assert a == b


def test_report_files(tmp_path, rand_model, pbank):
    rep = P.clamp_sweep(rand_model, pbank, 1, [0, 0.5, 1], n=30, checkpoint="step_000000100")
    rows, summ = rep.write(tmp_path)
    assert rows.name == "step_000000100__clamp_sweep__L1h1.csv"
    assert summ.name == "step_000000100__clamp_sweep__L1h1__summary.csv"
    lines = summ.read_text().splitlines()
    assert lines[0].startswith("probe,key,value,n")
    assert all(line.split(",")[3] for line in lines[1:])  # every value carries n
    assert len(rows.read_text().splitlines()) == 4


def test_induction_strength_on_hand_built_circuit():
    m = induction_model()
    bank = build_class_bank(16, 10, 16, seed=0, dtype=np.float64)
    rep = P.induction_strength(m, bank, n=500)
    assert rep.value("head0") > 0.4
    # heads with zero weights attend uniformly, so they have no preference
    assert abs(rep.value("head1")) < 1e-12
