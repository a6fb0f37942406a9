import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from coopetition.data import (
    EVALUATORS,
    EvalKind,
    LABEL_POS,
    build_class_bank,
    embed_tokens,
    export_csv,
    force_label_position,
    label_positions,
    sample_batch,
    sample_sequence,
    scoring_answer,
)

ALL_KINDS = list(EvalKind)


@pytest.fixture(scope="module")
def big_bank():
    return build_class_bank(200, 6, d_in=8, sigma=0.1, seed=3)


def test_bank_shapes_and_unit_prototypes():
    b = build_class_bank(50, 4, d_in=8, seed=1)
    assert b.vectors.shape == (50, 4, 8) and b.prototypes.shape == (50, 8)
    np.testing.assert_allclose(np.linalg.norm(b.prototypes, axis=1), 1.0, atol=1e-6)
    assert (b.label_map == np.arange(50)).all()


def test_bank_default_sizes():
    b = build_class_bank(12800, 20, seed=0)
    assert b.vectors.shape == (12800, 20, 64)


def test_bank_zero_noise_equals_prototype():
    b = build_class_bank(10, 3, d_in=5, sigma=0.0, seed=2, dtype=np.float64)
    for e in range(3):
        np.testing.assert_array_equal(b.vectors[:, e], b.prototypes)


def test_bank_determinism_and_seed_dependence():
    a, b = build_class_bank(20, 2, 8, seed=5), build_class_bank(20, 2, 8, seed=5)
    c = build_class_bank(20, 2, 8, seed=6)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    assert not np.allclose(a.prototypes @ a.prototypes.T, c.prototypes @ c.prototypes.T)


@pytest.mark.parametrize("C,E", [(1, 3), (0, 3), (5, 0)])
def test_bank_rejects_bad_sizes(C, E):
    with pytest.raises(ValueError):
        build_class_bank(C, E)


def test_bank_norm_bound():
    sigma, d = 0.1, 64
    b = build_class_bank(500, 20, d, sigma, seed=0, dtype=np.float64)
    norms = np.linalg.norm(b.vectors, axis=-1)
    assert (np.abs(norms - 1) <= 3 * sigma * np.sqrt(d)).all()


# ----------------------------------------------------------- constructive kinds


def test_bursty_query_class_matches_exactly_one(big_bank, rng):
    b = sample_batch(EvalKind.BURSTY, big_bank, rng, 10_000)
    hits = (b.classes[:, :2] == b.classes[:, 2:]).sum(1)
    assert (hits == 1).all()
    assert (b.classes[:, 0] != b.classes[:, 1]).all()


def test_bursty_query_exemplar_differs(big_bank, rng):
    b = sample_batch(EvalKind.BURSTY, big_bank, rng, 5000)
    slot = np.argmax(b.classes[:, :2] == b.classes[:, 2:], axis=1)
    assert (b.exemplars[np.arange(5000), slot] != b.exemplars[:, 2]).all()


def test_matched_query_vector_bit_identical(big_bank, rng):
    b = sample_batch(EvalKind.MATCHED_BURSTY, big_bank, rng, 2000)
    vec, _ = embed_tokens(big_bank, b)
    slot = np.argmax(b.classes[:, :2] == b.classes[:, 2:], axis=1)
    np.testing.assert_array_equal(vec[np.arange(2000), slot], vec[:, 2])


def test_eval_icl_labels_are_zero_one(big_bank, rng):
    b = sample_batch(EvalKind.EVAL_ICL, big_bank, rng, 10_000)
    assert (np.sort(b.labels, 1) == [0, 1]).all()
    assert np.isin(b.answer_icl, [0, 1]).all()


def test_eval_flip_disagrees(big_bank, rng):
    b = sample_batch(EvalKind.EVAL_FLIP, big_bank, rng, 10_000)
    assert (b.answer_icl != b.answer_ciwl).all()
    assert (b.answer_ciwl == big_bank.label_map[b.classes[:, 2]]).all()
    # the query's trained label sits on the other context exemplar
    assert (b.labels == big_bank.label_map[b.classes[:, ::-1][:, 1:]]).all()


def test_flip_worked_example():
    bank = build_class_bank(30, 2, 4, seed=0)
    rng = np.random.default_rng(9)
    for _ in range(50):
        s = sample_sequence(EvalKind.EVAL_FLIP, bank, rng)
        x, y = s.classes[0], s.classes[1]
        assert s.labels == (y, x)  # identity label map: X shows Y's label and vice versa
        assert s.answer_ciwl == s.classes[2] and s.answer_icl != s.answer_ciwl


def test_ciwl_label_placement(big_bank, rng):
    b = sample_batch(EvalKind.EVAL_CIWL, big_bank, rng, 10_000)
    q = b.classes[:, 2]
    assert not (b.classes[:, :2] == q[:, None]).any()
    assert ((b.labels == big_bank.label_map[q][:, None]).sum(1) == 1).all()
    assert (b.answer_ciwl == big_bank.label_map[q]).all()


def test_iwl_label_absent(big_bank, rng):
    b = sample_batch(EvalKind.EVAL_IWL, big_bank, rng, 10_000)
    q = b.classes[:, 2]
    assert not (b.classes[:, :2] == q[:, None]).any()
    assert not (b.labels == big_bank.label_map[q][:, None]).any()


def test_icl_only_labels_carry_no_trained_signal(big_bank, rng):
    b = sample_batch(EvalKind.ICL_ONLY, big_bank, rng, 10_000)
    matches = (b.labels == big_bank.label_map[b.classes[:, :2]]).sum()
    trials = b.labels.size
    p = stats.binomtest(int(matches), trials, 1 / big_bank.num_classes).pvalue
    assert p > 1e-3
    assert (b.answer_ciwl == -1).all()


def test_three_class_kinds_need_three(rng):
    bank = build_class_bank(2, 2, 4, seed=0)
    for kind in (EvalKind.EVAL_CIWL, EvalKind.EVAL_IWL, EvalKind.CIWL_ONLY):
        with pytest.raises(ValueError):
            sample_batch(kind, bank, rng, 4)
    sample_batch(EvalKind.BURSTY, bank, rng, 4)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_sampling_reproducible(kind, big_bank):
    a = sample_batch(kind, big_bank, np.random.default_rng(11), 300)
    b = sample_batch(kind, big_bank, np.random.default_rng(11), 300)
    for f in ("classes", "exemplars", "labels", "answer_icl", "answer_ciwl", "answer_train"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_sequence_shape_and_kind(kind, big_bank, rng):
    s = sample_sequence(kind, big_bank, rng)
    assert s.kind is kind and len(s.tokens) == 5
    assert s.context_labels == set(s.labels)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([k for k in EvalKind if k not in (EvalKind.EVAL_IWL, EvalKind.ICL_ONLY)]),
       st.integers(0, 2**31), st.sampled_from(LABEL_POS))
def test_force_label_position(kind, seed, pos):
    bank = build_class_bank(40, 3, 4, seed=1)
    b = sample_batch(kind, bank, np.random.default_rng(seed), 50)
    ans = scoring_answer(b)
    f = force_label_position(b, ans, pos)
    cp, op = label_positions(f, ans)
    assert (cp == pos).all() and (op == 4 - pos).all()
    # swapping pairs keeps each (exemplar, label) pair intact
    pairs = lambda x: sorted(zip(x.classes[:, :2].ravel(), x.labels.ravel()))
    assert pairs(f) == pairs(b)


def test_embed_rejects_dangling(big_bank, rng):
    b = sample_batch(EvalKind.BURSTY, big_bank, rng, 3)
    b.classes[0, 0] = big_bank.num_classes
    with pytest.raises(IndexError):
        embed_tokens(big_bank, b)


def test_export_csv(tmp_path, big_bank, rng):
    b = sample_batch(EvalKind.EVAL_FLIP, big_bank, rng, 4)
    export_csv(b, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("EVAL_FLIP")


def test_scoring_keys():
    bank = build_class_bank(20, 2, 4, seed=0)
    r = np.random.default_rng(0)
    for k in EVALUATORS:
        b = sample_batch(k, bank, r, 10)
        exp = {EvalKind.EVAL_ICL: b.answer_icl, EvalKind.EVAL_FLIP: b.answer_icl,
               EvalKind.EVAL_CIWL: b.answer_ciwl, EvalKind.EVAL_IWL: b.answer_train}[k]
        np.testing.assert_array_equal(scoring_answer(b), exp)
