import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mannflow.counters import OpCounters
from mannflow.errors import (
    CapacityError,
    ContractError,
    EmptyMemoryError,
    InvalidInputError,
    ModelFormatError,
)
from mannflow.model import (
    Dimensions,
    ModelWeights,
    address,
    bag_of_words,
    controller_step,
    embed_sentence,
    exact_argmax,
    oracle_infer,
    output_logits,
    read_key,
    read_vector,
)

from .conftest import random_model, random_story

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def linear_scan(z):
    best, best_i = -math.inf, None
    for i, v in enumerate(z):
        if best_i is None or v > best:
            best, best_i = v, i
    return best_i


# -- Dimensions / ModelWeights ---------------------------------------------------


def test_dimensions_reject_nonpositive():
    with pytest.raises(InvalidInputError):
        Dimensions(0, 1, 1, 1, 1)
    with pytest.raises(InvalidInputError):
        Dimensions(3, 2, 1, 1, hops=0)
    # answer classes may outnumber the vocabulary
    assert Dimensions(2, 2, 10, 1, 1).output_dim == 10


def test_weights_validate_shape_and_finiteness():
    d = Dimensions(4, 3, 2, 2, 1)
    m = ModelWeights.zeros(d)
    with pytest.raises(InvalidInputError):
        m.replace(W_o=np.zeros((3, 3)))
    bad = np.zeros((2, 3))
    bad[0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        m.replace(W_o=bad)
    assert not m.W_o.flags.writeable


def test_shared_embeddings_alias():
    m = ModelWeights.random(Dimensions(5, 3, 2, 2, 1), np.random.default_rng(0), shared_embeddings=True)
    assert m.W_emb_c is m.W_emb_a
    assert "W_emb_c" not in m.arrays()


@pytest.mark.parametrize("shared", [False, True])
def test_model_file_round_trip(tmp_path, shared):
    m = random_model(np.random.default_rng(5), shared=shared)
    path = tmp_path / "m.mann"
    m.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"MANN"
    assert ModelWeights.load(path).equals(m)


def test_model_file_rejects_corruption():
    m = random_model(np.random.default_rng(6))
    raw = m.to_bytes()
    with pytest.raises(ModelFormatError, match="bytes"):
        ModelWeights.from_bytes(raw[:-8])
    with pytest.raises(ModelFormatError, match="magic"):
        ModelWeights.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFormatError, match="version"):
        ModelWeights.from_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ModelFormatError):
        ModelWeights.from_bytes(raw[:10])


# -- embed_sentence ---------------------------------------------------------------


def test_embed_single_word_is_column():
    W = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(embed_sentence(W, [3]), W[:, 3])


def test_embed_two_words_sum():
    W = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]) + np.arange(8.0).reshape(2, 4)
    assert np.array_equal(embed_sentence(W, [0, 2]), W[:, 0] + W[:, 2])


def test_embed_matches_dense_with_multiplicity():
    W = np.random.default_rng(42).normal(size=(4, 10))
    s = [1, 1, 7]
    c = OpCounters()
    np.testing.assert_allclose(embed_sentence(W, s, c), W @ bag_of_words(s, 10), rtol=0, atol=1e-12)
    assert c.weight_column_reads == 3
    assert c.multiplications == 0


def test_embed_rejects_bad_index():
    with pytest.raises(InvalidInputError, match="7"):
        embed_sentence(np.zeros((2, 5)), [1, 7])


def test_sparse_dense_equivalence_many_seeds():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        E, V = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        W = rng.normal(size=(E, V))
        s = rng.integers(0, V, size=int(rng.integers(1, 12))).tolist()
        np.testing.assert_allclose(embed_sentence(W, s), W @ bag_of_words(s, V), rtol=0, atol=1e-9)


# -- address / read ---------------------------------------------------------------


def test_address_identical_rows_uniform():
    M = np.tile([0.3, -1.2, 2.0], (5, 1))
    np.testing.assert_allclose(address(M, np.array([1.0, 2.0, 3.0]), 4), np.full(4, 0.25))


def test_address_orthonormal_direct_formula():
    M = np.array([[1.0, 0.0], [0.0, 1.0]])
    a = address(M, np.array([10.0, 0.0]), 2)
    expected = [math.exp(10) / (math.exp(10) + math.exp(0)), math.exp(0) / (math.exp(10) + math.exp(0))]
    np.testing.assert_allclose(a, expected, rtol=0, atol=1e-15)


def test_address_single_slot_and_empty():
    assert address(np.ones((3, 2)), np.array([5.0, -4.0]), 1).tolist() == [1.0]
    with pytest.raises(EmptyMemoryError):
        address(np.ones((3, 2)), np.ones(2), 0)


def test_address_does_not_overflow():
    M = np.array([[1000.0], [999.0]])
    a = address(M, np.array([1.0]), 2)
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(a[0] / a[1], math.e)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=1, max_size=16), finite)
def test_address_normalized_and_shift_invariant(scores, c):
    # rows chosen so that M_a[i] . k reproduces the drawn scores, then shifted by c
    n = len(scores)
    M = np.array([[s, 1.0] for s in scores])
    a = address(M, np.array([1.0, 0.0]), n)
    assert abs(a.sum() - 1.0) <= 1e-9
    shifted = address(M, np.array([1.0, c]), n)
    np.testing.assert_allclose(shifted, a, rtol=0, atol=1e-9)


def test_read_vector_selection_and_symmetry():
    M = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(read_vector(M, [0, 0, 1.0, 0], 4), M[2])
    same = np.array([[1.0, 2.0], [1.0, 2.0]])
    np.testing.assert_allclose(read_vector(same, [0.5, 0.5], 2), [1.0, 2.0])
    with pytest.raises(InvalidInputError):
        read_vector(M, [0.5, 0.5], 3)


def test_read_vector_dense_oracle():
    rng = np.random.default_rng(7)
    M = rng.normal(size=(6, 4))
    a = rng.dirichlet(np.ones(5))
    expected = [sum(a[i] * M[i, j] for i in range(5)) for j in range(4)]
    np.testing.assert_allclose(read_vector(M, a, 5), expected, rtol=0, atol=1e-12)


# -- read key / controller / output -----------------------------------------------


def test_read_key_cases():
    W = np.arange(15.0).reshape(3, 5)
    assert np.array_equal(read_key(1, W, q=[2]), W[:, 2])
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(read_key(2, h_prev=v), v)
    assert np.array_equal(read_key(3, h_prev=v), v)
    with pytest.raises(ContractError):
        read_key(1, W)
    with pytest.raises(ContractError):
        read_key(2, W, q=[1])
    with pytest.raises(ContractError):
        read_key(0, W, q=[1])


def test_controller_step():
    r = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(controller_step(r, np.ones(3), np.zeros((3, 3))), r)
    assert np.array_equal(controller_step(r, np.zeros(3), np.eye(3)), r)
    rng = np.random.default_rng(11)
    W, rr, k = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3)
    hand = [rr[i] + sum(W[i, j] * k[j] for j in range(3)) for i in range(3)]
    np.testing.assert_allclose(controller_step(rr, k, W), hand, rtol=0, atol=1e-12)
    with pytest.raises(InvalidInputError):
        controller_step(rr, np.ones(2), W)


def test_output_logits():
    W = np.vstack([np.eye(3), np.zeros((2, 3))])
    assert np.array_equal(output_logits(np.array([1.0, 0, 0]), W), W[:, 0])
    assert np.array_equal(output_logits(np.zeros(3), W), np.zeros(5))
    rng = np.random.default_rng(3)
    W, h = rng.normal(size=(5, 3)), rng.normal(size=3)
    hand = [sum(W[i, j] * h[j] for j in range(3)) for i in range(5)]
    np.testing.assert_allclose(output_logits(h, W), hand, rtol=0, atol=1e-12)
    with pytest.raises(InvalidInputError):
        output_logits(np.ones(4), W)


# -- argmax -----------------------------------------------------------------------


def test_argmax_examples():
    c = OpCounters()
    assert exact_argmax([1, 3, 3], c) == 1
    assert c.logit_comparisons == 2
    assert exact_argmax([5]) == 0
    z = np.random.default_rng(100).normal(size=100)
    assert exact_argmax(z) == linear_scan(z)


@given(st.lists(finite, min_size=1, max_size=40))
def test_argmax_matches_scan(z):
    assert exact_argmax(z) == linear_scan(z)


# integers keep the shift exact, so ties survive it
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=40), st.integers(-10**6, 10**6))
def test_argmax_shift_invariant(z, c):
    assert exact_argmax([v + c for v in z]) == exact_argmax(z)


# -- oracle_infer -----------------------------------------------------------------


def test_oracle_zero_weights_labels_zero():
    m = ModelWeights.zeros(Dimensions(4, 3, 5, 2, 1))
    label, z = oracle_infer(m, [(1, 2)], (3,))
    assert label == 0
    assert np.array_equal(z, np.zeros(5))


def test_oracle_planted_fact(small_planted):
    ds, model = small_planted
    v = ds.vocab
    story = [v.encode(["e4", "at", "loc5"]), v.encode(["e1", "at", "loc2"])]
    label, _ = oracle_infer(model, story, v.encode(["where", "e4"]))
    assert v.answers[label] == "loc5"


def test_oracle_capacity_error():
    m = ModelWeights.zeros(Dimensions(4, 3, 5, 2, 1))
    with pytest.raises(CapacityError):
        oracle_infer(m, [(1,), (2,), (3,)], (0,))


def test_oracle_deterministic():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m = random_model(rng)
        story, q = random_story(rng, m)
        a = oracle_infer(m, story, q)
        b = oracle_infer(m, story, q)
        assert a[0] == b[0]
        assert a[1].tobytes() == b[1].tobytes()
