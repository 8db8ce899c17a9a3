import numpy as np
import pytest

from mannflow.counters import OpCounters
from mannflow.engine import (
    Kind,
    Pipeline,
    PipelineConfig,
    StreamToken,
    engine_infer,
    output_stage,
    reset,
    story_stream,
    write_stage,
)
from mannflow.errors import CapacityError, InvalidInputError, ProtocolError
from mannflow.model import Dimensions, MemoryState, ModelWeights, embed_sentence, oracle_infer
from mannflow.thresholding import ThresholdTable

from .conftest import random_model, random_story

SCHEDULERS = ["threads", "sequential"]


@pytest.mark.parametrize("scheduler", SCHEDULERS)
def test_matches_oracle_on_random_models(scheduler):
    rng = np.random.default_rng(21)
    for _ in range(40):
        m = random_model(rng)
        story, q = random_story(rng, m)
        label, z = oracle_infer(m, story, q)
        res = engine_infer(m, story, q, PipelineConfig(queue_capacity=2, scheduler=scheduler))
        assert res.label == label
        np.testing.assert_allclose(res.logits, z, rtol=0, atol=1e-9)
        assert res.dot_products == m.dims.output_dim


def test_zero_weights_closed_form_counts():
    E, I, T = 3, 5, 2
    m = ModelWeights.zeros(Dimensions(6, E, I, 4, T))
    res = engine_infer(m, [(1, 2, 3)], (4,), PipelineConfig(scheduler="sequential"))
    assert res.label == 0
    used = 1
    mem = res.by_unit["mem"]
    assert mem.multiplications == T * (E * used + E * used)
    assert mem.exp_evaluations == T * used
    assert mem.divisions == T * used
    assert res.by_unit["read"].multiplications == T * E * E
    assert res.by_unit["output"].multiplications == I * E
    assert res.by_unit["output"].logit_comparisons == I - 1
    assert res.by_unit["input"].weight_column_reads == 3 + 1
    assert res.by_unit["input"].multiplications == 0


def test_queue_capacity_does_not_change_results():
    rng = np.random.default_rng(4)
    m = random_model(rng, L=6)
    samples = [random_story(rng, m) for _ in range(10)]
    outs = []
    for cap in (1, 4, 64):
        for sched in SCHEDULERS:
            pipe = Pipeline(m, PipelineConfig(queue_capacity=cap, scheduler=sched))
            answers = pipe.run(story_stream(samples))
            outs.append(([a.label for a in answers], [a.logits.tobytes() for a in answers], pipe.counters()))
    for other in outs[1:]:
        assert other == outs[0]


def test_every_question_answered_in_order():
    rng = np.random.default_rng(8)
    m = random_model(rng, L=5)
    story, _ = random_story(rng, m, n_sentences=3)
    questions = [random_story(rng, m)[1] for _ in range(4)]
    tokens = [StreamToken(Kind.FLUSH)] + [StreamToken(Kind.STORY_SENTENCE, s) for s in story]
    tokens += [StreamToken(Kind.QUESTION, q) for q in questions]
    answers = Pipeline(m).run(tokens)
    assert [a.query_id for a in answers] == [0, 1, 2, 3]
    assert [a.label for a in answers] == [oracle_infer(m, story, q)[0] for q in questions]


def test_question_before_story_is_protocol_error():
    m = ModelWeights.zeros(Dimensions(4, 2, 2, 2, 1))
    for sched in SCHEDULERS:
        with pytest.raises(ProtocolError):
            Pipeline(m, PipelineConfig(scheduler=sched)).run(
                [StreamToken(Kind.FLUSH), StreamToken(Kind.QUESTION, (1,))])


@pytest.mark.parametrize("scheduler", SCHEDULERS)
def test_story_overflow_is_capacity_error(scheduler):
    m = ModelWeights.zeros(Dimensions(4, 2, 2, 2, 1))
    with pytest.raises(CapacityError):
        engine_infer(m, [(1,), (2,), (3,)], (0,), PipelineConfig(scheduler=scheduler))
    tokens = [StreamToken(Kind.STORY_SENTENCE, (i,)) for i in range(3)] + [StreamToken(Kind.QUESTION, (0,))]
    with pytest.raises(CapacityError):
        Pipeline(m, PipelineConfig(scheduler=scheduler, queue_capacity=1)).run(tokens)


def test_invalid_word_index_rejected():
    m = ModelWeights.zeros(Dimensions(4, 2, 2, 2, 1))
    with pytest.raises(InvalidInputError):
        engine_infer(m, [(9,)], (0,))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        PipelineConfig(queue_capacity=0)
    with pytest.raises(InvalidInputError):
        PipelineConfig(scheduler="magic")


# -- write stage / reset ------------------------------------------------------------


def test_write_stage_rows_in_arrival_order():
    rng = np.random.default_rng(2)
    m = random_model(rng, V=10, E=4, L=3, shared=False)
    mem = MemoryState.empty(3, 4)
    write_stage((1, 2), mem, m)
    assert mem.used_slots == 1
    assert np.any(mem.M_a[0] != 0)
    write_stage((5,), mem, m)
    assert mem.used_slots == 2
    np.testing.assert_array_equal(mem.M_a[0], embed_sentence(m.W_emb_a, (1, 2)))
    np.testing.assert_array_equal(mem.M_c[0], embed_sentence(m.W_emb_c, (1, 2)))
    np.testing.assert_array_equal(mem.M_a[1], embed_sentence(m.W_emb_a, (5,)))
    np.testing.assert_array_equal(mem.M_c[1], embed_sentence(m.W_emb_c, (5,)))
    assert not np.any(mem.M_a[2])
    write_stage((0,), mem, m)
    with pytest.raises(CapacityError):
        write_stage((0,), mem, m)


def test_reset_idempotent_and_isolating():
    rng = np.random.default_rng(13)
    m = random_model(rng, L=4)
    mem = MemoryState.empty(4, m.dims.embed_dim)
    write_stage((0,), mem, m)
    reset(mem)
    assert mem.used_slots == 0 and not mem.M_a.any() and not mem.M_c.any()
    reset(mem)
    assert mem.used_slots == 0

    a = random_story(rng, m)
    b = random_story(rng, m)
    alone = Pipeline(m).run(story_stream([b]))[0]
    both = Pipeline(m).run(story_stream([a, b]))[1]
    assert both.label == alone.label
    assert both.logits.tobytes() == alone.logits.tobytes()


# -- output stage -------------------------------------------------------------------


def test_output_stage_full_scan():
    rng = np.random.default_rng(17)
    m = random_model(rng, I=7, E=3)
    h = rng.normal(size=3)
    c = OpCounters()
    label, used = output_stage(h, m, None, c)
    assert used == 7
    assert c.logit_comparisons == 6
    assert label == int(np.argmax(m.W_o @ h))


def test_output_stage_infinite_thresholds_equal_full_scan():
    rng = np.random.default_rng(18)
    m = random_model(rng, I=9, E=4)
    table = ThresholdTable.disabled(9).with_order(rng.permutation(9))
    for _ in range(50):
        h = rng.normal(size=4)
        assert output_stage(h, m, table) == output_stage(h, m)


def test_output_stage_planted_table_exits_early():
    # class 2 is large only on the sample below; table accepts it once z_2 > 1
    W_o = np.eye(4)
    m = ModelWeights.zeros(Dimensions(2, 4, 4, 1, 1)).replace(W_o=W_o)
    table = ThresholdTable([np.inf, np.inf, 1.0, np.inf], (2, 0, 1, 3), 1.0, [0, 0, 1, 0])
    h = np.array([0.1, 0.2, 5.0, 0.3])
    label, used = output_stage(h, m, table)
    assert (label, used) == (2, 1)
    assert label == output_stage(h, m)[0]


def test_engine_with_thresholding_counts_dot_products():
    W_o = np.eye(4)
    m = ModelWeights.zeros(Dimensions(3, 4, 4, 2, 1)).replace(
        W_o=W_o, W_emb_c=np.array([[0, 0, 0], [0, 0, 0], [3.0, 0, 0], [0, 0, 0]]))
    table = ThresholdTable([np.inf, np.inf, 1.0, np.inf], (2, 0, 1, 3), 1.0, [0, 0, 1, 0])
    res = engine_infer(m, [(0,)], (1,), PipelineConfig(thresholding=table))
    assert res.label == 2
    assert res.dot_products == 1
    assert res.logits is None
    assert res.by_unit["output"].multiplications == 4
