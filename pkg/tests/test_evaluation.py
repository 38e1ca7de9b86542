import math
import random

import pytest

from abnet import model
from abnet.decoding import DecodeResult, ForwardCounter
from abnet.errors import DataError
from abnet.evaluation import (
    RECORD_FIELDS,
    EvalReport,
    LatencyReport,
    build_report,
    corpus_bleu,
    exact_match,
    measure_latency,
    parameter_audit,
    render_audit,
)
from abnet.training import apply_partition


def test_bleu_identity_is_100():
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
    assert corpus_bleu(refs, refs).bleu == pytest.approx(100.0, abs=0.01)


def test_bleu_disjoint_is_zero():
    score = corpus_bleu([["p", "q", "r", "s"]], [["a", "b", "c", "d"]])
    assert score.bleu == pytest.approx(0.0, abs=0.01)
    assert score.precisions[0] == 0.0


def test_bleu_clips_repeated_unigrams():
    score = corpus_bleu([["the", "the", "the", "the"]], [["the", "cat"]])
    assert score.precisions[0] == pytest.approx(0.25)
    assert score.bleu == 0.0


def test_bleu_brevity_penalty():
    hyp = [["a", "b", "c", "d"]]
    ref = [["a", "b", "c", "d", "e", "f", "g", "h"]]
    score = corpus_bleu(hyp, ref)
    assert score.brevity_penalty == pytest.approx(0.36787944, rel=1e-6)
    assert score.bleu == pytest.approx(100 * 0.36787944, rel=1e-6)


def test_bleu_empty_hypotheses_keep_penalty_in_range():
    score = corpus_bleu([[], []], [["a", "b"], ["c"]])
    assert score.bleu == 0.0
    assert score.hypothesis_length == 0
    assert 0.0 < score.brevity_penalty <= 1.0
    assert score.brevity_penalty == pytest.approx(math.exp(1 - 3))
    long_refs = [["a"] * 2000]
    assert 0.0 < corpus_bleu([[]], long_refs).brevity_penalty <= 1.0


def test_bleu_is_order_invariant():
    rng = random.Random(0)
    refs = [[rng.choice("abcde") for _ in range(rng.randint(4, 9))] for _ in range(30)]
    hyps = [r[:-1] + ["a"] if i % 3 else r for i, r in enumerate(refs)]
    order = list(range(30))
    rng.shuffle(order)
    shuffled = corpus_bleu([hyps[i] for i in order], [refs[i] for i in order])
    assert shuffled.bleu == pytest.approx(corpus_bleu(hyps, refs).bleu)


def test_bleu_empty_corpus():
    with pytest.raises(DataError):
        corpus_bleu([], [])


def test_exact_match():
    assert exact_match([[1, 2], [3]], [[1, 2], [4]]) == 0.5


def test_measure_latency_counts_forwards():
    counter = ForwardCounter()

    def decode_fn(source):
        counter.increment(len(source))
        return DecodeResult(list(source), 0.0, iterations=2, length=len(source))

    report, results = measure_latency(decode_fn, [[1, 2], [3, 4, 5, 6]], counter)
    assert report.sentences == 2
    assert report.forward_calls_per_sentence == 3.0
    assert report.mean_iterations == 2.0
    assert report.mean_output_length == 3.0
    assert [r.tokens for r in results] == [[1, 2], [3, 4, 5, 6]]


def test_measure_latency_empty():
    with pytest.raises(DataError):
        measure_latency(lambda s: s, [])


def test_audit_full_finetune_has_no_frozen(tiny_config):
    params = model.assemble_abnet(tiny_config())
    apply_partition(params, "finetune-full")
    audit = parameter_audit(params)
    assert audit.frozen == 0
    assert audit.ratio == 1.0


def test_audit_groups_add_up(tiny_config):
    params = model.assemble_abnet(tiny_config())
    apply_partition(params, "finetune-adapters")
    audit = parameter_audit(params)
    assert audit.total == sum(t.numel() for _, t in params.items())
    assert sum(t for t, _ in audit.groups.values()) == audit.trainable
    assert audit.groups["encoder.layers"][0] == 0
    assert audit.groups["encoder.adapters"][1] == 0
    assert audit.encoder_trainable == sum(
        t.numel() for n, t in params.trainable() if n.startswith("encoder.")
    )
    assert "trainable ratio" in render_audit(audit)


def test_default_desk_config_ratio_is_below_quarter():
    # 24 source/target symbols: 6 specials + 10 characters + 24 syllables
    config = model.ModelConfig(src_vocab_size=40, tgt_vocab_size=40)
    params = model.assemble_abnet(config)
    apply_partition(params, "finetune-adapters")
    assert parameter_audit(params).ratio < 0.25


def test_report_record_and_render():
    latency = LatencyReport(1.5, 2, 3.0, 2.0, 6.0)
    report = build_report([[1, 2, 3, 4]], [[1, 2, 3, 4]], latency, mode="parallel")
    fields = report.to_record().split("\t")
    assert len(fields) == len(RECORD_FIELDS)
    assert EvalReport.record_header().split("\t") == list(RECORD_FIELDS)
    assert float(fields[0]) == pytest.approx(100.0)
    assert "parallel" in report.render()
