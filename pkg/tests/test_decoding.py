import itertools
import math

import pytest
import torch

from abnet import model
from abnet.decoding import (
    DecodeConfig,
    DecodeState,
    ForwardCounter,
    beam_search,
    beam_search_decode,
    decode,
    greedy_decode,
    greedy_search,
    mask_predict_decode,
    predict_lengths,
    remask_count,
    stop_condition,
)
from abnet.errors import ConfigurationError, ContractError
from abnet.model import Partition
from abnet.tokenizer import MASK_ID, NUM_SPECIAL


def _state(length, iteration, total, tokens, previous=None):
    tokens = torch.tensor(tokens)
    return DecodeState(
        length=length,
        canvas=tokens.clone(),
        tokens=tokens,
        probs=torch.full((length,), 0.5),
        masked=torch.zeros(length, dtype=torch.bool),
        iteration=iteration,
        total_iterations=total,
        previous=None if previous is None else torch.tensor(previous),
    )


def _randomized(config, seed):
    params = model.assemble_abnet(config)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, tensor in params.items():
            if model.is_adapter_parameter(name):
                tensor.add_(0.5 * torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype))
    return params


def test_decode_config_validation():
    with pytest.raises(ConfigurationError):
        DecodeConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        DecodeConfig(length_beam=0)
    defaults = DecodeConfig()
    assert (defaults.iterations, defaults.length_beam, defaults.beam_width) == (10, 4, 5)


def test_predict_lengths():
    logits = torch.tensor([0.1, 3.0, 2.0, 3.0, -1.0])
    assert predict_lengths(logits, 1) == [2]
    assert predict_lengths(logits, 3) == [2, 4, 3]
    with pytest.raises(ConfigurationError):
        predict_lengths(logits, 6)


def test_remask_schedule_matches_linear_decay():
    assert [remask_count(10, 10, t) for t in range(1, 10)] == [9, 8, 7, 6, 5, 4, 3, 2, 1]
    assert remask_count(12, 10, 1) == 10
    assert remask_count(5, 10, 9) == 0
    for length in range(1, 51):
        counts = [remask_count(length, 10, t) for t in range(1, 10)]
        assert counts == [math.floor(length * (10 - t) / 10) for t in range(1, 10)]
        assert counts == sorted(counts, reverse=True)


def test_stop_condition():
    assert stop_condition(_state(3, 10, 10, [6, 7, 8]))
    assert stop_condition(_state(3, 2, 10, [6, 7, 8], previous=[6, 7, 8]))
    assert not stop_condition(_state(10, 2, 10, list(range(6, 16)), previous=[6] * 10))
    assert stop_condition(_state(5, 9, 10, [6, 7, 8, 9, 10], previous=[6, 6, 6, 6, 6]))


def test_single_iteration_is_one_pass(tiny_config):
    config = tiny_config()
    params = _randomized(config, 0)
    counter = ForwardCounter()
    result = mask_predict_decode([7, 8, 9], params, config, DecodeConfig(iterations=1, length_beam=2), counter)
    assert result.iterations == 1
    assert counter.count == 2


def test_forward_calls_bounded_by_beam_times_iterations(tiny_config):
    config = tiny_config()
    params = _randomized(config, 1)
    decode_config = DecodeConfig(iterations=4, length_beam=3)
    counter = ForwardCounter()
    result = mask_predict_decode([7, 8, 9, 10], params, config, decode_config, counter)
    assert counter.count <= 3 * 4
    assert 1 <= result.iterations <= 4
    assert len(result.tokens) == result.length
    assert all(t >= NUM_SPECIAL for t in result.tokens)


def test_persistence_across_iterations(tiny_config):
    config = tiny_config(max_target_length=8)
    for trial in range(100):
        params = _randomized(config, trial)
        generator = torch.Generator().manual_seed(1000 + trial)
        source = torch.randint(NUM_SPECIAL, config.src_vocab_size, (5,), generator=generator)
        trace = []
        mask_predict_decode(
            source.tolist(), params, config,
            DecodeConfig(iterations=10, length_beam=1), on_iteration=trace.append,
        )
        for before, after in zip(trace, trace[1:]):
            keep = ~after.masked
            assert torch.equal(after.tokens[keep], before.tokens[keep])
            assert torch.equal(after.probs[keep], before.probs[keep])
            assert torch.all(after.canvas[after.masked] == MASK_ID)
            assert torch.all((after.probs > 0) & (after.probs <= 1))


def test_remasks_lowest_probabilities(tiny_config):
    config = tiny_config()
    params = _randomized(config, 3)
    trace = []
    mask_predict_decode([7, 8, 9], params, config, DecodeConfig(iterations=10, length_beam=1),
                        on_iteration=trace.append)
    for before, after in zip(trace, trace[1:]):
        n = int(after.masked.sum())
        assert n == remask_count(after.length, 10, before.iteration)
        order = sorted(range(before.length), key=lambda i: (float(before.probs[i]), i))
        assert set(order[:n]) == set(torch.nonzero(after.masked).flatten().tolist())


def test_decoding_is_deterministic_and_thread_safe(tiny_config):
    config = tiny_config()
    params = _randomized(config, 4)
    serial = mask_predict_decode([7, 8, 9], params, config, DecodeConfig(length_beam=4))
    threaded = mask_predict_decode([7, 8, 9], params, config, DecodeConfig(length_beam=4, workers=4))
    assert serial == threaded


def test_parallel_decode_needs_length_head(tiny_config):
    config = tiny_config(decoder_kind="transformer-ar")
    params = model.assemble_abnet(config)
    with pytest.raises(ContractError):
        mask_predict_decode([7], params, config, DecodeConfig())
    with pytest.raises(ContractError):
        decode([7], params, config, DecodeConfig(mode="parallel"))


def test_ar_decode_needs_causal_decoder(tiny_config):
    config = tiny_config()
    params = model.assemble_abnet(config)
    with pytest.raises(ContractError):
        beam_search_decode([7], params, config)


def _toy_step_fn(vocab_size, eos):
    def step(prefixes):
        rows = []
        for prefix in prefixes:
            generator = torch.Generator().manual_seed(hash(tuple(prefix)) % (2 ** 31))
            rows.append(torch.log_softmax(torch.randn(vocab_size, generator=generator, dtype=torch.float64), 0))
        return torch.stack(rows)

    return step


def test_wide_beam_equals_exhaustive_search():
    vocab_size, bos, eos, max_len = 3, 3, 2, 3
    step = _toy_step_fn(vocab_size, eos)
    best, best_score = None, -math.inf
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab_size), repeat=length):
            if eos in seq[:-1] or seq[-1] != eos:
                continue
            prefix, score = [bos], 0.0
            for token in seq:
                score += float(step([prefix])[0][token])
                prefix.append(token)
            if score / length > best_score:
                best, best_score = list(seq[:-1]), score / length
    result = beam_search(step, bos, eos, width=27, max_len=max_len)
    if best is None:
        assert result.truncated
    else:
        assert not result.truncated
        assert result.tokens == best
        assert result.score == pytest.approx(best_score)


def test_width_one_equals_greedy():
    step = _toy_step_fn(5, 4)
    for bos in range(5, 30):
        beam = beam_search(step, bos, 4, width=1, max_len=6)
        greedy = greedy_search(step, bos, 4, max_len=6)
        assert beam.tokens == greedy.tokens
        assert beam.truncated == greedy.truncated


@pytest.mark.parametrize(
    "overrides", [{"decoder_kind": "transformer-ar"}, {"decoder_mask": "causal"}]
)
def test_model_beam_one_matches_greedy(tiny_config, overrides):
    config = tiny_config(**overrides)
    params = model.assemble_abnet(config)
    generator = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for name, tensor in params.items():
            tensor.add_(0.3 * torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype))
    counter = ForwardCounter()
    greedy = greedy_decode([7, 8, 9], params, config, counter)
    steps = counter.reset()
    beam = beam_search_decode([7, 8, 9], params, config, width=1)
    assert beam.tokens == greedy.tokens
    expected = config.max_target_length if greedy.truncated else len(greedy.tokens) + 1
    assert steps == expected
    assert all(t >= NUM_SPECIAL for t in greedy.tokens)
