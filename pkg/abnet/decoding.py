"""
Decoding module for abnet.

Mask-Predict parallel decoding with a length beam and linear-decay
re-masking, plus beam search and greedy search for the autoregressive
variants. Every decoder forward pass can be tallied on a ForwardCounter.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from abnet import model as abmodel
from abnet import numerics
from abnet.errors import ConfigurationError, ContractError, DataError
from abnet.model import ModelConfig, ParameterStore
from abnet.tokenizer import BOS_ID, EOS_ID, LENGTH_ID, MASK_ID, NUM_SPECIAL
from abnet.utils import map_concurrently

logger = logging.getLogger(__name__)

DECODE_MODES = ("auto", "parallel", "ar")

# Log-prob step function: list of equal-length prefixes -> (n, V) log-probs.
StepFn = Callable[[List[List[int]]], torch.Tensor]


@dataclass
class DecodeConfig:
    """
    Attributes:
        iterations: Upper bound T on Mask-Predict prediction passes.
        length_beam: Number B of candidate lengths.
        beam_width: Beam width for autoregressive decoding.
        mode: "parallel", "ar", or "auto" (follow the model config).
        workers: Threads used for the B length candidates.
    """

    iterations: int = 10
    length_beam: int = 4
    beam_width: int = 5
    mode: str = "auto"
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations (T) must be at least 1")
        if self.length_beam < 1:
            raise ConfigurationError("length_beam (B) must be at least 1")
        if self.beam_width < 1:
            raise ConfigurationError("beam_width must be at least 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        if self.mode not in DECODE_MODES:
            raise ConfigurationError(f"decode mode must be one of {DECODE_MODES}")


@dataclass
class DecodeState:
    """
    One Mask-Predict candidate after a prediction pass.

    `canvas` is the decoder input of that pass ([MASK] at `masked`),
    `tokens`/`probs` the resulting placed tokens and their stored
    probabilities, `iteration` the number of passes done so far and
    `previous` the placed tokens before this pass.
    """

    length: int
    canvas: torch.Tensor
    tokens: torch.Tensor
    probs: torch.Tensor
    masked: torch.Tensor
    iteration: int
    total_iterations: int
    previous: Optional[torch.Tensor] = None

    @property
    def score(self) -> float:
        return float(torch.log(self.probs).sum()) / self.length


@dataclass
class DecodeResult:
    tokens: List[int]
    score: float
    iterations: int
    length: int
    truncated: bool = False


class ForwardCounter:
    """Thread-safe tally of decoder forward passes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self.count += n

    def reset(self) -> int:
        with self._lock:
            count, self.count = self.count, 0
        return count


def predict_lengths(length_logits: torch.Tensor, beam: int) -> List[int]:
    """
    The `beam` highest-scoring target lengths, best first.

    Class i stands for length i+1; equal logits favour the shorter length.
    """
    values = [float(v) for v in length_logits.reshape(-1)]
    if beam > len(values):
        raise ConfigurationError(
            f"length beam {beam} exceeds the {len(values)} length classes"
        )
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return [i + 1 for i in order[:beam]]


def remask_count(length: int, total: int, t: int) -> int:
    """floor(length * (total - t) / total), integer arithmetic."""
    return length * (total - t) // total


def stop_condition(state: DecodeState) -> bool:
    """Stop at T passes, on an unchanged canvas, or when nothing would be re-masked."""
    t, total = state.iteration, state.total_iterations
    if t >= total:
        return True
    if state.previous is not None and torch.equal(state.previous, state.tokens):
        return True
    return remask_count(state.length, total, t) == 0


def resolve_mode(config: ModelConfig, decode_config: DecodeConfig) -> str:
    mode = decode_config.mode
    if mode == "auto":
        return "parallel" if config.parallel else "ar"
    if mode == "parallel" and not config.parallel:
        raise ContractError("parallel decoding needs a model with a length head")
    if mode == "ar" and config.decoder_kind == "adapter-bert" and config.decoder_mask != "causal":
        raise ContractError("autoregressive decoding needs a causal or transformer-ar decoder")
    return mode


def _source_tensor(src_ids: Sequence[int]) -> torch.Tensor:
    if len(src_ids) == 0:
        raise DataError("cannot decode an empty source")
    return torch.as_tensor([LENGTH_ID] + [int(i) for i in src_ids], dtype=torch.long)


def _place_tokens(logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Argmax over ordinary tokens and the softmax probability of each choice."""
    probs = numerics.softmax(logits, axis=-1)
    tokens = probs[:, NUM_SPECIAL:].argmax(dim=-1) + NUM_SPECIAL
    return tokens, probs.gather(1, tokens.unsqueeze(1)).squeeze(1)


def _refine_candidate(
    length: int,
    enc_out: torch.Tensor,
    params: ParameterStore,
    config: ModelConfig,
    total: int,
    counter: Optional[ForwardCounter],
    on_iteration: Optional[Callable[[DecodeState], None]],
) -> DecodeState:
    def predict(canvas):
        if counter is not None:
            counter.increment()
        return _place_tokens(abmodel.decoder_forward(canvas, enc_out, params, config))

    canvas = torch.full((length,), MASK_ID, dtype=torch.long)
    tokens, probs = predict(canvas)
    state = DecodeState(length, canvas, tokens, probs, torch.ones(length, dtype=torch.bool),
                        1, total)
    if on_iteration is not None:
        on_iteration(state)
    while not stop_condition(state):
        n = remask_count(length, total, state.iteration)
        # stable ascending sort puts the lower index first among equal probabilities
        worst = torch.sort(state.probs, stable=True).indices[:n]
        masked = torch.zeros(length, dtype=torch.bool)
        masked[worst] = True
        canvas = state.tokens.masked_fill(masked, MASK_ID)
        new_tokens, new_probs = predict(canvas)
        state = DecodeState(
            length,
            canvas,
            torch.where(masked, new_tokens, state.tokens),
            torch.where(masked, new_probs, state.probs),
            masked,
            state.iteration + 1,
            total,
            previous=state.tokens,
        )
        if on_iteration is not None:
            on_iteration(state)
    return state


def mask_predict_decode(
    src_ids: Sequence[int],
    params: ParameterStore,
    config: ModelConfig,
    decode_config: DecodeConfig,
    counter: Optional[ForwardCounter] = None,
    on_iteration: Optional[Callable[[DecodeState], None]] = None,
) -> DecodeResult:
    """
    Parallel decoding over the top-B predicted lengths.

    Each candidate starts from an all-[MASK] canvas and is refined until
    stop_condition holds; the candidate with the highest mean log stored
    probability wins, earlier length-beam entries winning ties.
    """
    if not config.parallel:
        raise ContractError("mask_predict_decode: model has no length head")
    with torch.inference_mode():
        enc_out, length_logits = abmodel.encoder_forward(_source_tensor(src_ids), params, config)
    if length_logits is None:
        raise ContractError("mask_predict_decode: model has no length head")
    lengths = predict_lengths(length_logits, decode_config.length_beam)

    def run(length):
        with torch.inference_mode():
            return _refine_candidate(length, enc_out, params, config,
                                     decode_config.iterations, counter, on_iteration)

    states = map_concurrently(run, lengths, decode_config.workers)
    best = max(range(len(states)), key=lambda i: (states[i].score, -i))
    state = states[best]
    return DecodeResult(
        tokens=[int(t) for t in state.tokens],
        score=state.score,
        iterations=state.iteration,
        length=state.length,
    )


def beam_search(
    step_fn: StepFn, bos: int, eos: int, width: int, max_len: int
) -> DecodeResult:
    """
    Beam search from `bos` until `width` hypotheses end in `eos` or `max_len`
    tokens were generated.

    Hypotheses are ranked during search by summed log-probability; the
    returned one maximizes log-probability divided by its generated length
    ([EOS] included). When nothing finished, the best unfinished hypothesis
    comes back with `truncated` set.
    """
    if width < 1 or max_len < 1:
        raise ConfigurationError("beam_search: width and max_len must be positive")
    live: List[Tuple[List[int], float]] = [([bos], 0.0)]
    finished: List[Tuple[List[int], float]] = []
    for _ in range(max_len):
        log_probs = step_fn([prefix for prefix, _ in live])
        candidates = []
        for row, (prefix, score) in zip(log_probs, live):
            values, indices = torch.sort(row, descending=True, stable=True)
            for value, token in zip(values[:width].tolist(), indices[:width].tolist()):
                if value == float("-inf"):
                    break
                candidates.append((prefix + [token], score + value))
        candidates.sort(key=lambda c: -c[1])
        live = []
        for seq, score in candidates[:width]:
            (finished if seq[-1] == eos else live).append((seq, score))
        if len(finished) >= width or not live:
            break

    pool, truncated = (finished, False) if finished else (live, True)
    seq, score = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    tokens = seq[1:-1] if not truncated else seq[1:]
    return DecodeResult(tokens, score / (len(seq) - 1), len(seq) - 1, len(tokens), truncated)


def greedy_search(step_fn: StepFn, bos: int, eos: int, max_len: int) -> DecodeResult:
    """Pick the argmax token at every step."""
    seq, score = [bos], 0.0
    for _ in range(max_len):
        row = step_fn([seq])[0]
        token = int(row.argmax())
        seq.append(token)
        score += float(row[token])
        if token == eos:
            return DecodeResult(seq[1:-1], score / (len(seq) - 1), len(seq) - 1, len(seq) - 2)
    return DecodeResult(seq[1:], score / (len(seq) - 1), len(seq) - 1, len(seq) - 1, True)


def make_step_fn(
    src_ids: Sequence[int],
    params: ParameterStore,
    config: ModelConfig,
    counter: Optional[ForwardCounter] = None,
) -> StepFn:
    """
    Next-token log-probabilities from the autoregressive decoder.

    Special tokens other than [EOS] are never proposed.
    """
    enc_out, _ = abmodel.encoder_forward(_source_tensor(src_ids), params, config)
    enc_out = enc_out.unsqueeze(0)
    banned = torch.tensor([i for i in range(NUM_SPECIAL) if i != EOS_ID], dtype=torch.long)

    def step(prefixes: List[List[int]]) -> torch.Tensor:
        if counter is not None:
            counter.increment()
        ids = torch.as_tensor(prefixes, dtype=torch.long)
        memory = enc_out.expand(ids.shape[0], -1, -1)
        logits = abmodel.target_forward(ids, memory, params, config)[:, -1]
        log_probs = torch.log_softmax(logits, dim=-1)
        log_probs[:, banned] = float("-inf")
        return log_probs

    return step


def beam_search_decode(
    src_ids: Sequence[int],
    params: ParameterStore,
    config: ModelConfig,
    width: int = 5,
    counter: Optional[ForwardCounter] = None,
) -> DecodeResult:
    """Beam search with the autoregressive decoder, up to L_max steps."""
    resolve_mode(config, DecodeConfig(mode="ar"))
    with torch.inference_mode():
        step = make_step_fn(src_ids, params, config, counter)
        return beam_search(step, BOS_ID, EOS_ID, width, config.max_target_length)


def greedy_decode(
    src_ids: Sequence[int],
    params: ParameterStore,
    config: ModelConfig,
    counter: Optional[ForwardCounter] = None,
) -> DecodeResult:
    resolve_mode(config, DecodeConfig(mode="ar"))
    with torch.inference_mode():
        step = make_step_fn(src_ids, params, config, counter)
        return greedy_search(step, BOS_ID, EOS_ID, config.max_target_length)


def decode(
    src_ids: Sequence[int],
    params: ParameterStore,
    config: ModelConfig,
    decode_config: DecodeConfig,
    counter: Optional[ForwardCounter] = None,
    on_iteration: Optional[Callable[[DecodeState], None]] = None,
) -> DecodeResult:
    """Decode one source with the strategy selected by decode_config.mode."""
    if resolve_mode(config, decode_config) == "parallel":
        return mask_predict_decode(src_ids, params, config, decode_config, counter, on_iteration)
    return beam_search_decode(src_ids, params, config, decode_config.beam_width, counter)
