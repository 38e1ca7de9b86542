"""
Training module for abnet.

This module covers both training phases:
- MLM pre-training of a single BERT backbone ([MASK]-only corruption)
- Fine-tuning of the assembled model with a conditional MLM word loss plus
  the target-length loss, or next-token NLL over gold prefixes for the autoregressive
  variants
- Parameter partitioning per training mode and the Adam update that only
  ever touches the TRAINABLE set
- The per-step metrics log
"""

import logging
import math
import os
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from abnet import model as abmodel
from abnet import numerics
from abnet.errors import (
    ConfigurationError,
    ContractError,
    DataError,
    NumericError,
    TrainingDivergedError,
)
from abnet.model import ModelConfig, ParameterStore, Partition
from abnet.tokenizer import BOS_ID, EOS_ID, LENGTH_ID, MASK, PAD_ID, Vocabulary, encode
from abnet.utils import process_stats

logger = logging.getLogger(__name__)

MODES = ("pretrain-mlm", "finetune-adapters", "finetune-full", "train-scratch")
METRICS_HEADER = ("step", "mode", "loss", "word_loss", "length_loss", "wall_ms")

Pair = Tuple[Sequence[int], Sequence[int]]


@dataclass
class TrainConfig:
    """Optimization settings for one training phase."""

    mode: str = "finetune-adapters"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    mlm_mask_fraction: float = 0.15
    length_loss_weight: float = 1.0
    seed: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.mlm_mask_fraction < 1.0:
            raise ConfigurationError("mlm_mask_fraction must lie in (0, 1)")
        if self.length_loss_weight < 0:
            raise ConfigurationError("length_loss_weight must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class MaskedBatch:
    """
    Padded batch of corrupted inputs and the originals they came from.

    input_ids carry [MASK] substitutions (or the [BOS]-shifted targets for
    autoregressive training); mask_positions marks where the loss is taken.
    """

    input_ids: torch.Tensor
    target_ids: torch.Tensor
    mask_positions: torch.Tensor
    padding: torch.Tensor
    source_ids: Optional[torch.Tensor] = None
    target_lengths: Optional[torch.Tensor] = None


@dataclass
class LossBreakdown:
    total: torch.Tensor
    word: torch.Tensor
    length: torch.Tensor


@dataclass
class StepResult:
    step: int
    mode: str
    loss: float
    word_loss: float
    length_loss: float
    wall_ms: float


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    valid_loss: Optional[float]
    wall_seconds: float
    rss_bytes: int
    steps: int


def _pad(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> torch.Tensor:
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return out


def mlm_mask_count(length: int, fraction: float) -> int:
    """ceil(fraction * length), at least 1."""
    return max(1, math.ceil(fraction * length - 1e-9))


def sample_mlm_batch(
    sequences: Sequence[Sequence[int]],
    vocab: Vocabulary,
    fraction: float,
    rng: np.random.Generator,
) -> MaskedBatch:
    """
    Replace ceil(fraction * len) positions per sequence (at least one),
    chosen uniformly without replacement, by [MASK].
    """
    mask_id = vocab.token_to_id[MASK]
    originals = _pad(sequences)
    padding = originals == PAD_ID
    positions = torch.zeros_like(originals, dtype=torch.bool)
    for i, seq in enumerate(sequences):
        if not seq:
            raise DataError("sample_mlm_batch: empty sequence")
        chosen = rng.choice(len(seq), size=mlm_mask_count(len(seq), fraction), replace=False)
        positions[i, torch.as_tensor(chosen, dtype=torch.long)] = True
    inputs = originals.masked_fill(positions, mask_id)
    return MaskedBatch(inputs, originals, positions, padding)


def sample_cmlm_batch(
    pairs: Sequence[Pair], vocab: Vocabulary, rng: np.random.Generator
) -> MaskedBatch:
    """
    Conditional MLM corruption of the targets.

    Per pair, m ~ Uniform{1..|y|} target positions are masked; the source is
    prefixed with [LENGTH].
    """
    mask_id = vocab.token_to_id[MASK]
    targets = [list(t) for _, t in pairs]
    originals = _pad(targets)
    padding = originals == PAD_ID
    positions = torch.zeros_like(originals, dtype=torch.bool)
    for i, tgt in enumerate(targets):
        if not tgt:
            raise DataError("sample_cmlm_batch: empty target")
        m = int(rng.integers(1, len(tgt) + 1))
        chosen = rng.choice(len(tgt), size=m, replace=False)
        positions[i, torch.as_tensor(chosen, dtype=torch.long)] = True
    inputs = originals.masked_fill(positions, mask_id)
    sources = _pad([[LENGTH_ID] + list(s) for s, _ in pairs])
    lengths = torch.as_tensor([len(t) for t in targets], dtype=torch.long)
    return MaskedBatch(inputs, originals, positions, padding, sources, lengths)


def make_ar_batch(pairs: Sequence[Pair]) -> MaskedBatch:
    """Teacher-forcing batch: inputs [BOS] y, targets y [EOS]."""
    for _, tgt in pairs:
        if not tgt:
            raise DataError("make_ar_batch: empty target")
    inputs = _pad([[BOS_ID] + list(t) for _, t in pairs])
    targets = _pad([list(t) + [EOS_ID] for _, t in pairs])
    padding = targets == PAD_ID
    sources = _pad([[LENGTH_ID] + list(s) for s, _ in pairs])
    lengths = torch.as_tensor([len(t) for _, t in pairs], dtype=torch.long)
    return MaskedBatch(inputs, targets, ~padding, padding, sources, lengths)


def compute_mlm_loss(
    batch: MaskedBatch, params: ParameterStore, config: ModelConfig, side: str,
    training: bool = False,
) -> torch.Tensor:
    """Mean NLL of the original tokens at masked positions."""
    logits = abmodel.mlm_logits(batch.input_ids, side, params, config, training)
    return numerics.cross_entropy(logits, batch.target_ids, ~batch.mask_positions)


def compute_finetune_loss(
    batch: MaskedBatch,
    params: ParameterStore,
    config: ModelConfig,
    length_weight: float = 1.0,
    training: bool = False,
) -> LossBreakdown:
    """
    Word loss over masked target positions plus the weighted length loss.

    For autoregressive configurations the word loss covers every non-padding
    target position and there is no length term.
    """
    if batch.source_ids is None:
        raise ContractError("compute_finetune_loss: batch has no source ids")
    enc_out, length_logits = abmodel.encoder_forward(batch.source_ids, params, config, training)
    enc_mask = abmodel.padding_mask(batch.source_ids, enc_out.dtype)
    logits = abmodel.target_forward(batch.input_ids, enc_out, params, config, enc_mask, training)
    word = numerics.cross_entropy(logits, batch.target_ids, ~batch.mask_positions)
    if not config.parallel:
        return LossBreakdown(word, word, torch.zeros((), dtype=word.dtype))
    if length_logits is None:
        raise ContractError("compute_finetune_loss: model has no length head")
    length = numerics.cross_entropy(
        length_logits,
        batch.target_lengths - 1,
        torch.zeros(batch.target_lengths.shape, dtype=torch.bool),
    )
    return LossBreakdown(word + length_weight * length, word, length)


def apply_partition(params: ParameterStore, mode: str) -> None:
    """
    Label every tensor FROZEN or TRAINABLE for a training mode.

    finetune-adapters trains adapters, the length head, the [LENGTH] row and
    (encoder-only variant) the from-scratch Transformer decoder; every other
    mode trains everything.
    """
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    for name in list(params):
        trainable = mode != "finetune-adapters" or (
            abmodel.is_adapter_parameter(name) or name.startswith("ar_decoder.")
        )
        params.set_partition(name, Partition.TRAINABLE if trainable else Partition.FROZEN)


def make_optimizer(params: ParameterStore, train_config: TrainConfig) -> torch.optim.Adam:
    tensors = [t for _, t in params.trainable()]
    if not tensors:
        raise ConfigurationError("no TRAINABLE parameters to optimize")
    return torch.optim.Adam(
        tensors,
        lr=train_config.learning_rate,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
        eps=train_config.adam_eps,
    )


def train_step(
    batch: MaskedBatch,
    params: ParameterStore,
    optimizer: torch.optim.Optimizer,
    model_config: ModelConfig,
    train_config: TrainConfig,
    side: Optional[str] = None,
    step: int = 0,
) -> StepResult:
    """
    One Adam update of the TRAINABLE tensors.

    Raises:
        TrainingDivergedError: the loss or a gradient went non-finite.
    """
    start = time.perf_counter()
    optimizer.zero_grad(set_to_none=True)
    trainable = params.trainable()
    try:
        if train_config.mode == "pretrain-mlm":
            word = compute_mlm_loss(batch, params, model_config, side, training=True)
            losses = LossBreakdown(word, word, torch.zeros((), dtype=word.dtype))
        else:
            losses = compute_finetune_loss(
                batch, params, model_config, train_config.length_loss_weight, training=True
            )
        numerics.backward(losses.total, [t for _, t in trainable])
    except NumericError as e:
        raise TrainingDivergedError(
            f"training aborted at step {step} ({train_config.mode}): {e}"
        ) from e
    for name, tensor in trainable:
        if tensor.grad is not None and not bool(torch.isfinite(tensor.grad).all()):
            raise TrainingDivergedError(
                f"training aborted at step {step} ({train_config.mode}): "
                f"gradient of {name} is not finite"
            )
    optimizer.step()
    return StepResult(
        step=step,
        mode=train_config.mode,
        loss=float(losses.total.detach()),
        word_loss=float(losses.word.detach()),
        length_loss=float(losses.length.detach()),
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )


class MetricsLog:
    """Tab-separated per-step metrics file with a header line."""

    def __init__(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.path = path
        self._file = open(path, "w", encoding="utf-8")
        self._file.write("\t".join(METRICS_HEADER) + "\n")

    def write(self, result: StepResult) -> None:
        self._file.write(
            f"{result.step}\t{result.mode}\t{result.loss:.6f}\t{result.word_loss:.6f}"
            f"\t{result.length_loss:.6f}\t{result.wall_ms:.3f}\n"
        )

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Trainer:
    """
    Runs epochs of train_step over a dataset.

    Attributes:
        params: The ParameterStore being trained (partition already applied).
        model_config: Architecture.
        train_config: Optimization settings; `mode` selects the objective.
        vocab: Vocabulary of the masked side ([MASK] id).
        side: Backbone side for pretrain-mlm.
        metrics: Optional MetricsLog receiving one line per step.
    """

    def __init__(
        self,
        params: ParameterStore,
        model_config: ModelConfig,
        train_config: TrainConfig,
        vocab: Vocabulary,
        side: Optional[str] = None,
        metrics: Optional[MetricsLog] = None,
    ):
        if train_config.mode == "pretrain-mlm" and side is None:
            raise ConfigurationError("pretrain-mlm needs a backbone side")
        self.params = params
        self.model_config = model_config
        self.train_config = train_config
        self.vocab = vocab
        self.side = side
        self.metrics = metrics
        self.optimizer = make_optimizer(params, train_config)
        self.step = 0
        self.summaries: List[EpochSummary] = []

    def _batch(self, chunk, rng: np.random.Generator) -> MaskedBatch:
        if self.train_config.mode == "pretrain-mlm":
            return sample_mlm_batch(chunk, self.vocab, self.train_config.mlm_mask_fraction, rng)
        if self.model_config.parallel:
            return sample_cmlm_batch(chunk, self.vocab, rng)
        return make_ar_batch(chunk)

    def batches(self, examples: Sequence, epoch: int) -> List[MaskedBatch]:
        """Shuffle keyed by (seed, epoch), then corrupt batch by batch."""
        seed = self.train_config.seed
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
        rng = np.random.default_rng([seed, epoch, 1])
        size = self.train_config.batch_size
        return [
            self._batch([examples[i] for i in order[start:start + size]], rng)
            for start in range(0, len(examples), size)
        ]

    def batch_loss(self, batch: MaskedBatch) -> torch.Tensor:
        if self.train_config.mode == "pretrain-mlm":
            return compute_mlm_loss(batch, self.params, self.model_config, self.side)
        return compute_finetune_loss(
            batch, self.params, self.model_config, self.train_config.length_loss_weight
        ).total

    def evaluate(self, examples: Sequence) -> float:
        """Mean loss on `examples` under a fixed corruption stream."""
        rng = np.random.default_rng([self.train_config.seed, 7919])
        size = self.train_config.batch_size
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(examples), size):
                chunk = list(examples[start:start + size])
                total += float(self.batch_loss(self._batch(chunk, rng))) * len(chunk)
                count += len(chunk)
        return total / max(count, 1)

    def train_epoch(self, examples: Sequence, epoch: int) -> float:
        losses = []
        for batch in self.batches(examples, epoch):
            self.step += 1
            result = train_step(
                batch, self.params, self.optimizer, self.model_config,
                self.train_config, self.side, self.step,
            )
            if self.metrics is not None:
                self.metrics.write(result)
            losses.append(result.loss)
        return float(np.mean(losses)) if losses else float("nan")

    def fit(
        self, examples: Sequence, valid: Optional[Sequence] = None,
        epochs: Optional[int] = None,
    ) -> List[EpochSummary]:
        if not examples:
            raise DataError("Trainer.fit: no training examples")
        epochs = self.train_config.epochs if epochs is None else epochs
        for epoch in range(1, epochs + 1):
            start = time.perf_counter()
            steps_before = self.step
            mean_loss = self.train_epoch(examples, epoch)
            valid_loss = self.evaluate(valid) if valid else None
            summary = EpochSummary(
                epoch=epoch,
                mean_loss=mean_loss,
                valid_loss=valid_loss,
                wall_seconds=time.perf_counter() - start,
                rss_bytes=process_stats()["rss"],
                steps=self.step - steps_before,
            )
            self.summaries.append(summary)
            valid_text = "n/a" if valid_loss is None else f"{valid_loss:.4f}"
            logger.info(
                f"[{self.train_config.mode}] epoch {epoch}/{epochs}: "
                f"loss={mean_loss:.4f} valid={valid_text} "
                f"time={summary.wall_seconds:.1f}s rss={summary.rss_bytes / 2 ** 20:.1f}MiB"
            )
        return self.summaries


def encode_corpus(lines: Sequence[str], vocab: Vocabulary) -> List[List[int]]:
    """Encode text lines, dropping lines that encode to nothing."""
    return [ids for ids in (encode(line, vocab) for line in lines) if ids]


def pretrain_backbone(
    corpus: Sequence[str],
    vocab: Vocabulary,
    config: ModelConfig,
    train_config: TrainConfig,
    side: str,
    valid: Optional[Sequence[str]] = None,
    metrics: Optional[MetricsLog] = None,
) -> ParameterStore:
    """
    MLM pre-training of one BERT stack with a tied output head.

    Returns the trained backbone, named for its side so it drops straight
    into assemble_abnet.
    """
    sequences = encode_corpus(corpus, vocab)
    if not sequences:
        raise DataError(f"pretrain_backbone: empty {side} corpus")
    params = abmodel.init_backbone(config, side)
    trainer = Trainer(
        params, config, replace(train_config, mode="pretrain-mlm"), vocab, side, metrics
    )
    trainer.fit(sequences, encode_corpus(valid, vocab) if valid else None)
    return params


def mlm_accuracy(
    params: ParameterStore,
    sequences: Sequence[Sequence[int]],
    vocab: Vocabulary,
    config: ModelConfig,
    side: str,
    fraction: float = 0.15,
    seed: int = 0,
    batch_size: int = 64,
) -> float:
    """Fraction of masked held-out tokens whose argmax prediction is correct."""
    rng = np.random.default_rng(seed)
    correct, total = 0, 0
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = sample_mlm_batch(sequences[start:start + batch_size], vocab, fraction, rng)
            logits = abmodel.mlm_logits(batch.input_ids, side, params, config)
            predicted = logits.argmax(dim=-1)
            hits = (predicted == batch.target_ids) & batch.mask_positions
            correct += int(hits.sum())
            total += int(batch.mask_positions.sum())
    return correct / max(total, 1)
