"""
Evaluation module for abnet.

Corpus BLEU (multi-bleu arithmetic, no smoothing), exact match, batch-size-1
latency with decoder forward counts, and parameter audits by partition.
"""

import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from tabulate import tabulate

from abnet.errors import DataError
from abnet.model import ParameterStore, Partition

logger = logging.getLogger(__name__)

MAX_ORDER = 4
MIN_LOG_BP = -700.0

RECORD_FIELDS = (
    "bleu", "p1", "p2", "p3", "p4", "brevity_penalty", "exact_match",
    "latency_ms", "mean_iterations", "mean_output_length",
    "forward_calls_per_sentence", "trainable_params", "total_params", "sentences",
)


@dataclass
class BleuScore:
    bleu: float
    precisions: Tuple[float, ...]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int


@dataclass
class LatencyReport:
    mean_ms: float
    sentences: int
    mean_iterations: float
    mean_output_length: float
    forward_calls_per_sentence: float


@dataclass
class ParameterAudit:
    trainable: int
    frozen: int
    groups: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    @property
    def encoder_trainable(self) -> int:
        """Trainable count on the encoder side."""
        return sum(t for name, (t, _) in self.groups.items() if name.startswith("encoder."))


@dataclass
class EvalReport:
    """Scores of one decoded test set."""

    bleu: float
    precisions: Tuple[float, ...]
    brevity_penalty: float
    exact_match: float
    latency_ms: float
    mean_iterations: float
    mean_output_length: float
    forward_calls_per_sentence: float
    trainable_params: int
    total_params: int
    sentences: int
    mode: str = ""

    def values(self) -> Dict[str, float]:
        data = asdict(self)
        precisions = data.pop("precisions")
        data.pop("mode")
        for n, p in enumerate(precisions, start=1):
            data[f"p{n}"] = p
        return {key: data[key] for key in RECORD_FIELDS}

    def to_record(self) -> str:
        """Single tab-separated line in RECORD_FIELDS order."""
        return "\t".join(_format_value(v) for v in self.values().values())

    @staticmethod
    def record_header() -> str:
        return "\t".join(RECORD_FIELDS)

    def render(self) -> str:
        rows = [(key, _format_value(value)) for key, value in self.values().items()]
        title = f"Evaluation ({self.mode})" if self.mode else "Evaluation"
        return title + "\n" + tabulate(rows, headers=["metric", "value"], tablefmt="simple")


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hypotheses: Sequence[Sequence], references: Sequence[Sequence]
) -> BleuScore:
    """
    Corpus-level BLEU-4 on token sequences.

    Clipped n-gram counts and lengths are summed over the corpus before
    dividing. Any zero precision gives BLEU 0.
    """
    if not hypotheses:
        raise DataError("corpus_bleu: empty corpus")
    if len(hypotheses) != len(references):
        raise DataError(
            f"corpus_bleu: {len(hypotheses)} hypotheses for {len(references)} references"
        )
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    # empty output is penalized as a one-token hypothesis; BP stays in (0, 1]
    bp = math.exp(max(MIN_LOG_BP, min(0.0, 1.0 - ref_len / max(hyp_len, 1))))
    if hyp_len == 0 or min(precisions) == 0.0:
        return BleuScore(0.0, precisions, bp, hyp_len, ref_len)
    log_mean = sum(math.log(p) for p in precisions) / MAX_ORDER
    return BleuScore(100.0 * bp * math.exp(log_mean), precisions, bp, hyp_len, ref_len)


def exact_match(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    if not hypotheses or len(hypotheses) != len(references):
        raise DataError("exact_match: need equal, non-empty hypothesis and reference lists")
    hits = sum(list(h) == list(r) for h, r in zip(hypotheses, references))
    return hits / len(hypotheses)


def measure_latency(
    decode_fn: Callable,
    sources: Sequence,
    counter=None,
    warmup: int = 1,
) -> Tuple[LatencyReport, List]:
    """
    Decode one sentence at a time and average the wall-clock per sentence.

    `decode_fn(source)` returns a DecodeResult. The first `warmup` sources
    are decoded once untimed. When `counter` is given its tally over the
    timed run gives forward calls per sentence.

    Returns:
        (LatencyReport, list of DecodeResult in source order)
    """
    if not sources:
        raise DataError("measure_latency: empty test set")
    for source in sources[:warmup]:
        decode_fn(source)
    if counter is not None:
        counter.reset()
    results = []
    elapsed = 0.0
    for source in sources:
        start = time.perf_counter()
        results.append(decode_fn(source))
        elapsed += time.perf_counter() - start
    calls = counter.reset() if counter is not None else 0
    n = len(sources)
    report = LatencyReport(
        mean_ms=elapsed * 1000.0 / n,
        sentences=n,
        mean_iterations=sum(r.iterations for r in results) / n,
        mean_output_length=sum(len(r.tokens) for r in results) / n,
        forward_calls_per_sentence=calls / n,
    )
    logger.debug(f"Latency over {n} sentences: {report.mean_ms:.2f} ms/sentence")
    return report, results


def parameter_group(name: str) -> str:
    """Audit group of a tensor name, e.g. 'encoder.adapters'."""
    return ".".join(name.split(".")[:2])


def parameter_audit(params: ParameterStore) -> ParameterAudit:
    """Exact element counts per partition, overall and per group."""
    groups: Dict[str, List[int]] = {}
    for name, tensor in params.items():
        counts = groups.setdefault(parameter_group(name), [0, 0])
        if params.partition_of(name) is Partition.TRAINABLE:
            counts[0] += tensor.numel()
        else:
            counts[1] += tensor.numel()
    return ParameterAudit(
        trainable=params.numel(Partition.TRAINABLE),
        frozen=params.numel(Partition.FROZEN),
        groups={k: (v[0], v[1]) for k, v in sorted(groups.items())},
    )


def render_audit(audit: ParameterAudit) -> str:
    rows = [(group, t, f, t + f) for group, (t, f) in audit.groups.items()]
    rows.append(("total", audit.trainable, audit.frozen, audit.total))
    table = tabulate(rows, headers=["group", "trainable", "frozen", "total"], tablefmt="simple")
    return f"{table}\ntrainable ratio: {audit.ratio:.4f}"


def build_report(
    hypotheses: Sequence[Sequence],
    references: Sequence[Sequence],
    latency: LatencyReport,
    audit: Optional[ParameterAudit] = None,
    mode: str = "",
) -> EvalReport:
    bleu = corpus_bleu(hypotheses, references)
    return EvalReport(
        bleu=bleu.bleu,
        precisions=bleu.precisions,
        brevity_penalty=bleu.brevity_penalty,
        exact_match=exact_match(hypotheses, references),
        latency_ms=latency.mean_ms,
        mean_iterations=latency.mean_iterations,
        mean_output_length=latency.mean_output_length,
        forward_calls_per_sentence=latency.forward_calls_per_sentence,
        trainable_params=audit.trainable if audit else 0,
        total_params=audit.total if audit else 0,
        sentences=len(hypotheses),
        mode=mode,
    )
