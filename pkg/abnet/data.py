"""
Synthetic parallel data for abnet.

Three desk-scale tasks stand in for real parallel corpora:
- copy: target = source
- reverse: target = source reversed
- lexicon-translate: every source symbol goes through a fixed bijective
  lexicon, and designated trigger symbols swap their translation with the
  following one

Splits are drawn from separate seeded streams and deduplicated against each
other, so test sources never occur in training.
"""

import logging
import os
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from abnet.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

TASKS = ("copy", "reverse", "lexicon-translate")
SPLITS = ("train", "valid", "test")
CONSONANTS = "bdgklmnprstvz"
VOWELS = "aeiou"
MAX_ATTEMPTS_PER_PAIR = 50

Pair = Tuple[str, str]


@dataclass
class DataConfig:
    """
    Attributes:
        task: One of TASKS.
        symbols: Number of distinct source symbols.
        min_length / max_length: Inclusive range of symbols per sentence.
        train_size / valid_size / test_size: Pairs per split.
        swap_fraction: Share of source symbols that trigger a local swap
            (lexicon-translate only).
        seed: Generation seed.
    """

    task: str = "reverse"
    symbols: int = 24
    min_length: int = 3
    max_length: int = 12
    train_size: int = 8000
    valid_size: int = 200
    test_size: int = 500
    swap_fraction: float = 0.25
    seed: int = 1

    def validate(self, max_target_length: Optional[int] = None):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 1 <= self.symbols <= len(CONSONANTS) * len(VOWELS):
            raise ConfigurationError(
                f"symbols must lie in 1..{len(CONSONANTS) * len(VOWELS)}"
            )
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigurationError("need 1 <= min_length <= max_length")
        if max_target_length is not None and self.max_length > max_target_length:
            raise ConfigurationError(
                f"max_length {self.max_length} exceeds the model's target limit "
                f"{max_target_length}"
            )
        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ConfigurationError("swap_fraction must lie in [0, 1]")
        if self.train_size < 1 or self.test_size < 1 or self.valid_size < 0:
            raise ConfigurationError("split sizes must be positive")


@dataclass(frozen=True)
class Lexicon:
    """Bijective symbol map plus the set of symbols that trigger a swap."""

    mapping: Dict[str, str]
    swaps: frozenset

    def translate(self, source: str) -> str:
        return apply_lexicon(source, self)


def source_symbols(n: int) -> List[str]:
    """Consonant-vowel syllables: ba, be, bi, ..."""
    return [c + v for c, v in product(CONSONANTS, VOWELS)][:n]


def target_symbols(n: int) -> List[str]:
    """Vowel-consonant syllables: ab, ad, ag, ..."""
    return [v + c for v, c in product(VOWELS, CONSONANTS)][:n]


def make_lexicon(symbols: Sequence[str], swap_fraction: float, seed: int) -> Lexicon:
    rng = np.random.default_rng([seed, 99])
    targets = target_symbols(len(symbols))
    permutation = rng.permutation(len(symbols))
    mapping = {s: targets[int(j)] for s, j in zip(symbols, permutation)}
    n_swaps = int(round(swap_fraction * len(symbols)))
    swaps = frozenset(symbols[int(i)] for i in rng.choice(len(symbols), n_swaps, replace=False))
    return Lexicon(mapping, swaps)


def apply_lexicon(source: str, lexicon: Lexicon) -> str:
    """
    Translate symbol by symbol, then scan left to right: a trigger symbol
    swaps its output with the next one, and the pair is skipped.
    """
    words = source.split()
    try:
        out = [lexicon.mapping[w] for w in words]
    except KeyError as e:
        raise DataError(f"symbol {e.args[0]!r} is not in the lexicon") from None
    i = 0
    while i < len(words) - 1:
        if words[i] in lexicon.swaps:
            out[i], out[i + 1] = out[i + 1], out[i]
            i += 2
        else:
            i += 1
    return " ".join(out)


def make_target(source: str, task: str, lexicon: Optional[Lexicon] = None) -> str:
    if task == "copy":
        return source
    if task == "reverse":
        return " ".join(reversed(source.split()))
    if task == "lexicon-translate":
        if lexicon is None:
            raise ConfigurationError("lexicon-translate needs a lexicon")
        return apply_lexicon(source, lexicon)
    raise ConfigurationError(f"task must be one of {TASKS}, got {task!r}")


def _sample_split(
    rng: np.random.Generator,
    size: int,
    symbols: Sequence[str],
    config: DataConfig,
    exclude: Set[str],
) -> List[str]:
    sources: List[str] = []
    seen = set(exclude)
    attempts = 0
    while len(sources) < size:
        attempts += 1
        if attempts > size * MAX_ATTEMPTS_PER_PAIR:
            raise DataError(
                f"could only draw {len(sources)} of {size} distinct sentences; "
                f"widen the length range or the symbol count"
            )
        length = int(rng.integers(config.min_length, config.max_length + 1))
        sentence = " ".join(symbols[int(i)] for i in rng.integers(0, len(symbols), length))
        if sentence in seen:
            continue
        seen.add(sentence)
        sources.append(sentence)
    return sources


def generate_splits(
    config: DataConfig, max_target_length: Optional[int] = None
) -> Tuple[Dict[str, List[Pair]], Optional[Lexicon]]:
    """
    Draw train/valid/test pairs; pure in `config`.

    Each split has its own stream keyed by (seed, split index); valid
    excludes train sources and test excludes both.
    """
    config.validate(max_target_length)
    symbols = source_symbols(config.symbols)
    lexicon = None
    if config.task == "lexicon-translate":
        lexicon = make_lexicon(symbols, config.swap_fraction, config.seed)
    sizes = {"train": config.train_size, "valid": config.valid_size, "test": config.test_size}
    used: Set[str] = set()
    splits = {}
    for index, split in enumerate(SPLITS):
        rng = np.random.default_rng([config.seed, index])
        sources = _sample_split(rng, sizes[split], symbols, config, used)
        used.update(sources)
        splits[split] = [(s, make_target(s, config.task, lexicon)) for s in sources]
    return splits, lexicon


def write_pairs(pairs: Sequence[Pair], path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for source, target in pairs:
            f.write(f"{source}\t{target}\n")


def read_pairs(path: str) -> List[Pair]:
    """Read source<TAB>target lines."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{number}: expected source<TAB>target")
            pairs.append((parts[0], parts[1]))
    return pairs


def write_lexicon(lexicon: Lexicon, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for source in sorted(lexicon.mapping):
            swap = 1 if source in lexicon.swaps else 0
            f.write(f"{source}\t{lexicon.mapping[source]}\t{swap}\n")


def read_lexicon(path: str) -> Lexicon:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Lexicon file not found: {path}")
    mapping, swaps = {}, set()
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise DataError(f"{path}:{number}: expected source<TAB>target<TAB>0|1")
            mapping[parts[0]] = parts[1]
            if parts[2] == "1":
                swaps.add(parts[0])
    return Lexicon(mapping, frozenset(swaps))


def split_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.tsv")


def gen_synthetic(
    config: DataConfig, data_dir: str, max_target_length: Optional[int] = None
) -> Dict[str, str]:
    """
    Write train/valid/test TSV files (and lexicon.tsv for lexicon-translate).

    Returns:
        dict: split name (or "lexicon") -> written path.
    """
    splits, lexicon = generate_splits(config, max_target_length)
    paths = {}
    for split, pairs in splits.items():
        paths[split] = split_path(data_dir, split)
        write_pairs(pairs, paths[split])
    if lexicon is not None:
        paths["lexicon"] = os.path.join(data_dir, "lexicon.tsv")
        write_lexicon(lexicon, paths["lexicon"])
    logger.info(
        f"Generated {config.task} data in {data_dir}: "
        + ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    )
    return paths
