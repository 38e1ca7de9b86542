"""
Tokenizer module for abnet.

Wordpiece vocabularies built from a corpus, greedy longest-match-first
segmentation with "##" continuation pieces, and the six reserved special
tokens shared by every vocabulary.
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from abnet.errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
UNK = "[UNK]"
MASK = "[MASK]"
LENGTH = "[LENGTH]"
BOS = "[BOS]"
EOS = "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, MASK, LENGTH, BOS, EOS)
PAD_ID, UNK_ID, MASK_ID, LENGTH_ID, BOS_ID, EOS_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)

CONTINUATION = "##"
DEFAULT_MAX_PIECE_LENGTH = 16


@dataclass(frozen=True)
class Vocabulary:
    """
    Ordered token list with its inverse map.

    Ids 0-5 are the special tokens in reserved order. `lowercase` is applied
    to text before segmentation.
    """

    tokens: Tuple[str, ...]
    lowercase: bool = True
    token_to_id: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError(
                f"vocabulary must start with the special tokens {SPECIAL_TOKENS}"
            )
        mapping = {}
        for i, token in enumerate(self.tokens):
            if token in mapping:
                raise DataError(f"duplicate vocabulary token {token!r}")
            mapping[token] = i
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.tokens)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise DataError(
                f"token id {token_id} out of range for vocabulary of {len(self)}"
            )
        return self.tokens[token_id]

    def piece_id(self, piece: str) -> Optional[int]:
        """Id of an ordinary piece; special tokens never match text."""
        token_id = self.token_to_id.get(piece)
        if token_id is None or token_id < NUM_SPECIAL:
            return None
        return token_id


def _normalize(text: str, lowercase: bool) -> str:
    return text.lower() if lowercase else text


def build_vocab(
    corpus: Iterable[str],
    target_size: int,
    lowercase: bool = True,
    max_piece_length: int = DEFAULT_MAX_PIECE_LENGTH,
) -> Vocabulary:
    """
    Build a wordpiece vocabulary of at most `target_size` tokens.

    Every character seen in the corpus is included as a word-initial piece,
    and as a "##" piece when it occurs inside a word, so that encode never
    fails on corpus text. Remaining slots go to the most frequent multi
    character pieces, ties broken alphabetically.

    Raises:
        DataError: the corpus holds no words.
        ConfigurationError: target_size cannot hold the character alphabet.
    """
    words = Counter()
    for line in corpus:
        words.update(_normalize(line, lowercase).split())
    if not words:
        raise DataError("build_vocab: empty corpus")

    initial_chars = sorted({c for w in words for c in w})
    inner_chars = sorted({c for w in words for c in w[1:]})
    alphabet = initial_chars + [CONTINUATION + c for c in inner_chars]
    required = NUM_SPECIAL + len(alphabet)
    if target_size < required:
        raise ConfigurationError(
            f"build_vocab: target size {target_size} is below the {required} "
            f"slots needed for special tokens and the character alphabet"
        )

    pieces = Counter()
    for word, freq in words.items():
        for start in range(len(word)):
            stop = min(len(word), start + max_piece_length)
            for end in range(start + 2, stop + 1):
                piece = word[start:end]
                if start == 0 and piece.startswith(CONTINUATION):
                    continue
                pieces[piece if start == 0 else CONTINUATION + piece] += freq

    ranked = sorted(pieces.items(), key=lambda kv: (-kv[1], kv[0]))
    merged = [p for p, _ in ranked[: target_size - required]]
    vocab = Vocabulary(SPECIAL_TOKENS + tuple(alphabet) + tuple(merged), lowercase)
    logger.debug(
        f"Built vocabulary: {len(vocab)} tokens, {len(alphabet)} characters, "
        f"{len(merged)} merged pieces from {len(words)} word types"
    )
    return vocab


def _segment_word(word: str, vocab: Vocabulary) -> List[int]:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            # word-initial text never matches a continuation piece
            if start > 0 or not piece.startswith(CONTINUATION):
                match = vocab.piece_id(piece)
                if match is not None:
                    break
            end -= 1
        if match is None:
            return [UNK_ID]
        pieces.append(match)
        start = end
    return pieces


def encode(text: str, vocab: Vocabulary) -> List[int]:
    """Segment whitespace-separated words into wordpiece ids."""
    ids = []
    for word in _normalize(text, vocab.lowercase).split():
        ids.extend(_segment_word(word, vocab))
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Join pieces back into words; special tokens are dropped."""
    words: List[str] = []
    for token_id in ids:
        token = vocab.token_of(int(token_id))
        if int(token_id) < NUM_SPECIAL:
            continue
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)


def save_vocab(vocab: Vocabulary, path: str) -> None:
    """Write one token per line; line number is the id."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for token in vocab.tokens:
            f.write(token + "\n")


def load_vocab(path: str, lowercase: bool = True) -> Vocabulary:
    """
    Read a vocabulary file written by save_vocab.

    Raises:
        FileNotFoundError: the file does not exist.
        DataError: the reserved first six lines are wrong or tokens repeat.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Vocabulary file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        tokens = tuple(line.rstrip("\n") for line in f)
    if tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
        raise DataError(f"{path}: first lines must be {', '.join(SPECIAL_TOKENS)}")
    return Vocabulary(tokens, lowercase)
