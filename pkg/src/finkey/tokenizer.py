"""Deterministic hybrid tokenizer, vocabulary, and sequence encoding.

Tokenization is dependency-free and offset-preserving: maximal runs of ASCII
letters/digits become one lowercased token, every other non-space character
(CJK included) is a token of its own.  Encoding follows the usual
[CLS] ... [SEP] layout with segment ids, attention mask and per-token
character offsets so extracted spans can be mapped back to source text.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3

Span = tuple[int, int]


class TokenizerError(ValueError):
    pass


def _is_word_char(ch: str) -> bool:
    return "a" <= ch <= "z" or "A" <= ch <= "Z" or "0" <= ch <= "9"


def tokenize(text: str) -> list[tuple[str, Span]]:
    """Split text into (token, half-open char span) pairs.

    Runs of ASCII letters/digits form one lowercased token; any other
    non-space character stands alone.  Spans index the original string.
    """
    tokens: list[tuple[str, Span]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if _is_word_char(ch):
            j = i + 1
            while j < n and _is_word_char(text[j]):
                j += 1
            tokens.append((text[i:j].lower(), (i, j)))
            i = j
        else:
            tokens.append((ch, (i, i + 1)))
            i += 1
    return tokens


@dataclass(frozen=True)
class Vocab:
    """Immutable token-to-id mapping with the four reserved ids first."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocab":
        """Build a vocab whose non-reserved ids follow the given order."""
        id_to_token = list(RESERVED_TOKENS)
        for tok in tokens:
            id_to_token.append(tok)
        mapping = {tok: i for i, tok in enumerate(id_to_token)}
        if len(mapping) != len(id_to_token):
            raise TokenizerError("duplicate tokens in vocabulary")
        return cls(tuple(id_to_token), mapping)


def build_vocab(tokens: Iterable[str], min_freq: int = 1, max_size: int = 50000) -> Vocab:
    """Vocabulary from a token stream.

    Keeps tokens with frequency >= min_freq ordered by (frequency desc,
    token asc), truncated so the total size (reserved ids included) does
    not exceed max_size.
    """
    if max_size < len(RESERVED_TOKENS):
        raise TokenizerError(f"max_size must be >= {len(RESERVED_TOKENS)}")
    if min_freq < 1:
        raise TokenizerError("min_freq must be >= 1")
    counts = Counter(tokens)
    for reserved in RESERVED_TOKENS:
        counts.pop(reserved, None)
    candidates = [t for t, c in counts.items() if c >= min_freq]
    candidates.sort(key=lambda t: (-counts[t], t))
    return Vocab.from_tokens(candidates[: max_size - len(RESERVED_TOKENS)])


def vocab_from_texts(texts: Iterable[str], min_freq: int = 1, max_size: int = 50000) -> Vocab:
    """Convenience wrapper: tokenize texts and build the vocabulary."""
    def stream():
        for text in texts:
            for tok, _ in tokenize(text):
                yield tok

    return build_vocab(stream(), min_freq=min_freq, max_size=max_size)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """Write "token<TAB>id" lines, reserved tokens first."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.id_to_token):
            fh.write(f"{tok}\t{i}\n")


def load_vocab(path: str | Path) -> Vocab:
    tokens: list[str] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
            except ValueError:
                raise TokenizerError(f"bad vocab line {lineno + 1}") from None
            if int(idx) != len(tokens):
                raise TokenizerError(f"non-contiguous id at line {lineno + 1}")
            tokens.append(tok)
    if tuple(tokens[:4]) != RESERVED_TOKENS:
        raise TokenizerError("vocab file does not start with the reserved tokens")
    return Vocab.from_tokens(tokens[4:])


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length encoded sequence.

    All four tuples have length max_len.  attention_mask is 1 on real tokens
    (specials included) and 0 on padding; segment_ids are 0 up to and
    including the first [SEP] and 1 on later real tokens; offsets are None
    for special/padding positions and half-open character spans into the
    source text(s) otherwise.
    """

    ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    offsets: tuple[Optional[Span], ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.attention_mask)


def _pad(seq: list, max_len: int, value) -> tuple:
    return tuple(seq + [value] * (max_len - len(seq)))


def encode_single(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Encode one text as [CLS] tokens [SEP], truncated and padded to max_len."""
    if max_len < 3:
        raise TokenizerError("max_len must be >= 3 for single-text encoding")
    tokens = tokenize(text)[: max_len - 2]
    ids = [CLS_ID] + [vocab.lookup(t) for t, _ in tokens] + [SEP_ID]
    offsets: list[Optional[Span]] = [None] + [span for _, span in tokens] + [None]
    n = len(ids)
    return TokenSequence(
        ids=_pad(ids, max_len, PAD_ID),
        segment_ids=_pad([0] * n, max_len, 0),
        attention_mask=_pad([1] * n, max_len, 0),
        offsets=_pad(offsets, max_len, None),
    )


def encode_pair(a: str, b: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Encode a text pair as [CLS] A [SEP] B [SEP].

    Only the B side is truncated (A is the short entity or question); if A
    alone does not fit, that is an error.
    """
    if max_len < 4:
        raise TokenizerError("max_len must be >= 4 for pair encoding")
    a_tokens = tokenize(a)
    if len(a_tokens) + 3 > max_len:
        raise TokenizerError(
            f"first segment too long: {len(a_tokens)} tokens with max_len {max_len}"
        )
    b_tokens = tokenize(b)[: max_len - 3 - len(a_tokens)]
    ids = (
        [CLS_ID]
        + [vocab.lookup(t) for t, _ in a_tokens]
        + [SEP_ID]
        + [vocab.lookup(t) for t, _ in b_tokens]
        + [SEP_ID]
    )
    offsets: list[Optional[Span]] = (
        [None]
        + [span for _, span in a_tokens]
        + [None]
        + [span for _, span in b_tokens]
        + [None]
    )
    n_seg0 = len(a_tokens) + 2  # [CLS] A [SEP]
    n = len(ids)
    segments = [0] * n_seg0 + [1] * (n - n_seg0)
    return TokenSequence(
        ids=_pad(ids, max_len, PAD_ID),
        segment_ids=_pad(segments, max_len, 0),
        attention_mask=_pad([1] * n, max_len, 0),
        offsets=_pad(offsets, max_len, None),
    )
