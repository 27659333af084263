"""Corpus ingestion and synthetic client batches.

The tokenizer is deliberately plain: lowercase, split on whitespace, append an
end-of-sentence marker.  Vocabulary ids follow first occurrence, after the
reserved markers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

END_MARKER = "</s>"
RESERVED = (END_MARKER,)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Corpus:
    sentences: list
    vocabulary: dict = field(default_factory=dict)
    max_seq_len: int = 8

    @property
    def end_id(self) -> int:
        return self.vocabulary[END_MARKER]

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def encode(self, sentence: str) -> list[int]:
        try:
            return [self.vocabulary[t] for t in tokenize(sentence)] + [self.end_id]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in corpus vocabulary") from None

    def decode(self, ids) -> str:
        inverse = {i: t for t, i in self.vocabulary.items()}
        return " ".join(inverse[int(i)] for i in ids if int(i) != self.end_id)

    def sequences(self) -> list[list[int]]:
        return [self.encode(s) for s in self.sentences]


def load_corpus(path, max_seq_len: int = 8) -> Corpus:
    """Read a UTF-8 file with one sentence per line; blank lines are skipped.

    A sentence may hold at most ``max_seq_len - 1`` tokens so the end marker fits.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ValueError(f"cannot read corpus {path}: {e}") from e
    vocab = {m: i for i, m in enumerate(RESERVED)}
    sentences = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = tokenize(line)
        if not tokens:
            continue
        if len(tokens) > max_seq_len - 1:
            raise ValueError(f"{path}:{lineno}: sentence has {len(tokens)} tokens, "
                             f"limit is {max_seq_len - 1}")
        for t in tokens:
            vocab.setdefault(t, len(vocab))
        sentences.append(line.strip())
    if not sentences:
        raise ValueError(f"corpus {path} has no sentences")
    return Corpus(sentences, vocab, max_seq_len)


def synthetic_batch(rng: np.random.Generator, vocab_size: int, batch_size: int, sentence_len: int,
                    end_token: int | None = None) -> list[list[int]]:
    """Sentences of ``sentence_len`` distinct tokens each, drawn uniformly.

    With ``end_token`` set it is excluded from sampling and appended to every sentence.
    """
    pool = np.array([t for t in range(vocab_size) if t != end_token])
    if sentence_len > pool.size:
        raise ValueError(f"sentence_len {sentence_len} exceeds the {pool.size} sampleable tokens")
    tail = [end_token] if end_token is not None else []
    return [[int(t) for t in rng.choice(pool, size=sentence_len, replace=False)] + tail
            for _ in range(batch_size)]


def distinct_positions(sequences, causal: bool) -> int:
    """Number of distinct layer-adapter inputs a batch produces.

    Under causal attention a position's state depends on its prefix only, so
    shared prefixes collapse; otherwise each (sentence, position) counts once
    per distinct sentence.
    """
    if causal:
        return len({tuple(s[:i + 1]) for s in sequences for i in range(len(s))})
    return sum(len(s) for s in {tuple(s) for s in sequences})


def budgeted_batch(rng: np.random.Generator, vocab_size: int, batch_size: int, sentence_len: int,
                   end_token: int | None, causal: bool, max_positions: int,
                   max_tokens: int | None = None) -> list[list[int]]:
    """A synthetic batch whose layer-adapter inputs and distinct tokens fit the given budgets.

    Sentence lengths shrink (down to one word) until the batch fits; raises if
    even one-word sentences do not.
    """
    for length in range(sentence_len, 0, -1):
        for _ in range(20):
            batch = synthetic_batch(rng, vocab_size, batch_size, length, end_token)
            n_tok = len({t for s in batch for t in s})
            if distinct_positions(batch, causal) <= max_positions and (max_tokens is None or n_tok <= max_tokens):
                return batch
    raise ValueError(f"cannot fit {batch_size} sentences into {max_positions} positions")
