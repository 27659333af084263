import numpy as np
import pytest

from utrlab.data import (
    END_MARKER, budgeted_batch, distinct_positions, load_corpus, synthetic_batch, tokenize,
)


def test_tokenize():
    assert tokenize("  The Cat\tsat \n") == ["the", "cat", "sat"]
    assert tokenize("") == []


def test_load_corpus(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("The cat sat\n\nthe dog ran\n", encoding="utf-8")
    c = load_corpus(p, max_seq_len=4)
    assert c.sentences == ["The cat sat", "the dog ran"]
    assert c.vocabulary == {END_MARKER: 0, "the": 1, "cat": 2, "sat": 3, "dog": 4, "ran": 5}
    assert c.end_id == 0 and c.vocab_size == 6
    assert c.sequences() == [[1, 2, 3, 0], [1, 4, 5, 0]]
    assert c.decode([1, 4, 5, 0]) == "the dog ran"
    with pytest.raises(KeyError):
        c.encode("the bird")


def test_load_corpus_errors(tmp_path):
    long = tmp_path / "long.txt"
    long.write_text("a b\na b c d\n")
    with pytest.raises(ValueError, match=r"long\.txt:2"):
        load_corpus(long, max_seq_len=4)
    empty = tmp_path / "empty.txt"
    empty.write_text("\n  \n")
    with pytest.raises(ValueError, match="no sentences"):
        load_corpus(empty)
    with pytest.raises(ValueError, match="cannot read"):
        load_corpus(tmp_path / "missing.txt")
    binary = tmp_path / "bin.txt"
    binary.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(ValueError, match="cannot read"):
        load_corpus(binary)


def test_synthetic_batch():
    rng = np.random.default_rng(0)
    batch = synthetic_batch(rng, 20, 5, 4, end_token=19)
    assert len(batch) == 5
    for s in batch:
        assert len(s) == 5 and s[-1] == 19 and 19 not in s[:-1]
        assert len(set(s[:-1])) == 4
    again = synthetic_batch(np.random.default_rng(0), 20, 5, 4, end_token=19)
    assert again == batch
    with pytest.raises(ValueError):
        synthetic_batch(rng, 3, 1, 3, end_token=0)


def test_distinct_positions():
    batch = [[1, 2, 3], [1, 2, 4], [1, 2, 3]]
    assert distinct_positions(batch, causal=True) == 4
    assert distinct_positions(batch, causal=False) == 6


def test_budgeted_batch_shrinks_sentences():
    rng = np.random.default_rng(1)
    batch = budgeted_batch(rng, 100, 8, 6, 99, causal=False, max_positions=24)
    assert distinct_positions(batch, causal=False) <= 24
    assert all(s[-1] == 99 for s in batch)
    capped = budgeted_batch(rng, 100, 4, 6, None, causal=True, max_positions=100, max_tokens=10)
    assert len({t for s in capped for t in s}) <= 10
    with pytest.raises(ValueError):
        budgeted_batch(rng, 100, 8, 3, 99, causal=False, max_positions=10)
