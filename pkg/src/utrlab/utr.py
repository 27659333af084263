"""The attack: word-bag inference from embedding-adapter gradients, then a
filtered beam search whose candidates are verified against the span of the
layer-adapter gradients.

Stage 1 relies on the down-projection identity: for a neuron ``j`` the ratio
of weight-gradient row to bias gradient is a combination of the inputs that
activated it, so the span of these ratios sits inside the span of the batch's
adapter inputs.  Every vocabulary embedding is tested for membership.

Stage 2 grows sequences over the bag.  Each extension passes the Boolean
filters, then the candidate's layer-adapter inputs are checked against the
second span.  With causal attention only the new position needs checking;
with full attention a prefix has different hidden states than the finished
sentence, so partial candidates are ranked by span similarity and only
finished ones must pass the membership test.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import metrics
from .fedsim import GradientUpdate
from .subspace import DEFAULT_DROP_TOLERANCE, Subspace, orthonormalize, residual_ratios
from .toymodel import AdapterGradients, CandidateEncoder, Model

REPORT_FORMAT = "utrlab-attack-report"
REPORT_VERSION = 1


class NoGradientSignal(ValueError):
    """Every down-projection neuron was skipped; nothing to build a span from."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon_ea: float = 1e-3
    epsilon_la: float = 1e-3
    beam_width: int = 256
    max_len: int = 8
    # relative to the largest |bias gradient| in the layer
    bias_grad_floor: float = 1e-12
    filter_eicw: bool = True
    filter_grammar: bool = False
    filter_semantic: bool = False
    semantic_threshold: float = 0.2
    mode: str = "bidirectional"
    end_token: int | None = None
    drop_tolerance: float = DEFAULT_DROP_TOLERANCE
    score_decimals: int = 10

    def __post_init__(self):
        if not (self.epsilon_ea > 0 and self.epsilon_la > 0):
            raise ValueError("epsilons must be > 0")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.bias_grad_floor < 0:
            raise ValueError("bias_grad_floor must be >= 0")
        if self.mode not in ("unidirectional", "bidirectional"):
            raise ValueError(f"unknown attention mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RwbgSet:
    vectors: np.ndarray
    neurons: list[int]
    skipped_neurons: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class WordBag:
    tokens: frozenset
    per_token_residual: dict
    positions: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    def sorted(self) -> list[int]:
        return sorted(self.tokens)


@dataclass(frozen=True)
class CorpusStats:
    """Bigram counts from text the attacker may legitimately hold."""

    bigrams: Counter
    floor: float = 1.0

    @classmethod
    def from_sequences(cls, sequences, floor: float = 1.0) -> "CorpusStats":
        counts = Counter()
        for seq in sequences:
            seq = list(seq)
            counts.update(zip(seq[:-1], seq[1:]))
        return cls(counts, floor)


# -- stage 1 -------------------------------------------------------------

def compute_rwbg(grads: AdapterGradients, floor: float = 1e-12) -> RwbgSet:
    gw = np.asarray(grads.grad_down_weight, dtype=np.float64)
    gb = np.asarray(grads.grad_down_bias, dtype=np.float64)
    if gw.ndim != 2 or gb.shape != (gw.shape[0],):
        raise ValueError(f"down-layer gradient shapes disagree: weight {gw.shape}, bias {gb.shape}")
    scale = np.abs(gb).max() if gb.size else 0.0
    keep = np.abs(gb) > floor * scale if scale > 0 else np.zeros(gb.shape, dtype=bool)
    neurons = [int(j) for j in np.flatnonzero(keep)]
    skipped = [(int(j), "dead_or_tiny_bias_grad") for j in np.flatnonzero(~keep)]
    vectors = gw[keep] / gb[keep][:, None]
    return RwbgSet(vectors, neurons, skipped)


def _span_from(grads: AdapterGradients, config: AttackConfig, which: str) -> Subspace:
    rw = compute_rwbg(grads, config.bias_grad_floor)
    if not rw.neurons:
        raise NoGradientSignal(f"no usable gradient signal in the {which} adapter")
    return orthonormalize(rw.vectors, config.drop_tolerance, ambient_dim=rw.vectors.shape[1])


def build_attack_subspaces(update: GradientUpdate, config: AttackConfig) -> tuple[Subspace, Subspace]:
    return (_span_from(update.embedding_adapter, config, "embedding"),
            _span_from(update.layer_adapter, config, "layer"))


def infer_word_bag(model: Model, s_ea: Subspace, config: AttackConfig) -> WordBag:
    cfg = model.config
    if s_ea.ambient_dim != cfg.d_hidden:
        raise ValueError("embedding-adapter span does not match the model's hidden size")
    if s_ea.rank == 0:
        return WordBag(frozenset(), {})
    if cfg.positional_encoding == "additive_before_embedding_adapter":
        grid = model.embedding[None, :, :] + model.positional[:, None, :]
        res = residual_ratios(s_ea, grid.reshape(-1, cfg.d_hidden)).reshape(cfg.max_seq_len, cfg.vocab_size)
    else:
        res = residual_ratios(s_ea, model.embedding)[None, :]
    hits = res < config.epsilon_ea
    tokens = np.flatnonzero(hits.any(axis=0))
    best = res.min(axis=0)
    return WordBag(frozenset(int(t) for t in tokens),
                   {int(t): float(best[t]) for t in tokens},
                   {int(t): [int(p) for p in np.flatnonzero(hits[:, t])] for t in tokens})


# -- filters -------------------------------------------------------------

def filter_eicw(sequence, next_token) -> bool:
    """Accept unless ``next_token`` repeats the last token."""
    return not sequence or sequence[-1] != next_token


def filter_grammar(sequence, corpus_stats: CorpusStats | None) -> bool:
    """Accept iff every adjacent bigram's add-one count exceeds the corpus floor."""
    if corpus_stats is None:
        return True
    for pair in zip(sequence[:-1], sequence[1:]):
        if corpus_stats.bigrams.get(tuple(pair), 0) + 1 <= corpus_stats.floor:
            return False
    return True


def _mean_embedding(model: Model, tokens) -> np.ndarray:
    return model.embedding[np.asarray(list(tokens), dtype=np.int64)].mean(axis=0)


def filter_semantic(sequence, bag: WordBag, model: Model, threshold: float = 0.2,
                    _bag_mean: np.ndarray | None = None) -> bool:
    if len(bag) == 0:
        raise ValueError("semantic filter needs a non-empty word bag")
    a = _mean_embedding(model, sequence)
    b = _bag_mean if _bag_mean is not None else _mean_embedding(model, sorted(bag.tokens))
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    cos = float(a @ b / denom) if denom > 0 else 0.0
    return cos >= threshold


# -- stage 2 -------------------------------------------------------------

def candidate_residuals(encoder: CandidateEncoder, seqs: np.ndarray, s_la: Subspace,
                        last_only: bool) -> np.ndarray:
    """Residual ratios of candidate layer-adapter inputs: (M,) if ``last_only`` else (M, L)."""
    seqs = np.asarray(seqs, dtype=np.int64)
    M, L = seqs.shape
    out = np.zeros((M,) if last_only else (M, L))
    step = max(1, _CHUNK_FLOATS // (s_la.ambient_dim * (1 if last_only else L)))
    for lo in range(0, M, step):
        hidden = encoder.hidden(seqs[lo:lo + step], last_only=last_only)
        d = hidden.shape[-1]
        out[lo:lo + step] = residual_ratios(s_la, hidden.reshape(-1, d)).reshape(hidden.shape[:-1])
    return out


_CHUNK_FLOATS = 1 << 21


def _round(x, decimals: int):
    return np.round(x, decimals)


class _Filters:
    def __init__(self, model, bag, config, corpus_stats):
        self.model = model
        self.bag = bag
        self.config = config
        self.stats = corpus_stats if config.filter_grammar else None
        self.bag_mean = _mean_embedding(model, bag.sorted()) if config.filter_semantic else None

    def accept(self, seq, w) -> bool:
        if self.config.filter_eicw and not filter_eicw(seq, w):
            return False
        if self.stats is not None and seq and not filter_grammar((seq[-1], w), self.stats):
            return False
        if self.bag_mean is not None and not filter_semantic(
                seq + (w,), self.bag, self.model, self.config.semantic_threshold, self.bag_mean):
            return False
        return True


def _prune(entries, width):
    entries.sort(key=lambda e: (-e[1], e[0]))
    return entries[:width]


def _beam_search(model, bag, s_la, config, corpus_stats, encoder=None):
    encoder = encoder or CandidateEncoder(model, bag.tokens)
    filters = _Filters(model, bag, config, corpus_stats)
    tokens = bag.sorted()
    end = config.end_token
    causal = config.mode == "unidirectional"
    max_len = min(config.max_len, model.config.max_seq_len)
    beam = [((), 1.0)]
    complete: dict[tuple, float] = {}
    for _ in range(max_len):
        children, parents = [], []
        for pi, (seq, _) in enumerate(beam):
            for w in tokens:
                if filters.accept(seq, w):
                    children.append(seq + (w,))
                    parents.append(pi)
        if not children:
            if causal:
                for seq, score in beam:
                    if seq:
                        complete[seq] = score
            break
        arr = np.array(children, dtype=np.int64)
        survived = np.zeros(len(beam), dtype=bool)
        new_beam = []
        if causal:
            r = candidate_residuals(encoder, arr, s_la, last_only=True)
            sims = _round(1.0 - r, config.score_decimals)
            for seq, pi, ri, sim in zip(children, parents, r, sims):
                if not ri < config.epsilon_la:
                    continue
                survived[pi] = True
                score = min(beam[pi][1], float(sim))
                if end is not None and seq[-1] == end:
                    complete[seq] = score
                else:
                    new_beam.append((seq, score))
            for (seq, score), ok in zip(beam, survived):
                if seq and not ok:
                    complete[seq] = score
        else:
            r = candidate_residuals(encoder, arr, s_la, last_only=False).max(axis=1)
            sims = _round(1.0 - r, config.score_decimals)
            for seq, ri, sim in zip(children, r, sims):
                ends = end is not None and seq[-1] == end
                if ri < config.epsilon_la and (end is None or ends):
                    complete[seq] = float(sim)
                if not ends:
                    new_beam.append((seq, float(sim)))
        beam = _prune(new_beam, config.beam_width)
        if not beam:
            break
    else:
        if causal:
            for seq, score in beam:
                complete[seq] = score
    return sorted(complete.items(), key=lambda e: (-e[1], e[0]))


def reconstruct(model: Model, update: GradientUpdate, config: AttackConfig,
                corpus_stats: CorpusStats | None = None) -> list[tuple[tuple, float]]:
    """Candidate sentences (token-id tuples) with span-similarity scores, best first."""
    if config.mode != model.config.attention_mode:
        raise ValueError(f"attack mode {config.mode!r} does not match model {model.config.attention_mode!r}")
    s_ea, s_la = build_attack_subspaces(update, config)
    bag = infer_word_bag(model, s_ea, config)
    if len(bag) == 0:
        return []
    return _beam_search(model, bag, s_la, config, corpus_stats)


def select_sentences(candidates, batch_size: int) -> list[tuple]:
    """Greedy pick of up to ``batch_size`` candidates, skipping repeats and prefixes of picks."""
    chosen: list[tuple] = []
    for seq, _ in candidates:
        if len(chosen) >= batch_size:
            break
        if any(c[:len(seq)] == seq for c in chosen):
            continue
        chosen.append(seq)
    return chosen


# -- end to end ----------------------------------------------------------

@dataclass
class AttackResult:
    """What the attacker learns, before any comparison with the truth."""

    word_bag: WordBag
    candidates: list
    sentences: list
    rank_ea: int
    rank_la: int
    timings: dict = field(default_factory=dict)


@dataclass
class AttackReport:
    bag_tokens: list
    bag_precision: float
    bag_recall: float
    rank_ea: int
    rank_la: int
    candidates: list
    sentences: list
    pairs: list
    rouge1: float
    rouge2: float
    timings: dict
    config: dict

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {"format": REPORT_FORMAT, "version": REPORT_VERSION, **asdict(self)}
        d["candidates"] = [{"tokens": list(s), "score": sc} for s, sc in self.candidates]
        d["sentences"] = [list(s) for s in self.sentences]
        if not include_timings:
            d["timings"] = {}
        return d

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True, allow_nan=True)


def run_attack(model: Model, update: GradientUpdate, config: AttackConfig,
               corpus_stats: CorpusStats | None = None) -> AttackResult:
    if config.mode != model.config.attention_mode:
        raise ValueError(f"attack mode {config.mode!r} does not match model {model.config.attention_mode!r}")
    t0 = time.perf_counter()
    s_ea, s_la = build_attack_subspaces(update, config)
    t1 = time.perf_counter()
    bag = infer_word_bag(model, s_ea, config)
    t2 = time.perf_counter()
    candidates = _beam_search(model, bag, s_la, config, corpus_stats) if len(bag) else []
    t3 = time.perf_counter()
    sentences = select_sentences(candidates, update.batch_size)
    return AttackResult(bag, candidates, sentences, s_ea.rank, s_la.rank,
                        {"subspaces": t1 - t0, "word_bag": t2 - t1, "search": t3 - t2, "total": t3 - t0})


def _strip(seq, end):
    return [t for t in seq if t != end]


def score_attack(result: AttackResult, ground_truth, config: AttackConfig) -> AttackReport:
    """Compare an :class:`AttackResult` with the true token sequences."""
    truth_tokens = {int(t) for seq in ground_truth for t in seq}
    bag = result.word_bag.tokens
    hits = len(bag & truth_tokens)
    precision = hits / len(bag) if bag else 0.0
    recall = hits / len(truth_tokens) if truth_tokens else 0.0
    end = config.end_token
    refs = [_strip(s, end) for s in ground_truth]
    cands = [_strip(s, end) for s in result.sentences]
    pairing = metrics.match_candidates(cands, refs)
    pairs = []
    for ri, ci in enumerate(pairing):
        entry = {"reference": ri, "candidate": ci, "rouge1": 0.0, "rouge2": 0.0}
        if ci is not None:
            for n in (1, 2):
                if len(refs[ri]) >= n:
                    entry[f"rouge{n}"] = metrics.rouge_n(cands[ci], refs[ri], n).recall_percent
                else:
                    entry[f"rouge{n}"] = None
        pairs.append(entry)
    return AttackReport(
        bag_tokens=sorted(bag),
        bag_precision=precision,
        bag_recall=recall,
        rank_ea=result.rank_ea,
        rank_la=result.rank_la,
        candidates=[(list(s), sc) for s, sc in result.candidates],
        sentences=[list(s) for s in result.sentences],
        pairs=pairs,
        rouge1=metrics.corpus_rouge(cands, refs, 1),
        rouge2=metrics.corpus_rouge(cands, refs, 2),
        timings=dict(result.timings),
        config=config.to_dict(),
    )


def attack_end_to_end(model: Model, update: GradientUpdate, ground_truth, config: AttackConfig,
                      corpus_stats: CorpusStats | None = None) -> AttackReport:
    result = run_attack(model, update, config, corpus_stats)
    return score_attack(result, ground_truth, config)


class UTRAttack(BaseEstimator):
    """Estimator form of the attack.

    ``fit(update)`` builds both spans and the word bag; ``predict()`` runs the
    beam search and returns up to ``update.batch_size`` sentences.
    """

    def __init__(self, model: Model | None = None, epsilon_ea: float = 1e-3, epsilon_la: float = 1e-3,
                 beam_width: int = 256, max_len: int = 8, end_token: int | None = None,
                 filter_eicw: bool = True, filter_grammar: bool = False, filter_semantic: bool = False,
                 semantic_threshold: float = 0.2, corpus_stats: CorpusStats | None = None):
        self.model = model
        self.epsilon_ea = epsilon_ea
        self.epsilon_la = epsilon_la
        self.beam_width = beam_width
        self.max_len = max_len
        self.end_token = end_token
        self.filter_eicw = filter_eicw
        self.filter_grammar = filter_grammar
        self.filter_semantic = filter_semantic
        self.semantic_threshold = semantic_threshold
        self.corpus_stats = corpus_stats

    def _config(self) -> AttackConfig:
        return AttackConfig(
            epsilon_ea=self.epsilon_ea, epsilon_la=self.epsilon_la, beam_width=self.beam_width,
            max_len=self.max_len, filter_eicw=self.filter_eicw, filter_grammar=self.filter_grammar,
            filter_semantic=self.filter_semantic, semantic_threshold=self.semantic_threshold,
            mode=self.model.config.attention_mode, end_token=self.end_token)

    def fit(self, update: GradientUpdate, y=None):
        if self.model is None:
            raise ValueError("UTRAttack needs the (public) model")
        self.config_ = self._config()
        self.subspace_ea_, self.subspace_la_ = build_attack_subspaces(update, self.config_)
        self.word_bag_ = infer_word_bag(self.model, self.subspace_ea_, self.config_)
        self.batch_size_ = update.batch_size
        return self

    def reconstruct(self):
        if not hasattr(self, "word_bag_"):
            raise ValueError("call fit(update) first")
        if len(self.word_bag_) == 0:
            return []
        return _beam_search(self.model, self.word_bag_, self.subspace_la_, self.config_, self.corpus_stats)

    def predict(self, update: GradientUpdate | None = None):
        if update is not None:
            self.fit(update)
        return select_sentences(self.reconstruct(), self.batch_size_)
