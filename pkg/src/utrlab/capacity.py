"""How many distinct tokens the embedding-adapter span can give back.

The span of the down-projection ratios is bounded by the bottleneck width,
by the number of distinct inputs and by the hidden size; recovered tokens are
those the word-bag test accepts.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .data import synthetic_batch
from .fedsim import ClientDataset, GradientUpdate, client_round
from .toymodel import Model, ModelConfig, init_model
from .utr import AttackConfig, NoGradientSignal, build_attack_subspaces, infer_word_bag
from .subspace import Subspace

CSV_COLUMNS = ("batch_size", "round", "n", "rank", "k", "kmax")


def theoretical_kmax(d_bottleneck: int, n: int, d_hidden: int) -> int:
    for name, v in (("d_bottleneck", d_bottleneck), ("n", n), ("d_hidden", d_hidden)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer; got {v}")
    return int(min(d_bottleneck, n, d_hidden))


@dataclass(frozen=True)
class CapacityReport:
    d_bottleneck: int
    d_hidden: int
    true_unique_tokens: int
    subspace_rank: int
    recovered_tokens: int
    theoretical_kmax: int
    batch_size: int = 0
    round: int = 0

    @property
    def satisfies_bounds(self) -> bool:
        return self.recovered_tokens <= self.subspace_rank <= self.theoretical_kmax

    def row(self) -> dict:
        return {"batch_size": self.batch_size, "round": self.round, "n": self.true_unique_tokens,
                "rank": self.subspace_rank, "k": self.recovered_tokens, "kmax": self.theoretical_kmax}

    def to_dict(self) -> dict:
        return asdict(self)


def measure_capacity(model: Model, update: GradientUpdate, ground_truth_tokens,
                     config: AttackConfig | None = None) -> CapacityReport:
    """Word-bag recovery on an undefended update.

    ``ground_truth_tokens`` may be token ids or sequences of them; only the
    distinct ids matter.  A silent update yields rank 0 and k = 0.
    """
    cfg = model.config
    config = config or AttackConfig(mode=cfg.attention_mode)
    truth = set()
    for t in ground_truth_tokens:
        truth.update(int(x) for x in np.atleast_1d(t))
    if not truth:
        raise ValueError("no ground-truth tokens given")
    n = len(truth)
    try:
        s_ea, _ = build_attack_subspaces(update, config)
    except NoGradientSignal:
        s_ea = Subspace.empty(cfg.d_hidden)
    bag = infer_word_bag(model, s_ea, config)
    k = len(bag.tokens & truth)
    return CapacityReport(cfg.d_bottleneck, cfg.d_hidden, n, s_ea.rank, k,
                          theoretical_kmax(cfg.d_bottleneck, n, cfg.d_hidden))


def _point(args) -> CapacityReport:
    model_config, batch_size, rnd, seed, sentence_len, epsilon = args
    model = init_model(model_config)
    rng = np.random.default_rng([seed, batch_size, rnd])
    batch = synthetic_batch(rng, model_config.vocab_size, batch_size, sentence_len)
    labels = [int(v) for v in rng.integers(0, 2, size=batch_size)]
    update = client_round(model, ClientDataset(batch, labels), range(batch_size), round_id=rnd)
    config = AttackConfig(mode=model_config.attention_mode, epsilon_ea=epsilon)
    rep = measure_capacity(model, update, batch, config)
    return CapacityReport(**{**asdict(rep), "batch_size": batch_size, "round": rnd})


def capacity_sweep(model_config: ModelConfig, batch_sizes, rounds: int, seed: int = 0,
                   sentence_len: int | None = None, epsilon: float = 1e-3,
                   n_jobs: int = 1) -> list[CapacityReport]:
    """One report per (batch size, round), in that order.

    Each point draws its batch from a generator keyed on (seed, batch size,
    round), so the output does not depend on ``n_jobs``.
    """
    sizes = list(batch_sizes)
    if not sizes or any(int(b) != b or b <= 0 for b in sizes):
        raise ValueError(f"batch sizes must be positive integers; got {sizes}")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    sentence_len = sentence_len or model_config.max_seq_len
    jobs = [(model_config, int(b), r, seed, sentence_len, epsilon) for b in sizes for r in range(rounds)]
    if n_jobs == 1:
        return [_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_point, jobs))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
