import json

import numpy as np
import pytest
from sklearn.base import clone

from oracles import brute_force_candidates, micro_instance, naive_residual
from utrlab.fedsim import ClientDataset, client_round
from utrlab.subspace import orthonormalize
from utrlab.toymodel import AdapterGradients, ModelConfig, adapter_gradients, forward, init_model
from utrlab.utr import (
    AttackConfig, CorpusStats, NoGradientSignal, UTRAttack, WordBag, attack_end_to_end, build_attack_subspaces,
    compute_rwbg, filter_eicw, filter_grammar, filter_semantic, infer_word_bag, reconstruct, run_attack,
    score_attack, select_sentences,
)


def toy(mode="bidirectional", **kw):
    return init_model(ModelConfig(**{"vocab_size": 200, "d_hidden": 64, "reduction_factor": 2,
                                     "attention_mode": mode, "seed": 0, **kw}))


def batch_update(model, batch, round_id=0):
    return client_round(model, ClientDataset(batch, [i % 2 for i in range(len(batch))]), range(len(batch)),
                        round_id)


BATCH = [[5, 17, 42, 199], [88, 3, 120, 199], [7, 64, 199]]


def test_rwbg_single_position_recovers_input():
    for mode in ("bidirectional", "unidirectional"):
        m = toy(mode)
        seq = [31]
        g = adapter_gradients(m, [seq], [1])
        _, tr = forward(m, [seq], [1])
        for name, inputs in (("embedding", tr.embedding_adapter_inputs[0]),
                             ("layer", tr.layer_adapter_inputs[0])):
            rw = compute_rwbg(g[name])
            assert rw.neurons
            err = np.abs(rw.vectors - inputs[0]).max() / np.abs(inputs[0]).max()
            assert err <= 1e-8


def test_rwbg_skips_dead_neurons():
    g = AdapterGradients([np.ones((3, 4)), np.ones((4, 3))], [np.array([2.0, 0.0, 1e-20]), np.zeros(4)])
    rw = compute_rwbg(g)
    assert rw.neurons == [0]
    assert [j for j, _ in rw.skipped_neurons] == [1, 2]
    np.testing.assert_allclose(rw.vectors, [[0.5] * 4])
    with pytest.raises(ValueError):
        compute_rwbg(AdapterGradients([np.ones((3, 4)), np.ones((4, 3))], [np.ones(2), np.zeros(4)]))


def test_spans_contain_adapter_inputs():
    m = toy()
    update = batch_update(m, BATCH)
    s_ea, s_la = build_attack_subspaces(update, AttackConfig())
    _, tr = forward(m, BATCH, [0, 1, 0])
    for x, z in zip(tr.embedding_adapter_inputs, tr.layer_adapter_inputs):
        for row in x:
            assert naive_residual(s_ea.basis, row) < 1e-8
        for row in z:
            assert naive_residual(s_la.basis, row) < 1e-8
    assert s_ea.rank == len({t for s in BATCH for t in s})


def test_no_signal_raises():
    m = toy()
    update = batch_update(m, BATCH)
    zero = update.with_tensors([np.zeros_like(t) for t in update.tensors()])
    with pytest.raises(NoGradientSignal):
        build_attack_subspaces(zero, AttackConfig())


def test_word_bag_is_exact_below_capacity():
    m = toy()
    bag = infer_word_bag(m, build_attack_subspaces(batch_update(m, BATCH), AttackConfig())[0], AttackConfig())
    assert bag.tokens == {t for s in BATCH for t in s}
    assert all(r < 1e-3 for r in bag.per_token_residual.values())
    assert len(infer_word_bag(m, orthonormalize([], ambient_dim=64), AttackConfig())) == 0
    with pytest.raises(ValueError):
        infer_word_bag(m, orthonormalize([], ambient_dim=8), AttackConfig())


def test_word_bag_with_positions_before_adapter():
    m = toy(positional_encoding="additive_before_embedding_adapter")
    batch = [[9, 4, 199], [4, 9, 199]]
    bag = infer_word_bag(m, build_attack_subspaces(batch_update(m, batch), AttackConfig())[0], AttackConfig())
    assert bag.tokens == {4, 9, 199}
    assert sorted(bag.positions[9]) == [0, 1] and bag.positions[199] == [2]


def test_filters():
    assert filter_eicw((1, 2), 3) and not filter_eicw((1, 2), 2) and filter_eicw((), 2)
    stats = CorpusStats.from_sequences([[1, 2, 3], [2, 3]])
    assert filter_grammar((1, 2, 3), stats)
    assert not filter_grammar((3, 1), stats)
    assert filter_grammar((3, 1), None)
    m = toy()
    bag = WordBag(frozenset([1, 2, 3]), {})
    assert filter_semantic((1, 2, 3), bag, m, threshold=0.99)
    assert not filter_semantic((1,), bag, m, threshold=1.01)
    with pytest.raises(ValueError):
        filter_semantic((1,), WordBag(frozenset(), {}), m)


def test_attack_config_validation():
    for bad in ({"epsilon_ea": 0}, {"beam_width": 0}, {"max_len": 0}, {"bias_grad_floor": -1}, {"mode": "x"}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


@pytest.mark.parametrize("mode", ["bidirectional", "unidirectional"])
def test_reconstructs_small_batch(mode):
    m = toy(mode)
    cfg = AttackConfig(mode=mode, end_token=199)
    report = attack_end_to_end(m, batch_update(m, BATCH), BATCH, cfg)
    assert report.rouge1 == report.rouge2 == 100.0
    assert sorted(report.sentences) == sorted(BATCH)
    assert report.bag_precision == report.bag_recall == 1.0


def test_reconstruct_without_end_marker():
    m = toy("unidirectional")
    batch = [[5, 17, 42], [88, 3, 120]]
    cfg = AttackConfig(mode="unidirectional")
    report = attack_end_to_end(m, batch_update(m, batch), batch, cfg)
    assert report.rouge1 == 100.0


def test_mode_mismatch():
    m = toy("bidirectional")
    with pytest.raises(ValueError):
        reconstruct(m, batch_update(m, BATCH), AttackConfig(mode="unidirectional"))
    with pytest.raises(ValueError):
        run_attack(m, batch_update(m, BATCH), AttackConfig(mode="unidirectional"))


def test_select_sentences():
    cands = [((1, 2, 3), 1.0), ((1, 2), 0.9), ((1, 2, 3), 0.8), ((4,), 0.7), ((5,), 0.6)]
    assert select_sentences(cands, 2) == [(1, 2, 3), (4,)]
    assert select_sentences(cands, 10) == [(1, 2, 3), (4,), (5,)]
    assert select_sentences([], 3) == []


@pytest.mark.parametrize("mode", ["bidirectional", "unidirectional"])
def test_scale_invariance(mode):
    m = toy(mode)
    update = batch_update(m, BATCH)
    cfg = AttackConfig(mode=mode, end_token=199)
    base = score_attack(run_attack(m, update, cfg), BATCH, cfg).to_json(include_timings=False)
    for c in (1e-3, 1e3):
        other = score_attack(run_attack(m, update.scaled(c), cfg), BATCH, cfg).to_json(include_timings=False)
        assert other == base


def test_report_json_shape():
    m = toy()
    cfg = AttackConfig(end_token=199)
    report = attack_end_to_end(m, batch_update(m, BATCH), BATCH, cfg)
    d = json.loads(report.to_json())
    assert d["format"] == "utrlab-attack-report" and d["version"] == 1
    assert set(d["timings"]) == {"subspaces", "word_bag", "search", "total"}
    assert json.loads(report.to_json(include_timings=False))["timings"] == {}
    assert d["config"]["end_token"] == 199
    assert {p["reference"] for p in d["pairs"]} == {0, 1, 2}
    assert all(isinstance(c["tokens"], list) for c in d["candidates"])


def test_utr_attack_estimator():
    m = toy()
    update = batch_update(m, BATCH)
    est = UTRAttack(model=m, end_token=199)
    assert clone(est).get_params()["end_token"] == 199
    assert sorted(est.predict(update)) == sorted(tuple(s) for s in BATCH)
    assert est.word_bag_.tokens == {t for s in BATCH for t in s}
    with pytest.raises(ValueError):
        UTRAttack(model=m).reconstruct()
    with pytest.raises(ValueError):
        UTRAttack().fit(update)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("mode", ["bidirectional", "unidirectional"])
def test_beam_matches_brute_force(seed, mode):
    model, update, batch, config = micro_instance(seed, mode)
    s_ea, s_la = build_attack_subspaces(update, config)
    bag = infer_word_bag(model, s_ea, config)
    ours = {s for s, _ in reconstruct(model, update, config)}
    assert ours == brute_force_candidates(model, bag.tokens, s_la, config)
    assert {tuple(s) for s in batch} <= ours
