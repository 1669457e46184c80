import numpy as np
import pytest

from atlnet.active import AlState, QueryStrategy, al_pretrain_loop
from atlnet.data import SOURCE, TARGET, SampleSet
from atlnet.network import JointModel
from atlnet.numcore import make_rng
from atlnet.transfer import (REPORT_FIELDS, TransferConfig, TransferState, active_transfer, adapt_band_count, c_rem,
                             init_transfer, remove_source_batch, reset_head)
from toy import FT, FixedProbs, toy_problem, toy_scene


def test_c_rem_examples():
    p = [0.2, 0.5, 0.3]
    assert c_rem(p, p, 1) == 0.0
    assert c_rem([0.9, 0.1], [0.2, 0.8], 0) == pytest.approx(0.7, abs=1e-15)
    assert c_rem([0.5, 0.5], [1.0, 0.0], 0) == -0.5
    with pytest.raises(ValueError, match="out of range"):
        c_rem(p, p, 3)
    with pytest.raises(ValueError):
        c_rem([0.5, 0.5], p, 0)


def stub_state(crem, pixels=None, domains=None):
    """Two-class state where source sample i (label 0, p0 = [1, 0]) has removal score crem[i]."""
    n = len(crem)
    pixels = np.arange(100, 100 + n) if pixels is None else np.asarray(pixels)
    domains = np.zeros(n) if domains is None else np.asarray(domains)
    p_true = 1.0 - np.asarray(crem, dtype=np.float64)
    feats = np.stack([p_true, 1 - p_true], axis=1)
    training = SampleSet(feats, np.zeros(n), pixels, domains)
    cache = {int(p): np.array([1.0, 0.0]) for p, d in zip(pixels, domains) if d == SOURCE}
    return TransferState(training, SampleSet.empty(2), FixedProbs(2), cache)


def test_remove_nothing_when_s_minus_zero():
    state = stub_state([0.1, 0.2])
    assert remove_source_batch(state, 0) == [] and len(state.training) == 2


def test_remove_equal_scores_by_lowest_id():
    state = stub_state([0.3] * 5, pixels=[14, 11, 13, 10, 12])
    assert remove_source_batch(state, 2) == [10, 11]
    assert sorted(state.training.pixels.tolist()) == [12, 13, 14]


def test_remove_largest_c_rem():
    state = stub_state([0.1, 0.9, 0.3, 0.9, 0.0])
    assert remove_source_batch(state, 2) == [101, 103]


def test_target_samples_never_removed():
    state = stub_state([0.9, 0.1, 0.95, 0.2], domains=[TARGET, SOURCE, TARGET, SOURCE])
    removed = remove_source_batch(state, 5)
    assert sorted(removed) == [101, 103]
    assert state.training.count(TARGET) == 2 and state.training.count(SOURCE) == 0


def test_cached_probabilities_frozen():
    toy = toy_problem(0)
    state = init_transfer(toy.model, toy.train, toy.cand)
    row = next(iter(state.source_initial_probs.values()))
    with pytest.raises(ValueError):
        row[0] = 1.0


def transfer_setup(seed, shift=0.5):
    src, tgt = toy_scene(seed, shift=shift)
    source = toy_problem(seed, scene=src)
    target = toy_problem(seed, scene=tgt, domain=TARGET, model=source.model, split_seed=seed + 1000)
    return source, target


def run(source, target, cfg, seed=0, strategy="mclu"):
    return active_transfer(source.model, source.train, target.cand, target.test, target.oracle, cfg,
                           QueryStrategy(strategy), FT, make_rng(seed))


def test_infinite_epsilon_stops_after_first_check():
    source, target = transfer_setup(1)
    _, report, state = run(source, target, TransferConfig(t_plus=4, s_minus=2, epsilon=np.inf, max_iters=10))
    assert report.iterations == 1 and report.stopped_by == "epsilon"
    assert len(report.rows) == 2 and len(state.loss_history) == 1


def test_training_composition_and_fractions():
    source, target = transfer_setup(2)
    n_src = len(source.train)
    cfg = TransferConfig(t_plus=4, s_minus=3, epsilon=1e-12, max_iters=6)
    _, report, state = run(source, target, cfg)
    assert report.iterations == 6
    for i, row in enumerate(report.rows):
        assert row["source_count"] == max(n_src - 3 * i, 0)
        assert row["target_count"] == 4 * i
    frac = [r["source_count"] / (r["source_count"] + r["target_count"]) for r in report.rows]
    assert all(b <= a for a, b in zip(frac, frac[1:]))
    assert sum(len(r) for r in report.removed) == n_src - state.training.count(SOURCE)
    assert not set(state.training.keys.tolist()) & set(state.candidate.keys.tolist())


def test_cache_untouched_by_loop():
    source, target = transfer_setup(3)
    probs = source.model.predict_proba(source.train.features)
    _, _, state = run(source, target, TransferConfig(t_plus=4, s_minus=3, epsilon=1e-12, max_iters=3))
    for p, row in zip(source.train.pixels, probs):
        assert np.array_equal(state.source_initial_probs[int(p)], row)


def test_stop_rule_first_loss_below_epsilon():
    source, target = transfer_setup(4)
    cfg = TransferConfig(t_plus=4, s_minus=2, epsilon=1e-12, max_iters=6)
    _, report, state = run(source, target, cfg)
    losses = state.loss_history
    eps = float(np.sort(losses)[len(losses) // 2]) * (1 + 1e-9)
    expected = next(i for i, v in enumerate(losses, start=1) if v < eps)
    _, report2, _ = run(source, target, TransferConfig(t_plus=4, s_minus=2, epsilon=eps, max_iters=6))
    assert report2.iterations == expected and report2.stopped_by == "epsilon"
    assert all(v >= eps for v in losses[: expected - 1])


def test_exhausted_pool_warns():
    source, target = transfer_setup(5)
    target.cand = target.cand.subset(np.arange(6))
    _, report, _ = run(source, target, TransferConfig(t_plus=4, s_minus=1, epsilon=1e-12, max_iters=10))
    assert report.stopped_by == "exhausted" and report.iterations == 2
    assert report.warnings and "exhausted" in report.warnings[0]


def test_report_csv_layout():
    source, target = transfer_setup(6)
    _, report, _ = run(source, target, TransferConfig(t_plus=4, s_minus=2, epsilon=1e-12, max_iters=2))
    lines = report.csv().splitlines()
    assert lines[0] == ",".join(REPORT_FIELDS)
    assert len(lines) == 4 and lines[1].startswith("0,")


def test_identical_domains_without_removal_match_query_loop():
    diffs = []
    for seed in range(10):
        toy = toy_problem(seed)
        al = al_pretrain_loop(AlState(toy.train, toy.cand, toy.model), QueryStrategy("mclu", 4), toy.oracle, 3,
                              toy.test, FT, make_rng(seed))
        _, report, _ = active_transfer(toy.model, toy.train, toy.cand, toy.test, toy.oracle,
                                       TransferConfig(t_plus=4, s_minus=0, epsilon=1e-300, max_iters=3),
                                       QueryStrategy("mclu"), FT, make_rng(seed))
        diffs.append(abs(report.rows[-1]["oa"] - al.history[-1]["oa"]))
    assert max(diffs) <= 0.005


def test_band_adaptation_and_head_reset():
    toy = toy_problem(7)
    m = adapt_band_count(toy.model, 3)
    assert m.spectral_dim == 3 and m.input_dim == toy.model.input_dim - 2
    x = toy.test.features
    cut = np.concatenate([x[:, :3], x[:, 5:]], axis=1)
    w = toy.model.spectral.encoders[0].w
    manual = toy.model.copy()
    manual.spectral.encoders[0].w = np.concatenate([w[:, :3], np.zeros((w.shape[0], 2))], axis=1)
    assert np.allclose(m.predict_proba(cut), manual.predict_proba(np.concatenate([x[:, :3], np.zeros((len(x), 2)),
                                                                                  x[:, 5:]], axis=1)))
    assert adapt_band_count(toy.model, 9) is toy.model
    r = reset_head(toy.model, 6)
    assert isinstance(r, JointModel) and r.class_count == 6
    assert np.allclose(r.predict_proba(x), 1 / 6)


@pytest.mark.parametrize("kw", [{"t_plus": 0}, {"s_minus": -1}, {"epsilon": 0.0}, {"max_iters": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TransferConfig(**kw)
