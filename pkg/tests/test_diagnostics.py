import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outlier_lab.corpus import CLS, PAD, SEP, FrequencyTable, estimate_frequency, mask_batch
from outlier_lab.model import AblationMask, encode, init_parameters
from outlier_lab.diagnostics import (PearsonAccumulator, attention_column_means, attention_query_correlation,
                                     checkpoint_dynamics, freq_magnitude_correlation, generation_frequency_shift,
                                     pearson, spearman, write_correlation_csv, write_dynamics_csv, write_shift_csv)
from outlier_lab.train import Checkpoint, TrainConfig

from planted import CFG, PLANT_DIM, planted_model


def brute_pearson(xs, ys):
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = math.fsum((a - mx) ** 2 for a in xs)
    syy = math.fsum((b - my) ** 2 for b in ys)
    return sxy / math.sqrt(sxx * syy)


def noisy(cfg, seed=0):
    p = init_parameters(cfg, np.float64)
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0, 0.3, v.shape) for k, v in p.items()}


def rows_for(cfg, n=12, seed=0, pad=True):
    rng = np.random.default_rng(seed)
    rows = rng.integers(5, cfg.vocab_size, (n, cfg.max_seq_len))
    rows[:, 0] = CLS
    rows[:, 4] = SEP
    if pad:
        rows[::3, -2:] = PAD
        rows[::3, -3] = SEP
    return rows


def test_pearson_examples():
    xs = np.arange(10.0)
    assert pearson(xs, 2 * xs + 1) == 1.0
    assert pearson(xs, -xs) == -1.0
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619659, abs=1e-12)


def test_pearson_undefined_and_errors():
    assert pearson([1.0, 1.0, 1.0], [1, 2, 3]) is None
    assert pearson([0.1] * 7, np.arange(7)) is None
    assert pearson([1, 2, 3], [5, 5, 5]) is None
    assert pearson([1.0], [2.0]) is None
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])


def test_pearson_matches_brute_force():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 200))
        x = rng.normal(size=n) * rng.uniform(0.1, 100)
        y = 0.3 * x + rng.normal(size=n) + rng.uniform(-50, 50)
        worst = max(worst, abs(pearson(x, y) - brute_pearson(x.tolist(), y.tolist())))
    assert worst < 1e-12
    x = rng.normal(size=100_000)
    y = x + rng.normal(size=100_000)
    assert abs(pearson(x, y) - brute_pearson(x.tolist(), y.tolist())) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=3, max_size=50), st.floats(1e-3, 1e3),
       st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_pearson_affine_invariance(xs, a, c, seed):
    xs = np.array(xs)
    ys = xs * 0.5 + np.random.default_rng(seed).normal(size=xs.size) * (np.ptp(xs) + 1)
    r = pearson(xs, ys)
    # the offset is tied to the spread; a much larger one loses the data to rounding before pearson sees it
    r2 = pearson(a * xs + c * a * (np.ptp(xs) + abs(xs.mean())), ys)
    if r is None:
        return
    assert r2 is not None and abs(r2 - r) < 1e-9


def test_spearman_monotone():
    x = np.arange(1, 30.0)
    assert spearman(x, np.exp(x / 3)) == 1.0
    assert spearman([1, 1, 1], [1, 2, 3]) is None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 60), min_size=1, max_size=6))
def test_accumulator_chunking(seed, chunks):
    rng = np.random.default_rng(seed)
    n = sum(chunks)
    x = rng.normal(size=(n, 3)) * [1, 10, 1e-3] + [0, 5, 1e3]
    y = rng.normal(size=n)
    acc = PearsonAccumulator((3,))
    start = 0
    for c in chunks:
        acc.add(x[start:start + c], y[start:start + c, None])
        start += c
    r = acc.result()
    for j in range(3):
        want = pearson(x[:, j], y)
        if want is None:
            assert np.isnan(r[j])
        else:
            assert abs(r[j] - want) < 1e-10
    assert acc.n == n


def test_accumulator_constant_column_undefined():
    acc = PearsonAccumulator((2,))
    for _ in range(3):
        acc.add(np.column_stack([np.full(4, 0.1), np.arange(4.0)]), np.arange(4.0)[:, None])
    r = acc.result()
    assert np.isnan(r[0]) and r[1] == pytest.approx(1.0)


def _freq(rows):
    return estimate_frequency(rows, include_special=True)


def log_freq(freq, vocab_size):
    with np.errstate(divide="ignore"):  # PAD and unseen tokens have zero frequency and are never selected
        return np.log10(freq.relative_array(vocab_size))


def test_freq_correlation_matches_manual_pairs():
    cfg = CFG
    p = noisy(cfg)
    rows = rows_for(cfg)
    freq = _freq(rows)
    t = freq_magnitude_correlation(p, cfg, rows, freq, [3, 9], (False, True), n_control=4, seed=1)
    trace, _ = encode(p, cfg, rows)
    logf = log_freq(freq, cfg.vocab_size)
    for s in (False, True):
        sel = rows != PAD if s else (rows != PAD) & (rows != CLS) & (rows != SEP)
        for l in (1, 2):
            for d in (3, 9):
                r, n = t.entries[(l, d, s)]
                assert n == sel.sum()
                assert r == pytest.approx(brute_pearson(np.abs(trace.hidden_states[l][sel][:, d]).tolist(),
                                                        logf[rows[sel]].tolist()), abs=1e-10)
    assert t.special_pairs == 0
    assert len(t.control_dims) == 4 and not {3, 9} & set(t.control_dims)
    assert t.control_mean_abs(1) == pytest.approx(np.mean([abs(t.r(1, d)) for d in t.control_dims]))
    # toggling specials adds exactly the CLS/SEP pairs
    assert t.entries[(1, 3, True)][1] - t.entries[(1, 3, False)][1] == ((rows == CLS) | (rows == SEP)).sum()


def test_freq_correlation_per_type_and_spearman():
    cfg = CFG
    p = noisy(cfg)
    rows = rows_for(cfg, n=30)
    freq = _freq(rows)
    t = freq_magnitude_correlation(p, cfg, rows, freq, [3], False, n_control=2, per_type=True)
    trace, _ = encode(p, cfg, rows)
    sel = (rows != PAD) & (rows != CLS) & (rows != SEP)
    toks = rows[sel]
    mags = np.abs(trace.hidden_states[2][sel][:, 3])
    types = np.unique(toks)
    mean_mag = [mags[toks == k].mean() for k in types]
    logf = log_freq(freq, cfg.vocab_size)[types]
    assert t.r(2, 3) == pytest.approx(brute_pearson(mean_mag, logf.tolist()), abs=1e-10)
    assert t.entries[(2, 3, False)][1] == types.size
    ts = freq_magnitude_correlation(p, cfg, rows, freq, [3], False, n_control=2, method="spearman")
    assert ts.r(2, 3) == pytest.approx(spearman(mags, log_freq(freq, cfg.vocab_size)[toks]))


def test_freq_correlation_all_dims_ablated_undefined():
    cfg = CFG
    rows = rows_for(cfg)
    t = freq_magnitude_correlation(noisy(cfg), cfg, rows, _freq(rows), [0, 1], (False, True), n_control=3,
                                   ablation=AblationMask(range(cfg.hidden_dim)))
    assert all(r is None for r, _ in t.entries.values())


def test_freq_correlation_rejects_bad_input():
    cfg = CFG
    with pytest.raises(ValueError):
        freq_magnitude_correlation(noisy(cfg), cfg, np.zeros((0, 8), int), FrequencyTable({5: 1}, 1), [0])
    with pytest.raises(ValueError):
        freq_magnitude_correlation(noisy(cfg), cfg, rows_for(cfg), _freq(rows_for(cfg)), [16])


def test_column_means_sum_to_one():
    rng = np.random.default_rng(0)
    A = rng.random((3, 2, 6, 6))
    valid = np.ones((3, 6), bool)
    valid[1, 4:] = False
    A = np.where(valid[:, None, None, :], A, 0.0)
    A /= A.sum(axis=-1, keepdims=True)
    cm = attention_column_means(A, valid)
    n_rows = valid.sum(axis=1)
    np.testing.assert_allclose((cm * n_rows[:, None, None]).sum(axis=-1), n_rows[:, None] * np.ones((1, 2)))


def test_attention_correlation_manual():
    cfg = CFG
    p = noisy(cfg, seed=2)
    rows = rows_for(cfg)
    t = attention_query_correlation(p, cfg, rows, [3], (False, True), n_control=2)
    trace, _ = encode(p, cfg, rows)
    valid = rows != PAD
    for s in (False, True):
        sel = valid if s else valid & (rows != CLS) & (rows != SEP)
        for l in (1, 2):
            A = trace.attention_maps[l - 1]
            for h in range(cfg.n_heads):
                y = [A[b, h, valid[b], j].mean() for b, j in zip(*np.nonzero(sel))]
                x = np.abs(trace.hidden_states[l][sel][:, 3])
                assert t.r(l, h, 3, s) == pytest.approx(brute_pearson(x.tolist(), y), abs=1e-10)


def test_attention_correlation_degenerate_cases():
    cfg = CFG
    only_cls = np.full((5, 8), PAD)
    only_cls[:, 0] = CLS
    t = attention_query_correlation(noisy(cfg), cfg, only_cls, [3], True, n_control=2)
    assert all(r is None for r, _ in t.entries.values())
    # uniform attention over equal-length rows gives constant column means
    _, p, _, _ = planted_model()
    rows = rows_for(cfg, pad=False)
    t = attention_query_correlation(p, cfg, rows, [PLANT_DIM], (False, True), n_control=3)
    assert all(r is None for r, _ in t.entries.values())


def test_generation_shift_conservation_and_identity():
    cfg = CFG
    p = noisy(cfg)
    rows = rows_for(cfg, n=40)
    freq = _freq(rows)
    g = generation_frequency_shift(p, cfg, rows, {"empty": [], "minus_3": [3], "all": range(16)}, freq, 0.3,
                                   seed=4)
    n = mask_batch(rows, 0.3, [4, 29], cfg.vocab_size).n_targets
    assert g.n_predicted == n > 0
    for c in g.counts.values():
        assert c.sum() == n and c.size == 20
    assert np.array_equal(g.counts["empty"], g.counts["full"])
    assert g.edges[0] == -6 and g.edges[-1] == 0 and len(g.edges) == 21
    assert list(g.counts) == ["full", "empty", "minus_3", "all"]
    with pytest.raises(ValueError):
        generation_frequency_shift(p, cfg, rows, {}, freq, bins=1)
    with pytest.raises(ValueError):
        generation_frequency_shift(p, cfg, rows, {"full": []}, freq)


def test_dynamics_rows():
    cfg, p, data, batch = planted_model(n_rows=64)
    ft = TrainConfig(total_steps=2, warmup_steps=1, batch_size=16)
    cks = [Checkpoint(cfg, TrainConfig(), p, None, s) for s in (0, 10)]
    empty = checkpoint_dynamics(cks, data, data, batch, [], ft)
    assert empty.conditions() == ["full", "minus_all"]
    for step in (0, 10):
        (s1, a1, m1), = [r for r in empty.series("full") if r[0] == step]
        (s2, a2, m2), = [r for r in empty.series("minus_all") if r[0] == step]
        assert (a1, m1) == (a2, m2)
    two = checkpoint_dynamics(cks[:1], data, data, batch, [PLANT_DIM, 2], ft)
    assert two.conditions() == ["full", f"minus_2", f"minus_{PLANT_DIM}", "minus_all"]
    with pytest.raises(ValueError):
        checkpoint_dynamics(cks[::-1], data, data, batch, [], ft)
    with pytest.raises(ValueError):
        checkpoint_dynamics([], data, data, batch, [], ft)


def test_dynamics_untrained_is_near_chance():
    cfg, _, data, batch = planted_model(n_rows=400)
    ck = Checkpoint(cfg, TrainConfig(), init_parameters(cfg), None, 0)
    series = checkpoint_dynamics([ck], data, data, batch, [3], TrainConfig(total_steps=0, warmup_steps=0))
    for _, _, acc, _ in series.rows:
        assert 35 <= acc <= 65


def test_csv_formats(tmp_path):
    cfg = CFG
    rows = rows_for(cfg)
    freq = _freq(rows)
    p = noisy(cfg)
    t = freq_magnitude_correlation(p, cfg, rows, freq, [3], False, n_control=2,
                                   ablation=AblationMask([3], [1]))
    write_correlation_csv(tmp_path / "f.csv", t)
    with open(tmp_path / "f.csv") as fh:
        rs = list(csv.DictReader(fh))
    assert list(rs[0]) == ["layer", "head", "dim", "include_special", "r", "n"]
    undefined = [r for r in rs if r["layer"] == "1" and r["dim"] == "3"]
    assert undefined[0]["r"] == "" and undefined[0]["head"] == ""
    assert any(r["dim"] == "random_mean_abs" for r in rs)
    g = generation_frequency_shift(p, cfg, rows, {"minus_3": [3]}, freq)
    write_shift_csv(tmp_path / "g.csv", g)
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "condition,bin_lo,bin_hi,count"
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 1 + 2 * 20
    from outlier_lab.diagnostics import DynamicsSeries
    write_dynamics_csv(tmp_path / "d.csv", DynamicsSeries([(0, "full", 50.0, 3.0)]))
    assert (tmp_path / "d.csv").read_text() == "step,condition,probe_acc,mlm_loss\n0,full,50,3\n"
