import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from daskt.affect_features import (PopulationStats, ZeroDurationWarning, confidence, effort, interest, l2_normalize,
                                   maf, population_stats, raw_factors)
from daskt.ingest import build_sequences

from conftest import rec, seq


def stats_for(kcs=("k1",), acc=0.0, rt=0.0, att=0.0, pr=0.0, it=0.0):
    n = len(kcs)
    return PopulationStats(kcs=list(kcs), acc_mean=np.full(n, acc), rt_mean=np.full(n, rt), att_mean=np.full(n, att),
                           kc_counts=np.ones(n, dtype=np.int64), pr_mean=pr, it_mean=it, n_units=1)


def test_two_point_accuracy_mean():
    s1 = seq([rec(student="a", correct=1, start=0), rec(student="a", correct=1, start=10)])
    s2 = seq([rec(student="b", correct=1, start=0), rec(student="b", correct=0, start=10)])
    stats = population_stats([s1, s2], standardize=False)
    assert stats.acc_mean[0] == 0.75


def test_unseen_kc_flagged_and_zero():
    stats = population_stats([seq([rec(kc="k1")])], kcs=["k1", "k2"], standardize=False)
    assert stats.unseen.tolist() == [False, True]
    assert stats.acc_mean[1] == 0 and stats.rt_mean[1] == 0 and stats.att_mean[1] == 0


def test_population_stats_errors_and_determinism():
    with pytest.raises(ValueError):
        population_stats([])
    seqs = [seq([rec(student=s, start=t * 1000, correct=(t + i) % 2, rt=100.0 * (t + 1)) for t in range(5)])
            for i, s in enumerate("abc")]
    a, b = population_stats(seqs), population_stats(seqs)
    assert a.to_dict() == b.to_dict()
    assert PopulationStats.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_confidence_deltas():
    stats = stats_for(acc=0.5, rt=4000.0)
    records = [rec(correct=c, start=i) for i, c in enumerate([1, 1, 0, 1])]
    d_acc, _ = confidence(records, stats)
    assert d_acc[0] == 0.25
    _, d_rt = confidence([rec(rt=10_000.0)], stats)
    assert d_rt[0] == 6000.0


def test_confidence_centered_and_absent_kc():
    stats = stats_for(kcs=("k1", "k2"), acc=0.5, rt=1000.0)
    records = [rec(correct=1, rt=500.0, start=0), rec(correct=0, rt=1500.0, start=5)]
    d_acc, d_rt = confidence(records, stats)
    assert d_acc.tolist() == [0.0, 0.0] and d_rt.tolist() == [0.0, 0.0]


def test_interest_delta():
    # 10 answers spread over 10 000 s; rates per ms
    records = [rec(start=i * 1_000_000, rt=0.0, end=i * 1_000_000 + (1_000_000 if i == 9 else 0))
               for i in range(10)]
    stats = stats_for(pr=0.0005 / 1000)
    assert interest(records, stats) == pytest.approx(0.0005 / 1000, rel=1e-12)
    stats_eq = stats_for(pr=10 / 10_000_000)
    assert interest(records, stats_eq) == 0.0


def test_zero_duration_interest_warns():
    with pytest.warns(ZeroDurationWarning):
        assert interest([rec(start=5, rt=0.0)], stats_for(pr=1.0)) == 0.0


def test_effort_deltas():
    stats = stats_for(att=3.0, it=7.0)
    records = [rec(att=a, start=t) for a, t in zip([1, 2, 1], [0, 2, 5])]
    d_att, d_it = effort(records, stats)
    assert d_att[0] == 1.0 and d_it == -2.0
    _, single = effort([rec(start=3)], stats)
    assert single == -7.0


def test_effort_centered():
    stats = stats_for(att=4.0, it=5.0)
    d_att, d_it = effort([rec(att=2, start=0), rec(att=2, start=5)], stats)
    assert d_att[0] == 0.0 and d_it == 0.0


def test_normalization_examples():
    v = np.zeros(8)
    v[:2] = [3, 4]
    out = l2_normalize(v)
    assert out[0] == pytest.approx(0.6, abs=1e-15) and out[1] == pytest.approx(0.8, abs=1e-15)
    assert np.all(out[2:] == 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.all(l2_normalize(np.zeros(5)) == 0)


def test_factor_layout():
    stats = stats_for(kcs=("k1", "k2", "k3"))
    v = maf([rec(kc="k2", start=0), rec(kc="k2", start=100)], stats, standardize=False)
    assert v.values.shape == (11,) and v.normalized
    assert v.confidence.shape == (6,) and v.effort.shape == (4,)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_norm_is_zero_or_one(x):
    n = np.linalg.norm(l2_normalize(x))
    assert abs(n) < 1e-9 or abs(n - 1) < 1e-9


record_st = st.builds(
    lambda kc, c, rt, att: rec(kc=kc, correct=c, rt=float(rt), att=att, start=0),
    st.sampled_from(["k1", "k2", "k3"]), st.integers(0, 1), st.integers(0, 5000), st.integers(0, 6),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(record_st, min_size=1, max_size=12), st.randoms())
def test_factors_invariant_to_order_with_equal_stamps(records, shuffler):
    stats = stats_for(kcs=("k1", "k2", "k3"), acc=0.4, rt=900.0, att=1.5, pr=1e-3, it=10.0)
    shuffled = list(records)
    shuffler.shuffle(shuffled)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroDurationWarning)
        assert np.array_equal(raw_factors(records, stats), raw_factors(shuffled, stats))


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, min_size=1, max_size=8), st.lists(record_st, min_size=1, max_size=8))
def test_disjoint_kc_blocks_combine(left, right):
    kcs = ["k1", "k2", "k3"]
    left = [r for r in left if r.kc_id != "k3"]
    right = [r for r in right if r.kc_id == "k3"]
    stats = stats_for(kcs=kcs, acc=0.3, rt=50.0, att=2.0)
    both = confidence(left + right, stats)
    a, b = confidence(left, stats), confidence(right, stats)
    for whole, x, y in zip(both, a, b):
        assert np.array_equal(whole, np.where(np.arange(3) == 2, y, x))
    assert np.array_equal(effort(left + right, stats)[0], np.where(np.arange(3) == 2, effort(right, stats)[0],
                                                                   effort(left, stats)[0]))


def test_stats_ignore_test_students(rng):
    def student(sid, seed):
        g = np.random.default_rng(seed)
        return [rec(student=sid, kc=f"k{g.integers(3)}", correct=int(g.integers(2)), start=i * 1000 + int(g.integers(500)),
                    rt=float(g.integers(100, 9000)), att=int(g.integers(1, 4))) for i in range(15)]

    train = [r for i in range(4) for r in student(f"tr{i}", i)]
    test = student("te0", 99)
    perturbed = [rec(student="te0", kc="k0", correct=1, start=i, rt=1.0, att=9) for i in range(3)]
    seqs_a = build_sequences(train + test, 100)
    seqs_b = build_sequences(train + perturbed, 100)
    pick = lambda seqs: [s for s in seqs if s.student_id.startswith("tr")]  # noqa: E731
    a, b = population_stats(pick(seqs_a)), population_stats(pick(seqs_b))
    assert a.to_dict() == b.to_dict()
