import numpy as np
import pytest

from app_tpp import synth
from app_tpp.synth import HawkesSpec, MarkovMarkSpec, PoissonSpec, SelfCorrectingSpec, SpecError


def _gaps(data):
    return np.concatenate([s.inter_arrivals for s in data])


def test_poisson_mean_within_3se():
    d = synth.gen_poisson(PoissonSpec(2.0), 200, 100, seed=11)
    gaps = _gaps(d)
    se = gaps.std(ddof=1) / np.sqrt(gaps.size)
    assert abs(gaps.mean() - 0.5) < 3 * se


def test_poisson_single_category_and_marks():
    d = synth.gen_poisson(PoissonSpec(1.0), 5, 20, seed=0)
    assert all((s.categories == 0).all() for s in d)
    d = synth.gen_poisson(PoissonSpec(1.0, 3, (0.5, 0.5, 0.0)), 50, 20, seed=0)
    cats = np.concatenate([s.categories for s in d])
    assert set(cats.tolist()) == {0, 1}


@pytest.mark.parametrize(
    "gen, spec",
    [
        (synth.gen_poisson, PoissonSpec(2.0, 3)),
        (synth.gen_hawkes, HawkesSpec(0.5, 0.8, 1.0, 2)),
        (synth.gen_self_correcting, SelfCorrectingSpec(1.0, 0.5)),
        (synth.gen_markov_marks, MarkovMarkSpec.cycle(3, 1.5)),
    ],
)
def test_generators_deterministic_and_valid(gen, spec):
    a = gen(spec, 4, 30, seed=5)
    assert a == gen(spec, 4, 30, seed=5)
    assert a != gen(spec, 4, 30, seed=6)
    assert len(a) == 4 and all(len(s) == 30 for s in a)
    assert (_gaps(a) >= 0).all()


def test_hawkes_without_excitation_is_poisson():
    d = synth.gen_hawkes(HawkesSpec(1.5, 0.0, 1.0), 100, 100, seed=2)
    gaps = _gaps(d)
    se = gaps.std(ddof=1) / np.sqrt(gaps.size)
    assert abs(gaps.mean() - 1 / 1.5) < 3 * se


def test_hawkes_stationary_rate():
    spec = HawkesSpec(0.5, 0.8, 1.0)
    assert spec.stationary_rate == pytest.approx(2.5)
    d = synth.gen_hawkes(spec, 20, 10_000, seed=4)
    # events per unit time over the whole sample, after a burn-in per sequence
    rates = [len(s.inter_arrivals[1000:]) / s.inter_arrivals[1000:].sum() for s in d]
    assert abs(np.mean(rates) - 2.5) / 2.5 < 0.05


def test_hawkes_rejects_nonstationary():
    with pytest.raises(SpecError):
        HawkesSpec(1.0, 1.0, 1.0)
    with pytest.raises(SpecError):
        HawkesSpec(0.0, 0.1, 1.0)


def test_self_correcting_more_regular_than_poisson():
    d = synth.gen_self_correcting(SelfCorrectingSpec(1.0, 1.0), 50, 200, seed=3)
    gaps = _gaps(d)
    cv = gaps.std() / gaps.mean()
    pois = np.random.default_rng(0).exponential(gaps.mean(), gaps.size)
    assert cv < pois.std() / pois.mean()


def test_self_correcting_gap_grows_with_alpha():
    means = [_gaps(synth.gen_self_correcting(SelfCorrectingSpec(1.0, a), 20, 200, seed=1)).mean()
             for a in (1.0, 2.0, 4.0, 8.0)]
    assert all(x < y for x, y in zip(means, means[1:]))


def test_markov_cycle_and_identity():
    d = synth.gen_markov_marks(MarkovMarkSpec.cycle(3), 10, 12, seed=0)
    for s in d:
        c = s.categories
        assert ((c[1:] - c[:-1]) % 3 == 1).all()
    ident = MarkovMarkSpec(((1.0, 0.0), (0.0, 1.0)), (1.0, 1.0))
    for s in synth.gen_markov_marks(ident, 10, 12, seed=0):
        assert len(set(s.categories.tolist())) == 1


def test_markov_transition_frequencies():
    P = np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25], [0.2, 0.2, 0.6]])
    spec = MarkovMarkSpec(tuple(map(tuple, P)), (1.0, 2.0, 3.0))
    d = synth.gen_markov_marks(spec, 100, 1001, seed=9)
    counts = np.zeros((3, 3))
    for s in d:
        np.add.at(counts, (s.categories[:-1], s.categories[1:]), 1)
    assert counts.sum() == 100_000
    n = counts.sum(axis=1, keepdims=True)
    se = np.sqrt(P * (1 - P) / n)
    assert (np.abs(counts / n - P) < 3 * se).all()


def test_markov_per_state_rates():
    spec = MarkovMarkSpec(((0.5, 0.5), (0.5, 0.5)), (1.0, 10.0))
    d = synth.gen_markov_marks(spec, 50, 200, seed=2)
    cats = np.concatenate([s.categories for s in d])
    gaps = _gaps(d)
    assert gaps[cats == 0].mean() == pytest.approx(1.0, rel=0.1)
    assert gaps[cats == 1].mean() == pytest.approx(0.1, rel=0.1)


@pytest.mark.parametrize(
    "build",
    [
        lambda: MarkovMarkSpec(((0.5, 0.6), (0.5, 0.5)), (1.0, 1.0)),
        lambda: MarkovMarkSpec(((1.0,),), (0.0,)),
        lambda: PoissonSpec(-1.0),
        lambda: PoissonSpec(1.0, 2, (0.3, 0.3)),
        lambda: SelfCorrectingSpec(1.0, 0.0),
    ],
)
def test_invalid_specs(build):
    with pytest.raises(SpecError):
        build()


def test_invalid_counts():
    with pytest.raises(SpecError):
        synth.gen_poisson(PoissonSpec(1.0), 0, 10, seed=0)
