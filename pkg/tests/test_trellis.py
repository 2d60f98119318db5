import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_ml, conv_reference, two_best_llr
from tdmr.trellis import (
    PRTarget, build_trellis, llr_to_p0, pr_reference, pr_reference_with_history, read_llr_dump,
    soft_backward, sova, sova_trace, viterbi, write_llr_dump)

TARGETS = [(1.0,), (1.0, -1.0), tuple(PRTarget.monic_from([3, 7, 1]).taps)]


def test_prtarget_validation():
    with pytest.raises(ValueError):
        PRTarget(())
    with pytest.raises(ValueError):
        PRTarget((2.0, 1.0), monic=True)
    g = PRTarget.monic_from([3, 7, 1])
    assert g.monic and g.taps[0] == 1.0


def test_build_trellis_examples():
    t1 = build_trellis([1])
    assert t1.num_states == 1 and sorted(t1.out_label[0]) == [-1.0, 1.0]
    t = build_trellis([3, 7, 1])
    assert t.num_states == 4
    assert t.label(t.state_of([1, 1]), 1) == 11.0
    t0 = build_trellis([1, 0])
    assert t0.num_states == 2
    for s in range(2):
        assert t0.label(s, 1) == 1.0 and t0.label(s, -1) == -1.0


@pytest.mark.parametrize("g", [(1.0, 0.5), (3.0, 7.0, 1.0), (1.0, -0.3, 0.2, 0.1)])
def test_trellis_structure(g):
    t = build_trellis(g)
    S = t.num_states
    incoming = np.zeros(S, dtype=int)
    for s in range(S):
        for x in (0, 1):
            incoming[t.nxt[s, x]] += 1
            assert t.out_label[s, x] == pytest.approx(np.dot(g, t.window[s, x]))
    assert np.all(incoming == 2)


def test_pr_reference_examples():
    assert pr_reference([1, -1, 1], [1]).tolist() == [1, -1, 1]
    assert pr_reference([1] * 6, [3, 7, 1])[2:].tolist() == [11.0] * 4
    assert pr_reference([1, 1, -1, -1], [1, -1]).tolist() == [0, 0, -2, 0]


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=40),
       st.lists(st.floats(-3, 3), min_size=1, max_size=4))
def test_pr_reference_matches_direct_sum(u, g):
    np.testing.assert_allclose(pr_reference(u, g), conv_reference(u, g), atol=1e-12)
    hist = [1, -1, -1][:len(g) - 1]
    np.testing.assert_allclose(pr_reference_with_history(u, hist, g), conv_reference(u, g, hist),
                               atol=1e-12)


@pytest.mark.parametrize("g", TARGETS)
def test_viterbi_recovers_clean_signal(g, rng):
    u = (2 * rng.integers(0, 2, 300) - 1).astype(np.int8)
    u[0] = 1  # start state pinned to all +1
    y = pr_reference(u, g)
    assert np.array_equal(viterbi(y, build_trellis(g)), u)


@pytest.mark.parametrize("g", TARGETS)
def test_viterbi_matches_exhaustive_search(g, rng):
    t = build_trellis(g)
    for _ in range(25):
        N = int(rng.integers(1, 11))
        u = 2 * rng.integers(0, 2, N) - 1
        y = pr_reference_with_history(u, [1] * (len(g) - 1), g) + rng.normal(0, 0.8, N)
        assert np.array_equal(viterbi(y, t), brute_force_ml(y, g))


def test_viterbi_small_perturbation(rng):
    g = (1.0, 0.5)
    t = build_trellis(g)
    u = (2 * rng.integers(0, 2, 50) - 1).astype(np.int8)
    u[0] = 1
    y = pr_reference(u, g)
    gap = np.diff(np.unique(t.out_label)).min()
    y[20] += 0.45 * gap
    assert np.array_equal(viterbi(y, t), u)


def test_free_start_state(rng):
    g = (1.0, 0.7, 0.2)
    u = (2 * rng.integers(0, 2, 40) - 1).astype(np.int8)
    hist = [-1, -1]
    y = pr_reference_with_history(u, hist, g)
    assert np.array_equal(viterbi(y, build_trellis(g), start_state=None), u)


@pytest.mark.parametrize("g", TARGETS)
def test_sova_matches_two_best_paths(g, rng):
    t = build_trellis(g)
    for _ in range(10):
        N = int(rng.integers(2, 11))
        u = 2 * rng.integers(0, 2, N) - 1
        y = pr_reference_with_history(u, [1] * (len(g) - 1), g) + rng.normal(0, 0.6, N)
        nv = float(rng.uniform(0.2, 2.0))
        sd = sova(y, t, nv)
        np.testing.assert_allclose(sd.llr, two_best_llr(y, g, nv), rtol=1e-9, atol=1e-9)
        assert np.array_equal(sd.hard, viterbi(y, t))


def test_sova_symmetric_tie_gives_zero():
    # one sample exactly halfway between the two labels of a memoryless target
    sd = sova(np.array([0.0]), build_trellis([1]), 1.0)
    assert sd.llr[0] == 0.0 and sd.hard[0] == 1


def test_sova_scaling(rng):
    g = (1.0, 0.4)
    y = rng.normal(size=30)
    base = sova(y, build_trellis(g), 0.5)
    scaled = sova(3.0 * y, build_trellis((3.0, 1.2)), 0.5)
    assert np.array_equal(np.sign(base.llr), np.sign(scaled.llr))
    np.testing.assert_allclose(sova(y, build_trellis(g), 1.5).llr, base.llr / 3.0, rtol=1e-12)
    with pytest.raises(ValueError):
        sova(y, build_trellis(g), 0.0)


def test_llr_antisymmetry(rng):
    g = (1.0, 0.6, -0.2)
    t = build_trellis(g)
    y = rng.normal(size=60)
    a = sova(y, t, 1.0, start_state=None).llr
    b = sova(-y, t, 1.0, start_state=None).llr
    np.testing.assert_allclose(a, -b, atol=1e-12)


@given(st.floats(-50, 50))
def test_p0_properties(x):
    p0 = llr_to_p0(x)
    assert 0 <= p0 <= 1
    if abs(x) < 30:
        assert 0 < p0 < 1
    assert p0 + llr_to_p0(-x) == pytest.approx(1.0, abs=1e-15)
    assert llr_to_p0(x + 1.0) <= p0


def test_p0_examples():
    assert llr_to_p0(0.0) == 0.5
    assert llr_to_p0(np.log(3.0)) == pytest.approx(0.25, abs=1e-15)
    assert llr_to_p0(800.0) == pytest.approx(0.0, abs=1e-300)
    assert llr_to_p0(-800.0) == 1.0


def test_soft_backward_zero_and_shape(rng):
    t = build_trellis((1.0, 0.5))
    y = rng.normal(size=20)
    assert not np.any(soft_backward(y, t, 1.0, np.zeros(20)))
    with pytest.raises(ValueError):
        soft_backward(y, t, 1.0, np.zeros(19))


@pytest.mark.parametrize("g", TARGETS + [(1.0, -0.4, 0.3, 0.1)])
def test_soft_backward_matches_finite_differences(g, rng):
    t = build_trellis(g)
    for _ in range(5):
        N = 40
        y = rng.normal(0, 1.2, N)
        w = rng.normal(size=N)
        tr = sova_trace(y, t, 0.7)
        gy, gg = tr.backward(w, target_grad=True)
        eps = 1e-6
        num = np.zeros(N)
        for m in range(N):
            yp, ym = y.copy(), y.copy()
            yp[m] += eps
            ym[m] -= eps
            num[m] = (w @ sova(yp, t, 0.7).llr - w @ sova(ym, t, 0.7).llr) / (2 * eps)
        assert np.max(np.abs(gy - num)) <= 1e-6 * max(np.max(np.abs(num)), 1.0)
        numg = np.zeros(len(g))
        for j in range(len(g)):
            gp, gm = np.array(g), np.array(g)
            gp[j] += eps
            gm[j] -= eps
            numg[j] = (w @ sova(y, build_trellis(gp), 0.7).llr
                       - w @ sova(y, build_trellis(gm), 0.7).llr) / (2 * eps)
        assert np.max(np.abs(gg - numg)) <= 1e-6 * max(np.max(np.abs(numg)), 1.0)


def test_llr_dump_roundtrip(tmp_path, rng):
    llr = rng.normal(size=50)
    u = np.where(rng.random(50) < 0.5, 1, -1)
    write_llr_dump(tmp_path / "d.txt", llr, u)
    back, ub = read_llr_dump(tmp_path / "d.txt")
    np.testing.assert_allclose(back, llr, rtol=1e-8)
    assert np.array_equal(ub, u)
    first = (tmp_path / "d.txt").read_text().splitlines()[0].split()
    assert first[0] == "0" and int(first[2]) == (1 if llr[0] >= 0 else -1)
