import math

import numpy as np
import pytest

from stagenet import autodiff as ad
from stagenet.autodiff import DimensionError, grad_check
from stagenet.stage_lstm import (StageCellState, cell_step, combine_cell, init_cell_params,
                                 master_from_distributions, master_gates, stage_variation,
                                 unroll)


def zero_params(n_features=3, hidden=10, chunk=2):
    p = init_cell_params(n_features, hidden, chunk, np.random.default_rng(0))
    for w in p.weights.values():
        w.data[...] = 0.0
    return p


def random_state(rng, hidden):
    return StageCellState(ad.constant(rng.uniform(-0.9, 0.9, (1, hidden))),
                          ad.constant(rng.normal(size=(1, hidden))),
                          ad.constant(np.ones((1, 1))), ad.constant(np.zeros((1, 1))))


# oracle: scalar loops, no library code ------------------------------------------

def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_cell(v, delta, h_prev, c_prev, W):
    """Cell update written entry by entry from the defining equations."""
    x = list(v) + [delta]
    hh = list(h_prev) + [delta]

    def affine(g, j):
        return (sum(x[a] * W[f"W_{g}"][a, j] for a in range(len(x)))
                + sum(hh[a] * W[f"U_{g}"][a, j] for a in range(len(hh)))
                + W[f"b_{g}"][j])

    n_h = len(h_prev)
    n_m = W["b_mf"].shape[0]
    chunk = n_h // n_m

    def softmax(z):
        m = max(z)
        e = [math.exp(q - m) for q in z]
        return [q / sum(e) for q in e]

    pf = softmax([affine("mf", j) for j in range(n_m)])
    pi = softmax([affine("mi", j) for j in range(n_m)])
    fm = [sum(pf[: j + 1]) for j in range(n_m)]
    im = [sum(pi[j:]) for j in range(n_m)]
    c = []
    for d in range(n_h):
        f, i = _sig(affine("f", d)), _sig(affine("i", d))
        chat = math.tanh(affine("c", d))
        F, I = fm[d // chunk], im[d // chunk]
        w = F * I
        c.append(w * (f * c_prev[d] + i * chat) + (F - w) * c_prev[d] + (I - w) * chat)
    h = [_sig(affine("o", d)) * math.tanh(c[d]) for d in range(n_h)]
    s = n_m * (1 - sum(fm) / n_m) + 1
    return np.array(c), np.array(h), s


# master gates ------------------------------------------------------------------

def test_worked_example_masks():
    f_m, i_m = master_from_distributions([0, 0, 1, 0, 0], [0, 0, 0, 1, 0])
    np.testing.assert_array_equal(f_m.data[0], [0, 0, 1, 1, 1])
    np.testing.assert_array_equal(i_m.data[0], [1, 1, 1, 1, 0])
    np.testing.assert_array_equal((f_m * i_m).data[0], [0, 0, 1, 1, 0])


def test_uniform_logits_give_arithmetic_masks():
    p = zero_params(hidden=10, chunk=2)
    f_m, i_m, p_f = master_gates(np.ones(3), 0.5, np.zeros(10), p)
    np.testing.assert_allclose(p_f.data[0], [0.2] * 5)
    np.testing.assert_allclose(f_m.data[0], [0.2, 0.4, 0.6, 0.8, 1.0])
    np.testing.assert_allclose(i_m.data[0], [1.0, 0.8, 0.6, 0.4, 0.2])


def test_master_gates_monotone_random_weights():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = init_cell_params(4, 12, 3, rng)
        for w in p.weights.values():
            w.data[...] = rng.normal(0, 2, w.shape)
        f_m, i_m, _ = master_gates(rng.normal(size=4), rng.exponential(), rng.uniform(-1, 1, 12), p)
        f, i = f_m.data[0], i_m.data[0]
        assert np.all(np.diff(f) >= 0) and np.all(np.diff(i) <= 0)
        assert abs(f[-1] - 1) <= 1e-12 and abs(i[0] - 1) <= 1e-12


def test_master_gates_reject_nonfinite():
    p = zero_params()
    with pytest.raises(ad.NumericError):
        master_gates([np.nan, 0, 0], 0.0, np.zeros(10), p)


def test_master_gates_reject_negative_delta():
    with pytest.raises(ValueError):
        master_gates(np.zeros(3), -1.0, np.zeros(10), zero_params())


# stage variation ---------------------------------------------------------------

def test_stage_variation_worked_example():
    s, s_norm = stage_variation(ad.constant([[0, 0, 1, 1, 1]]))
    # 5 * (1 - 3/5) + 1
    assert s.data.item() == pytest.approx(3.0, abs=1e-12)
    assert s_norm.data.item() == pytest.approx(0.4, abs=1e-12)


def test_stage_variation_uniform_is_midpoint():
    s, _ = stage_variation(ad.constant([[0.2, 0.4, 0.6, 0.8, 1.0]]))
    assert s.data.item() == pytest.approx(3.0, abs=1e-12)


def test_stage_variation_full_history():
    s, s_norm = stage_variation(ad.constant([[1.0, 1.0, 1.0, 1.0]]))
    assert s.data.item() == 1.0 and s_norm.data.item() == 0.0


def test_stage_variation_equals_expected_argmax_position():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        s, _ = stage_variation(ad.constant(np.cumsum(p)[None]))
        # 1-indexed expectation of the split position
        assert s.data.item() == pytest.approx(np.sum(np.arange(1, 7) * p), abs=1e-12)


# cell step --------------------------------------------------------------------

def test_zero_cell():
    p = zero_params(hidden=10, chunk=2)
    st = cell_step(np.zeros(3), 0.0, StageCellState.zeros(1, 10, 5), p)
    np.testing.assert_array_equal(st.c.data, 0)
    np.testing.assert_array_equal(st.h.data, 0)
    assert st.s.data.item() == pytest.approx(3.0, abs=1e-12)


def test_worked_example_dimension_routing():
    f_m, i_m = master_from_distributions([0, 0, 1, 0, 0], [0, 0, 0, 1, 0])
    rng = np.random.default_rng(0)
    f, i, c_prev, c_hat = (ad.constant(rng.uniform(0.1, 0.9, (1, 5))) for _ in range(4))
    c = combine_cell(f_m, i_m, f, i, c_prev, c_hat).data[0]
    full = (f.data * c_prev.data + i.data * c_hat.data)[0]
    assert c[4] == c_prev.data[0, 4]                 # long-term slot copies history
    np.testing.assert_array_equal(c[:2], c_hat.data[0, :2])  # short-term slots take the candidate
    np.testing.assert_array_equal(c[2:4], full[2:4])          # overlap behaves like an LSTM


def test_cell_matches_scalar_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = init_cell_params(3, 6, 2, rng)
        for w in p.weights.values():
            w.data[...] = rng.normal(0, 0.8, w.shape)
        st0 = random_state(rng, 6)
        v, delta = rng.normal(size=3), float(rng.exponential())
        st = cell_step(v, delta, st0, p)
        c, h, s = scalar_cell(v, delta, st0.h.data[0], st0.c.data[0],
                              {k: w.data for k, w in p.weights.items()})
        np.testing.assert_allclose(st.c.data[0], c, rtol=0, atol=1e-12)
        np.testing.assert_allclose(st.h.data[0], h, rtol=0, atol=1e-12)
        assert st.s.data.item() == pytest.approx(s, abs=1e-12)


def test_degenerate_gates_reduce_to_lstm():
    rng = np.random.default_rng(7)
    n_m = 4
    pf = np.eye(n_m)[0]
    pi = np.eye(n_m)[n_m - 1]
    f_m, i_m = master_from_distributions(pf, pi)
    np.testing.assert_array_equal(f_m.data, 1.0)
    np.testing.assert_array_equal(i_m.data, 1.0)
    f, i, c_prev, c_hat = (ad.constant(rng.normal(size=(1, n_m))) for _ in range(4))
    c = combine_cell(f_m, i_m, f, i, c_prev, c_hat)
    np.testing.assert_array_equal(c.data, f.data * c_prev.data + i.data * c_hat.data)


def test_cell_invariants_random():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = init_cell_params(3, 8, 2, rng)
        for w in p.weights.values():
            w.data[...] = rng.normal(0, 1.5, w.shape)
        st = cell_step(rng.normal(size=3), rng.exponential(), random_state(rng, 8), p)
        f, i = st.master_forget.data[0], st.master_input.data[0]
        w = f * i
        assert np.all(f - w >= 0) and np.all(i - w >= 0)
        assert np.all(np.abs(st.h.data) < 1)
        assert 1 <= st.s.data.item() < p.n_master + 1
        assert 0 < st.s_norm.data.item() < 1
        assert st.s.data.item() == pytest.approx(p.n_master * st.s_norm.data.item() + 1, abs=1e-12)


def test_cell_shape_mismatch():
    p = zero_params()
    with pytest.raises(DimensionError):
        cell_step(np.zeros(4), 0.0, StageCellState.zeros(1, 10, 5), p)


def test_chunking_requires_divisibility():
    with pytest.raises(ValueError, match="10.*3"):
        init_cell_params(3, 10, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_cell_params(3, 4, 4, np.random.default_rng(0))


def test_dropconnect_masks_hit_recurrent_weights():
    rng = np.random.default_rng(0)
    p = init_cell_params(3, 6, 2, rng)
    st0 = random_state(rng, 6)
    v = rng.normal(size=3)
    zero_masks = {n: np.zeros(p[n].shape) for n in p.recurrent_names()}
    ones = {n: np.ones(p[n].shape) for n in p.recurrent_names()}
    a = cell_step(v, 0.3, st0, p, ones)
    b = cell_step(v, 0.3, st0, p)
    np.testing.assert_array_equal(a.h.data, b.h.data)
    c = cell_step(v, 0.3, st0, p, zero_masks)
    d = cell_step(v, 0.3, random_state(rng, 6), p, zero_masks)
    # with every recurrent weight dropped the gates ignore the previous hidden state
    np.testing.assert_array_equal(c.master_forget.data, d.master_forget.data)


# unroll ------------------------------------------------------------------------

def test_unroll_single_step():
    rng = np.random.default_rng(0)
    p = init_cell_params(3, 6, 2, rng)
    v = rng.normal(size=(1, 3))
    st = unroll(v, [0.0], p)
    one = cell_step(v[0], 0.0, StageCellState.zeros(1, 6, 3), p)
    assert len(st) == 1
    np.testing.assert_array_equal(st[0].h.data, one.h.data)


def test_unroll_is_deterministic_and_compositional():
    rng = np.random.default_rng(1)
    p = init_cell_params(3, 6, 2, rng)
    v = rng.normal(size=(3, 3))
    d = np.array([0.0, 1.2, 0.4])
    a, b = unroll(v, d, p), unroll(v, d, p)
    for x, y in zip(a, b):
        assert np.array_equal(x.h.data, y.h.data) and np.array_equal(x.c.data, y.c.data)
    st = StageCellState.zeros(1, 6, 3)
    for t in range(3):
        st = cell_step(v[t], d[t], st, p)
        np.testing.assert_array_equal(a[t].c.data, st.c.data)


def test_unroll_skips_masked_steps():
    rng = np.random.default_rng(2)
    p = init_cell_params(3, 6, 2, rng)
    v = rng.normal(size=(4, 3))
    d = np.array([0.0, 1.0, 1.0, 1.0])
    masked = unroll(v, d, p, mask=[1, 1, 0, 1])
    direct = unroll(v[[0, 1, 3]], d[[0, 1, 3]], p)
    assert len(masked) == 3
    np.testing.assert_array_equal(masked[-1].h.data, direct[-1].h.data)


def test_unroll_empty_rejected():
    with pytest.raises(ValueError):
        unroll(np.zeros((0, 3)), np.zeros(0), zero_params())


def test_unroll_gradients_fd():
    rng = np.random.default_rng(4)
    p = init_cell_params(3, 6, 2, rng)
    v = rng.normal(size=(4, 3))
    d = np.array([0.0, 0.5, 1.5, 0.7])
    w = rng.normal(size=6)

    def loss():
        states = unroll(v, d, p)
        total = ad.total(states[-1].h * w)
        for st in states:
            total = total + ad.total(st.s)
        return total
    rep = grad_check(loss, p.weights, 1e-5, 1e-4)
    assert rep.passed, {k: v for k, v in rep.max_rel_err.items() if v > 1e-4}
