import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nisnn import tensor as T
from nisnn import verify
from nisnn.errors import ConfigError, DimensionError
from nisnn.neurons import (
    IterativeLIFLayer,
    LeakyKernel,
    NiLIFLayer,
    build_leaky_kernel,
    effect_matrix,
    exact_lif_solve,
    iterative_lif_forward,
    iterative_lif_numpy,
    nilif_backward,
    nilif_forward,
    spike_bounds,
    sparsity_compare,
)
from nisnn.tensor import Tensor

LN2_KERNEL = dict(tau=1 / math.log(2), delta_t=1.0, v_th=0.5)

# A weighted input train where the causal dynamics fire twice and the
# non-iterative form keeps only the first spike (found by scripts/search_spike_fixture.py).
FIXTURE_WEIGHT = 0.25
FIXTURE_BITS = [0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0]


def kernel(t_n, **kw):
    return build_leaky_kernel(**{**LN2_KERNEL, **kw}, t_n=t_n)


# -- kernel construction ------------------------------------------------------


def test_leaky_matrices_closed_form():
    k = kernel(2)
    np.testing.assert_allclose(k.l_in, [[1, 0.5, 0.25], [0, 1, 0.5], [0, 0, 1]], atol=1e-15)
    np.testing.assert_allclose(k.l_out, [[0, 0.5, 0.25], [0, 0, 0.5], [0, 0, 0]], atol=1e-15)


def test_single_step_kernel():
    k = kernel(0)
    assert k.l_in.tolist() == [[1.0]] and k.l_out.tolist() == [[0.0]]


@pytest.mark.parametrize("bad", [dict(tau=0), dict(delta_t=-1), dict(v_th=0), dict(t_n=-1)])
def test_kernel_rejects_bad_parameters(bad):
    args = dict(tau=2.0, delta_t=1.0, v_th=0.5, t_n=3)
    args.update(bad)
    with pytest.raises(ConfigError):
        build_leaky_kernel(**args)


@given(st.floats(0.1, 50), st.floats(0.1, 2), st.floats(0.05, 2), st.integers(0, 30))
def test_kernel_invariants(tau, dt, v_th, t_n):
    k = build_leaky_kernel(tau, dt, v_th, t_n)
    assert np.all(np.diag(k.l_in) == 1) and np.all(np.diag(k.l_out) == 0)
    upper = np.triu(np.ones_like(k.l_in, dtype=bool))
    assert np.all((k.l_in[upper] > 0) & (k.l_in[upper] <= 1)) and not k.l_in[~upper].any()
    assert np.all((k.l_out >= 0) & (k.l_out <= v_th))
    np.testing.assert_array_equal(k.l_out[:, 1:], v_th * k.l_in[:, :-1])


def test_kernel_is_read_only():
    with pytest.raises(ValueError):
        kernel(3).l_in[0, 0] = 2.0


# -- forward forms ------------------------------------------------------------


def test_nilif_zero_input():
    o, u = nilif_forward(Tensor(np.zeros((4, 6))), kernel(5))
    assert not o.data.any() and not u.data.any()


def test_nilif_single_pulse():
    k = kernel(2)
    e = effect_matrix(Tensor([1.0, 0.0, 0.0]), k)
    o, u = nilif_forward(Tensor([1.0, 0.0, 0.0]), k)
    np.testing.assert_allclose(e.data, [1, 0.5, 0.25])
    np.testing.assert_allclose(u.data, [1, 0, 0], atol=1e-7)
    np.testing.assert_array_equal(o.data, [1, 0, 0])
    np.testing.assert_array_equal(exact_lif_solve([1.0, 0.0, 0.0], k)[0], [1, 0, 0])


def test_nilif_time_axis_mismatch():
    with pytest.raises(DimensionError):
        nilif_forward(Tensor(np.zeros((2, 5))), kernel(3))


def test_exact_solve_after_reset():
    o, u = exact_lif_solve([1.2, 0, 0, 0], kernel(3))
    np.testing.assert_allclose(u, [1.2, 0.1, 0.05, 0.025], atol=1e-12)
    np.testing.assert_array_equal(o, [1, 0, 0, 0])


def test_threshold_is_strict():
    o, _ = nilif_forward(Tensor([0.5], dtype=np.float64), kernel(0))
    assert o.data[0] == 0


def test_spike_fixture_nilif_subset_of_exact():
    k = build_leaky_kernel(2.0, 1.0, 0.5, len(FIXTURE_BITS) - 1)
    x = FIXTURE_WEIGHT * np.array(FIXTURE_BITS, dtype=np.float64)
    exact, _ = exact_lif_solve(x, k)
    with T.no_grad():
        ni, _ = nilif_forward(Tensor(x, dtype=np.float64), k)
    assert set(np.flatnonzero(exact)) == {4, 9}
    assert set(np.flatnonzero(ni.data)) == {4}


@given(st.integers(0, 2**31 - 1), st.sampled_from([9, 49, 199]))
def test_exact_within_bounds(seed, t_n):
    k = build_leaky_kernel(2.0, 1.0, 0.5, t_n)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(20, t_n + 1))
    o, _ = exact_lif_solve(x, k)
    lower, upper = spike_bounds(x, k)
    assert np.all(lower <= o) and np.all(o <= upper)


@given(st.integers(0, 2**31 - 1))
def test_nilif_never_exceeds_upper_bound(seed):
    k = build_leaky_kernel(2.0, 1.0, 0.5, 199)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(10, 200))
    with T.no_grad():
        o, _ = nilif_forward(Tensor(x, dtype=np.float64), k)
    assert np.all(o.data <= spike_bounds(x, k)[1])


def test_no_fire_equivalence_with_iterative(rng):
    k = build_leaky_kernel(2.0, 1.0, 0.5, 49)
    x = verify.no_fire_inputs(rng, 200, 50, k)
    o_ex, u_ex = exact_lif_solve(x, k)
    o_it, u_it = iterative_lif_numpy(x, k.decay, k.v_th)
    with T.no_grad():
        _, u_ni = nilif_forward(Tensor(x.astype(np.float32)), k)
    assert not o_ex.any() and not o_it.any()
    np.testing.assert_allclose(u_it, x @ k.l_in, atol=1e-12)
    assert np.abs(u_ni.data - u_ex).max() < 1e-5


def test_iterative_tape_matches_numpy(rng):
    x = rng.uniform(-1, 1, size=(8, 30))
    layer = IterativeLIFLayer(0.7)
    with T.no_grad():
        o, u = iterative_lif_forward(Tensor(x, dtype=np.float64), layer)
    o_ref, u_ref = iterative_lif_numpy(x, 0.7, 0.5)
    np.testing.assert_array_equal(o.data, o_ref)
    np.testing.assert_allclose(u.data, u_ref, atol=1e-12)


def test_iterative_from_kernel():
    k = build_leaky_kernel(3.0, 0.5, 0.4, 5)
    layer = IterativeLIFLayer.from_kernel(k)
    assert layer.lam == pytest.approx(math.exp(-0.5 / 3.0)) and layer.v_th == 0.4


def test_iterative_rejects_bad_decay():
    with pytest.raises(ConfigError):
        IterativeLIFLayer(1.0)


def test_sparsity_zero_input():
    assert sparsity_compare(np.zeros((3, 10)), kernel(9)) == (0.0, 0.0, 0.0)


def test_sparsity_ordering(rng):
    k = build_leaky_kernel(2.0, 1.0, 0.5, 49)
    ni, ex, it = sparsity_compare(rng.uniform(-1, 1, size=(1000, 50)), k)
    assert ni <= ex and ni <= it


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("t", [10, 50, 100])
def test_iterative_gradient_is_geometric(t):
    assert verify.decay_gradient(0.9, t) == pytest.approx(0.9**t, abs=1e-6)


def test_iterative_gradient_at_100_steps():
    assert verify.decay_gradient(0.9, 100) == pytest.approx(2.656e-5, rel=1e-3)


def test_leaky_input_gradient_survives_long_sequences():
    got, want = verify.construction_gradient(199)
    assert abs(got - want) < 1e-6 and abs(got) > 1e-3


def test_closed_window_blocks_gradient():
    x = Tensor(np.full((2, 4), 3.0), requires_grad=True)  # every U and E_in >= 1
    _, u = nilif_forward(x, kernel(3))
    o, _ = nilif_forward(x, kernel(3))
    o.sum().backward()
    assert not x.grad.any()


def test_single_step_open_window():
    x = Tensor([0.6], requires_grad=True, dtype=np.float64)
    o, _ = nilif_forward(x, kernel(0))
    o.sum().backward()
    assert x.grad[0] == 1.0


@given(st.integers(0, 2**31 - 1))
def test_hand_backward_matches_tape(seed):
    r = np.random.default_rng(seed)
    k = build_leaky_kernel(2.0, 1.0, 0.5, 15)
    x = Tensor(r.uniform(-1, 1, size=(4, 16)), requires_grad=True, dtype=np.float64)
    up = r.standard_normal((4, 16))
    o, u = nilif_forward(x, k)
    (o * Tensor(up, dtype=np.float64)).sum().backward()
    e_in = x.data @ k.l_in
    np.testing.assert_allclose(x.grad, nilif_backward(up, u.data, e_in, k), atol=1e-12)


def test_op_count_independent_of_sequence_length():
    counts = []
    for steps in (5, 50, 200):
        with T.count_ops() as ops:
            nilif_forward(Tensor(np.zeros((2, steps)), requires_grad=True), build_leaky_kernel(2.0, t_n=steps - 1))
        counts.append(dict(ops))
    assert counts[0] == counts[1] == counts[2]


def test_nilif_layer_outputs_binary(rng):
    layer = NiLIFLayer(build_leaky_kernel(2.0, t_n=7), channels=3)
    o = layer(Tensor(rng.standard_normal((2, 3, 4, 8))))
    assert set(np.unique(o.data)) <= {0.0, 1.0}


# -- the bounds suite catches a corrupted reset matrix --------------------------


def test_props_suite_passes():
    assert all(c.passed for c in verify.suite_props1())


def test_props_suite_flags_nonzero_reset_diagonal(monkeypatch):
    def corrupted(tau, delta_t=1.0, v_th=0.5, t_n=0):
        good = build_leaky_kernel(tau, delta_t, v_th, t_n)
        l_out = good.l_out.copy()
        np.fill_diagonal(l_out, v_th)
        return LeakyKernel(good.tau, good.delta_t, good.v_th, good.t_n, good.l_in, l_out)

    monkeypatch.setattr(verify, "build_leaky_kernel", corrupted)
    checks = verify.suite_props1(sequences=200)
    failed = [c for c in checks if not c.passed]
    assert failed and failed[0].counterexample is not None
    assert any(c.name.startswith("fixed point") for c in failed)
