"""Search for a binary input train on which the exact causal LIF fires at
steps {4, 9} while the non-iterative neuron fires only at step 4.

The first hit (deterministic scan order) is the regression fixture frozen in
tests/test_neurons.py.
"""

import itertools

import numpy as np

from nisnn.neurons import build_leaky_kernel, exact_lif_solve, nilif_forward
from nisnn.tensor import Tensor, no_grad

STEPS = 12
TARGET_EXACT = {4, 9}
TARGET_NILIF = {4}


def main():
    kernel = build_leaky_kernel(tau=2.0, delta_t=1.0, v_th=0.5, t_n=STEPS - 1)
    for weight in np.arange(0.05, 1.0, 0.05):
        for bits in itertools.product([0, 1], repeat=STEPS):
            x = weight * np.array(bits, dtype=np.float64)
            o_ex, _ = exact_lif_solve(x, kernel)
            if set(np.flatnonzero(o_ex)) != TARGET_EXACT:
                continue
            with no_grad():
                o_ni, _ = nilif_forward(Tensor(x, dtype=np.float64), kernel)
            if set(np.flatnonzero(o_ni.data)) == TARGET_NILIF:
                print(f"weight={weight:.2f} bits={list(bits)}")
                return
    print("no fixture found")


if __name__ == "__main__":
    main()
