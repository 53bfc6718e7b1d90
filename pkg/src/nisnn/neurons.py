"""Leaky integrate-and-fire dynamics.

Three views of the same soft-reset neuron live here:

* ``nilif_forward``: the non-iterative form.  All time steps are computed at
  once from two triangular leaky matrices; the unknown output spikes inside the
  reset term are replaced by their upper bound ``g(E_in)``.
* ``exact_lif_solve``: the causal step-by-step solution of the same
  un-approximated dynamics, used as ground truth.
* ``iterative_lif_forward``: the recurrent reference with a sigmoid surrogate.

Time is always the last axis; every leading axis indexes an independent neuron.
Input at step t is weighted by L(0) = 1 at step t itself, and the iterative
reference is aligned to that convention (input applied at its own step, decay
applied to history).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import BatchNorm2d, Module
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class LeakyKernel:
    tau: float
    delta_t: float
    v_th: float
    t_n: int
    l_in: np.ndarray = field(repr=False)
    l_out: np.ndarray = field(repr=False)

    @property
    def steps(self) -> int:
        return self.t_n + 1

    @property
    def decay(self) -> float:
        return math.exp(-self.delta_t / self.tau)


def build_leaky_kernel(tau: float, delta_t: float = 1.0, v_th: float = 0.5, t_n: int = 0) -> LeakyKernel:
    if not tau > 0 or not delta_t > 0 or not v_th > 0:
        raise ConfigError(f"tau, delta_t and v_th must be positive, got {tau}, {delta_t}, {v_th}")
    if t_n < 0:
        raise ConfigError(f"t_n must be >= 0, got {t_n}")
    n = t_n + 1
    lag = np.arange(n)[None, :] - np.arange(n)[:, None]  # j - i
    l_in = np.where(lag >= 0, np.exp(-np.maximum(lag, 0) * delta_t / tau), 0.0)
    l_out = np.zeros_like(l_in)
    l_out[:, 1:] = v_th * l_in[:, :-1]
    for arr in (l_in, l_out):
        arr.setflags(write=False)
    return LeakyKernel(float(tau), float(delta_t), float(v_th), int(t_n), l_in, l_out)


def _check_steps(x_shape, kernel: LeakyKernel) -> None:
    if x_shape[-1] != kernel.steps:
        raise DimensionError(f"time axis has {x_shape[-1]} steps but kernel expects {kernel.steps}")


# -- surrogate spike functions ------------------------------------------------


def spike_rect(u: Tensor, v_th: float) -> Tensor:
    """Heaviside forward; gradient 1 inside the open window (0, 1), else 0."""
    window = ((u.data > 0) & (u.data < 1)).astype(u.dtype)
    return Tensor._make((u.data > v_th).astype(u.dtype), (u,), lambda g: (g * window,), "spike_rect")


def spike_sigmoid(u: Tensor, v_th: float, alpha: float) -> Tensor:
    """Heaviside forward; gradient alpha * s * (1 - s) with s = sigmoid(alpha * (u - v_th))."""
    s = 1.0 / (1.0 + np.exp(-alpha * (u.data - v_th)))
    slope = (alpha * s * (1.0 - s)).astype(u.dtype)
    return Tensor._make((u.data > v_th).astype(u.dtype), (u,), lambda g: (g * slope,), "spike_sigmoid")


# -- non-iterative LIF --------------------------------------------------------


def effect_matrix(x: Tensor, kernel: LeakyKernel) -> Tensor:
    """E_in = X L_in: accumulated, leaked input without any firing."""
    _check_steps(x.shape, kernel)
    return T.matmul(x, Tensor(kernel.l_in, dtype=x.dtype))


def nilif_from_effect(e_in: Tensor, kernel: LeakyKernel) -> tuple[Tensor, Tensor]:
    l_out = Tensor(kernel.l_out, dtype=e_in.dtype)
    upper = spike_rect(e_in, kernel.v_th)
    u = e_in - T.matmul(upper, l_out)
    return spike_rect(u, kernel.v_th), u


def nilif_forward(x: Tensor, kernel: LeakyKernel) -> tuple[Tensor, Tensor]:
    """Returns (spikes, membrane potential) for every step at once."""
    return nilif_from_effect(effect_matrix(x, kernel), kernel)


def nilif_backward(upstream: np.ndarray, u: np.ndarray, e_in: np.ndarray, kernel: LeakyKernel) -> np.ndarray:
    """Gradient w.r.t. the weighted input, written out by hand.

    Mirrors what the tape computes for ``nilif_forward``: the rectangular window
    is applied at both thresholding sites.
    """
    def window(a):
        return ((a > 0) & (a < 1)).astype(upstream.dtype)

    du = upstream * window(u)
    de = du - (du @ kernel.l_out.T) * window(e_in)
    return de @ kernel.l_in.T


# -- causal ground truth ------------------------------------------------------


def exact_lif_solve(x, kernel: LeakyKernel) -> tuple[np.ndarray, np.ndarray]:
    """Step-by-step solution of u = E_in - O L_out, o = g(u), in float64.

    o^t only depends on o^0..o^{t-1}; forward only.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_steps(x.shape, kernel)
    e_in = x @ kernel.l_in
    o = np.zeros_like(e_in)
    u = np.zeros_like(e_in)
    for t in range(kernel.steps):
        u[..., t] = e_in[..., t] - o[..., :t] @ kernel.l_out[:t, t]
        o[..., t] = u[..., t] > kernel.v_th
    return o, u


def spike_bounds(x, kernel: LeakyKernel) -> tuple[np.ndarray, np.ndarray]:
    """(g(E_in - 1 L_out), g(E_in)): the lower and upper spike bounds, float64."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    e_in = x @ kernel.l_in
    lower = (e_in - kernel.l_out.sum(axis=0)) > kernel.v_th
    return lower.astype(np.float64), (e_in > kernel.v_th).astype(np.float64)


# -- iterative reference ------------------------------------------------------


@dataclass(frozen=True)
class IterativeLIFLayer:
    lam: float
    v_th: float = 0.5
    surrogate_alpha: float = 4.0
    detach_reset: bool = True

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ConfigError(f"decay rate must lie in (0, 1), got {self.lam}")

    @classmethod
    def from_kernel(cls, kernel: LeakyKernel, surrogate_alpha: float = 4.0) -> "IterativeLIFLayer":
        return cls(lam=kernel.decay, v_th=kernel.v_th, surrogate_alpha=surrogate_alpha)


def iterative_lif_forward(x: Tensor, layer: IterativeLIFLayer) -> tuple[Tensor, Tensor]:
    """u^t = lam * (u^{t-1} - v_th * o^{t-1}) + x^t, o^t = g(u^t), u^{-1} = 0.

    With ``detach_reset`` the reset term carries no gradient, so du^t/du^{t-1}
    is exactly the decay rate.
    """
    steps = x.shape[-1]
    us, os_ = [], []
    u_prev = o_prev = None
    for t in range(steps):
        x_t = x[..., t]
        if u_prev is None:
            u_t = x_t
        else:
            reset = o_prev.detach() if layer.detach_reset else o_prev
            u_t = (u_prev - reset * layer.v_th) * layer.lam + x_t
        o_t = spike_sigmoid(u_t, layer.v_th, layer.surrogate_alpha)
        us.append(u_t)
        os_.append(o_t)
        u_prev, o_prev = u_t, o_t
    return T.stack(os_, axis=-1), T.stack(us, axis=-1)


def iterative_lif_numpy(x: np.ndarray, lam: float, v_th: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    o = np.zeros_like(x)
    u = np.zeros_like(x)
    u_prev = np.zeros(x.shape[:-1])
    o_prev = np.zeros(x.shape[:-1])
    for t in range(x.shape[-1]):
        u_prev = lam * (u_prev - v_th * o_prev) + x[..., t]
        o_prev = (u_prev > v_th).astype(np.float64)
        u[..., t], o[..., t] = u_prev, o_prev
    return o, u


def sparsity_compare(x, kernel: LeakyKernel) -> tuple[float, float, float]:
    """Mean firing rates (NiLIF, exact, iterative) over a batch of weighted inputs."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with T.no_grad():
        o_ni, _ = nilif_forward(Tensor(x, dtype=np.float64), kernel)
    o_ex, _ = exact_lif_solve(x, kernel)
    o_it, _ = iterative_lif_numpy(x, kernel.decay, kernel.v_th)
    return float(o_ni.data.mean()), float(o_ex.mean()), float(o_it.mean())


# -- layers used by the network -----------------------------------------------


class NiLIFLayer(Module):
    """NiLIF neuron over the last axis of (B, C, S, T), with membrane batch norm on E_in."""

    def __init__(self, kernel: LeakyKernel, channels: int | None = None):
        super().__init__()
        self.kernel = kernel
        if channels is not None:
            self.bn = BatchNorm2d(channels)
        else:
            self.bn = None

    def forward(self, x: Tensor) -> Tensor:
        e_in = effect_matrix(x, self.kernel)
        if self.bn is not None:
            e_in = self.bn(e_in)
        spikes, _ = nilif_from_effect(e_in, self.kernel)
        return spikes


class IterativeLIFModule(Module):
    """Recurrent LIF over the last axis, membrane batch norm applied to the weighted input."""

    def __init__(self, layer: IterativeLIFLayer, channels: int | None = None):
        super().__init__()
        self.layer = layer
        self.bn = BatchNorm2d(channels) if channels is not None else None

    def forward(self, x: Tensor) -> Tensor:
        if self.bn is not None:
            x = self.bn(x)
        spikes, _ = iterative_lif_forward(x, self.layer)
        return spikes
