"""Invariant suites behind ``nisnn verify``.

Each suite returns a list of ``Check`` records.  A failed check carries the
first counterexample found, as a JSON-serialisable dict.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import KINDS, AttentionConfig, build_attention
from .data import load_dataset, loso_splits, segment, synth_generate
from .gradcheck import check_gradients, check_module_gradients
from .layers import BatchNorm2d
from .model import NetworkSpec, build_cnn, build_snn
from .neurons import (
    IterativeLIFLayer,
    build_leaky_kernel,
    exact_lif_solve,
    iterative_lif_forward,
    nilif_forward,
    spike_bounds,
)
from .profiler import profile_static
from .tensor import Tensor
from .train import ce_loss


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    counterexample: dict | None = field(default=None)


def _json_safe(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def _example(**kw) -> dict:
    return {k: _json_safe(v) for k, v in kw.items()}


# -- spike-train bounds -------------------------------------------------------

PROPS1_STEPS = (9, 49, 199)


def random_inputs(rng: np.random.Generator, n: int, steps: int) -> np.ndarray:
    """Weighted input sequences, uniform in [-1, 1]."""
    return rng.uniform(-1.0, 1.0, size=(n, steps))


def suite_props1(seed: int = 0, sequences: int = 1000, tau: float = 2.0, v_th: float = 0.5) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for t_n in PROPS1_STEPS:
        kernel = build_leaky_kernel(tau, 1.0, v_th, t_n)
        diag = np.diag(kernel.l_out)
        shifted = np.allclose(kernel.l_out[:, 1:], v_th * kernel.l_in[:, :-1], rtol=0, atol=1e-12)
        ok = not diag.any() and shifted and not np.tril(kernel.l_in, -1).any()
        checks.append(
            Check(
                "props1",
                f"kernel structure t_n={t_n}",
                ok,
                "L_out = v_th * L_in shifted one step, zero diagonal",
                None if ok else _example(t_n=t_n, l_out_diagonal=diag[: min(5, diag.size)]),
            )
        )

        x = random_inputs(rng, sequences, t_n + 1)
        o, _ = exact_lif_solve(x, kernel)
        lower, upper = spike_bounds(x, kernel)
        # a spike train solves the dynamics iff it reproduces itself through the full reset term
        e_in = x @ kernel.l_in
        refire = (e_in - o @ kernel.l_out) > v_th
        for name, bad in (
            ("fixed point", refire != o.astype(bool)),
            ("upper bound", o > upper),
            ("lower bound", o < lower),
        ):
            hits = np.argwhere(bad)
            ex = None
            if hits.size:
                i, t = hits[0]
                ex = _example(t_n=t_n, sequence=int(i), step=int(t), x=x[i], spikes=o[i])
            checks.append(Check("props1", f"{name} t_n={t_n}", not hits.size, f"{int(bad.sum())} violations", ex))
    return checks


# -- no-fire equivalence --------------------------------------------------------


def no_fire_inputs(rng: np.random.Generator, n: int, steps: int, kernel) -> np.ndarray:
    """Random inputs scaled so that the exact dynamics stay below threshold."""
    x = rng.uniform(-1.0, 1.0, size=(n, steps))
    peak = np.abs(x @ kernel.l_in).max(axis=1, keepdims=True)
    return x * (0.9 * kernel.v_th / np.maximum(peak, 1e-12))


def suite_nofire(seed: int = 0, sequences: int = 500) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for t_n in PROPS1_STEPS:
        kernel = build_leaky_kernel(2.0, 1.0, 0.5, t_n)
        x = no_fire_inputs(rng, sequences, t_n + 1, kernel).astype(np.float32)
        o_ex, u_ex = exact_lif_solve(x, kernel)
        with T.no_grad():
            o_ni, u_ni = nilif_forward(Tensor(x), kernel)
        err = np.abs(u_ni.data - u_ex)
        worst = np.unravel_index(np.argmax(err), err.shape)
        ok = err.max() < 1e-5 and not o_ex.any() and not o_ni.data.any()
        ex = None if ok else _example(t_n=t_n, sequence=int(worst[0]), step=int(worst[1]), error=err.max())
        checks.append(Check("nofire", f"U agreement t_n={t_n}", bool(ok), f"max |dU| = {err.max():.2e}", ex))
    return checks


# -- gradient properties ------------------------------------------------------


def decay_gradient(lam: float, t: int, x0: float = 0.01) -> float:
    """d u^t / d x^0 for the iterative neuron, from the tape."""
    c = Tensor(np.array([x0], dtype=np.float32), requires_grad=True)
    pulse = np.zeros((1, t + 1), dtype=np.float32)
    pulse[0, 0] = 1.0
    _, u = iterative_lif_forward(c * Tensor(pulse), IterativeLIFLayer(lam))
    u[0, t].backward()
    return float(c.grad[0])


def construction_gradient(t_n: int = 199, tau: float = 2.0, seed: int = 0) -> tuple[float, float]:
    """Gradient of u^{t_n} w.r.t. a shared weight w against sum_i x^i L(t_n - i).

    Inputs before t_n are negative, so no earlier step fires and the surrogate
    window is closed on the reset path; x^{t_n} > 0 puts u^{t_n} inside (0, 1).
    """
    kernel = build_leaky_kernel(tau, 1.0, 0.5, t_n)
    rng = np.random.default_rng(seed)
    x = -rng.uniform(0.001, 0.01, size=(1, t_n + 1)).astype(np.float32)
    x[0, t_n] = 0.8
    w = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    _, u = nilif_forward(w * Tensor(x), kernel)
    u[0, t_n].backward()
    lag = t_n - np.arange(t_n + 1)
    expected = float(np.sum(x[0].astype(np.float64) * np.exp(-lag * kernel.delta_t / tau)))
    return float(w.grad[0]), expected


def suite_gradients() -> list[Check]:
    checks = []
    lam = 0.9
    for t in (10, 50, 100):
        got = decay_gradient(lam, t)
        want = lam**t
        ok = abs(got - want) < 1e-6
        checks.append(
            Check("gradients", f"decay lam^t t={t}", ok, f"{got:.6e} vs {want:.6e}", None if ok else _example(t=t, got=got, want=want))
        )
    got, want = construction_gradient()
    ok = abs(got - want) < 1e-6 and abs(got) > 1e-3
    checks.append(
        Check("gradients", "leaky-input construction t_n=199", ok, f"{got:.6e} vs {want:.6e}", None if ok else _example(got=got, want=want))
    )
    return checks


# -- attention contracts --------------------------------------------------------

ATTN_SHAPE = (2, 3, 4, 4)


def small_attention(kind: str, seed: int = 0, alpha: float = 0.0):
    cfg = AttentionConfig(kind, d1=2, d2=3, d=2, alpha_init=alpha)
    return build_attention(cfg, *ATTN_SHAPE[1:], np.random.default_rng(seed))


def suite_attention(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ATTN_SHAPE).astype(np.float32)
    checks = []
    for kind in KINDS:
        att = small_attention(kind, seed, alpha=0.7)
        with T.no_grad():
            out, scores = att.forward_with_scores(Tensor(x))
        sums = scores.data.sum(axis=-1)
        checks.append(Check("attention", f"{kind} shape", out.shape == ATTN_SHAPE, f"{out.shape}"))
        dev = float(np.abs(sums - 1).max())
        checks.append(Check("attention", f"{kind} row sums", dev < 1e-6, f"max |sum - 1| = {dev:.1e}"))
        if kind.startswith("conv") or kind == "global":
            ident = small_attention(kind, seed, alpha=0.0)
            with T.no_grad():
                y = ident(Tensor(x)).data
            same = np.array_equal(y, x)
            checks.append(Check("attention", f"{kind} alpha=0 identity", same, "exact" if same else "differs"))
    return checks


# -- autodiff against finite differences ----------------------------------------

FD_TOL = 1e-3


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = rng.standard_normal
    away = lambda shape: np.sign(r(shape)) * (0.2 + np.abs(r(shape)))  # noqa: E731  keeps relu off its kink
    bn_state = BatchNorm2d(3)
    return {
        "add": (lambda a, b: ((a + b) * (a + b)).sum(), [r((3, 4)), r((4,))]),
        "sub": (lambda a, b: ((a - b) * (a - b)).sum(), [r((3, 4)), r((3, 1))]),
        "mul": (lambda a, b: (a * b * a).sum(), [r((2, 3)), r((2, 3))]),
        "scale": (lambda a: (T.scale(a, 0.3) * a / 2.0).sum(), [r((2, 3))]),
        "exp/log": (lambda a: T.log(T.exp(a) + 1.0).sum(), [r((3, 3))]),
        "relu": (lambda a: (T.relu(a) * T.relu(a)).sum(), [away((4, 4))]),
        "clamp_min": (lambda a: (T.clamp_min(a, 0.1) * a).sum(), [away((4, 4))]),
        "mean": (lambda a: (T.mean(a, axis=1) * T.mean(a, axis=1)).sum(), [r((3, 5))]),
        "reshape/permute": (lambda a: (a.reshape(2, 3, 2).permute(2, 0, 1) * Tensor(np.arange(12.0).reshape(2, 2, 3))).sum(), [r((4, 3))]),
        "getitem": (lambda a: (a[1:, ::2] * a[1:, ::2]).sum(), [r((3, 4))]),
        "stack": (lambda a, b: (T.stack([a, b * a], axis=-1) * T.stack([b, a], axis=-1)).sum(), [r((2, 3)), r((2, 3))]),
        "matmul": (lambda a, b: ((a @ b) * (a @ b)).sum(), [r((2, 3, 4)), r((4, 5))]),
        "softmax": (lambda a: (T.softmax_lastdim(a) * Tensor(np.arange(10.0).reshape(2, 5))).sum(), [r((2, 5))]),
        "conv2d": (lambda x, w, b: (T.conv2d_same(x, w, b) * T.conv2d_same(x, w, b)).sum(), [r((2, 2, 5, 6)), r((3, 2, 3, 2)), r((3,))]),
        "max_pool2d": (lambda x: (T.max_pool2d(x) * T.max_pool2d(x)).sum(), [r((2, 2, 4, 4))]),
        "avg_pool2d": (lambda x: (T.avg_pool2d(x) * T.avg_pool2d(x)).sum(), [r((2, 2, 4, 4))]),
        "batchnorm2d": (
            lambda x, g, b: (T.batchnorm2d(x, g, b, bn_state.state, True) * Tensor(np.arange(48.0).reshape(2, 3, 2, 4))).sum(),
            [r((2, 3, 2, 4)), r((3,)), r((3,))],
        ),
        "cross_entropy": (lambda z: ce_loss(z, np.eye(3)[[0, 2, 1, 1]]), [r((4, 3))]),
    }


def suite_autodiff(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for name, (fn, arrays) in _op_cases(rng).items():
        err = check_gradients(fn, arrays)
        checks.append(Check("autodiff", name, err < FD_TOL, f"max rel err {err:.1e}", None if err < FD_TOL else _example(op=name, error=err)))
    x = rng.standard_normal(ATTN_SHAPE)
    for kind in KINDS:
        att = small_attention(kind, seed, alpha=0.7)
        errs = check_module_gradients(att, x, seed)
        worst = max(errs, key=errs.get)
        ok = errs[worst] < FD_TOL
        checks.append(
            Check("autodiff", f"attention {kind}", ok, f"max rel err {errs[worst]:.1e} ({worst})", None if ok else _example(kind=kind, tensor=worst, error=errs[worst]))
        )
    return checks


# -- profiler constants ---------------------------------------------------------

CNN_MAC = 4_810_040
SNN_AC_CONV = 4_000_000
SNN_AC_FC = 10_000


def suite_profiler() -> list[Check]:
    spec = NetworkSpec()
    cnn = profile_static(build_cnn(spec))
    snn = profile_static(build_snn(spec))
    pairs = (
        ("CNN MAC total", cnn.mac_total, CNN_MAC),
        ("SNN AC-conv", snn.static_for("AC-conv"), SNN_AC_CONV),
        ("SNN AC-fc", snn.static_for("AC-fc"), SNN_AC_FC),
    )
    return [Check("profiler", name, got == want, f"{got} (expected {want})", None if got == want else _example(got=got, want=want)) for name, got, want in pairs]


# -- data -------------------------------------------------------------------------


def suite_data(dataset_path=None, seed: int = 7) -> list[Check]:
    if dataset_path is not None:
        ds = load_dataset(Path(dataset_path))
        source = str(dataset_path)
    else:
        ds = synth_generate(seed)
        again = synth_generate(seed)
        source = f"synth seed {seed}"
    m = ds.manifest
    checks = []
    if dataset_path is None:
        same = np.array_equal(ds.signals, again.signals) and m.to_json() == again.manifest.to_json()
        checks.append(Check("data", "generator determinism", same, source))
    finite = bool(np.isfinite(ds.signals).all())
    checks.append(Check("data", "finite signals", finite, source))
    shape_ok = ds.signals.shape == (len(m.trials), m.channels, m.samples)
    checks.append(Check("data", "extents match manifest", shape_ok, f"{ds.signals.shape}"))
    counts = {}
    for ref in m.trials:
        counts.setdefault(ref.subject, []).append(ref.label)
    worst = max((abs(sum(1 for v in labels if v == 1) - sum(1 for v in labels if v == 0)) for labels in counts.values()), default=0)
    checks.append(Check("data", "class balance per subject", worst <= 1, f"max count gap {worst}"))
    plans = loso_splits(m) if len(m.subjects) >= 2 else []
    partition = all(sorted(p.train + p.test) == list(range(len(m.trials))) and not set(p.train) & set(p.test) for p in plans)
    checks.append(Check("data", "LOSO partitions", partition and len(plans) == len(m.subjects), f"{len(plans)} splits"))
    D = m.samples
    steps = next((t for t in range(int(np.sqrt(D)), 0, -1) if D % t == 0), 1)
    seg = segment(ds.signals[:1], D // steps, steps)
    checks.append(Check("data", "segmentation round trip", np.array_equal(seg.reshape(ds.signals[:1].shape), ds.signals[:1]), f"S={D // steps}, T={steps}"))
    return checks


SUITES: dict[str, Callable[..., list[Check]]] = {
    "props1": suite_props1,
    "nofire": suite_nofire,
    "gradients": suite_gradients,
    "attention": suite_attention,
    "autodiff": suite_autodiff,
    "profiler": suite_profiler,
    "data": suite_data,
}


def run_suites(names=None, dataset_path=None) -> list[Check]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(unknown[0])
    results = []
    for name in names:
        results.extend(SUITES[name](dataset_path) if name == "data" else SUITES[name]())
    return results


def render_checks(checks: list[Check]) -> str:
    rows = [("suite", "check", "status", "detail")]
    rows += [(c.suite, c.name, "PASS" if c.passed else "FAIL", c.detail) for c in checks]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join([r[0].ljust(widths[0]), r[1].ljust(widths[1]), r[2].ljust(widths[2]), r[3]]).rstrip() for r in rows]
    failed = [c for c in checks if not c.passed]
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    if failed:
        first = failed[0]
        lines.append("first counterexample: " + json.dumps({"suite": first.suite, "check": first.name, "example": first.counterexample}))
    return "\n".join(lines) + "\n"
