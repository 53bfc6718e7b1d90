"""Acceptance criteria, one test per criterion, each recorded as a PASS/FAIL line
in the terminal summary."""

import time
from pathlib import Path

import numpy as np
import pytest

from nisnn import tensor as T
from nisnn import verify
from nisnn.cli import export_attention
from nisnn.data import loso_splits, synth_generate
from nisnn.model import NetworkSpec, build_cnn, build_snn, load_model
from nisnn.neurons import build_leaky_kernel, exact_lif_solve, nilif_forward, sparsity_compare
from nisnn.profiler import EnergyModel, micro_joules, profile_static
from nisnn.tensor import Tensor
from nisnn.train import TrainConfig, run_loso

from .test_neurons import FIXTURE_BITS, FIXTURE_WEIGHT

# published figures used for reconciliation
PUBLISHED_SNN_MAC = 1_170_040
PUBLISHED_SNN_RATES = (0.3966, 0.4311)
PUBLISHED_SNN_UJ = 7.165
PUBLISHED_CNN_UJ = 23.569
END_TO_END_SPEC = NetworkSpec(attention="global")
END_TO_END_CFG = TrainConfig(seed=0)


def _all(checks):
    bad = [c for c in checks if not c.passed]
    return not bad, bad[0] if bad else None


def test_c1_profiler_constants(acceptance_record):
    start = time.perf_counter()
    cnn = profile_static(build_cnn(NetworkSpec()))
    snn = profile_static(build_snn(NetworkSpec()))
    elapsed = time.perf_counter() - start
    got = (cnn.mac_total, snn.static_for("AC-conv"), snn.static_for("AC-fc"))
    ok = got == (4_810_040, 4_000_000, 10_000) and elapsed < 1.0
    acceptance_record("1 profiler constants", ok, f"CNN MAC {got[0]}, AC-conv {got[1]}, AC-fc {got[2]}, {elapsed:.3f}s")
    assert ok


def test_c2_spike_bounds(acceptance_record):
    start = time.perf_counter()
    checks = [c for c in verify.suite_props1(sequences=1000) if "bound" in c.name]
    elapsed = time.perf_counter() - start
    ok, bad = _all(checks)
    ok = ok and len(checks) == 6 and elapsed < 30
    acceptance_record("2 spike-train bounds", ok, f"{len(checks)} bound checks over t_n 9/49/199, {elapsed:.2f}s" + (f", first failure {bad.name}" if bad else ""))
    assert ok


def test_c3_nilif_oracle_agreement(acceptance_record):
    checks = verify.suite_nofire(sequences=1000)
    ok, _ = _all(checks)
    k = build_leaky_kernel(2.0, 1.0, 0.5, len(FIXTURE_BITS) - 1)
    x = FIXTURE_WEIGHT * np.array(FIXTURE_BITS, dtype=np.float64)
    exact = set(np.flatnonzero(exact_lif_solve(x, k)[0]).tolist())
    with T.no_grad():
        ni = set(np.flatnonzero(nilif_forward(Tensor(x, dtype=np.float64), k)[0].data).tolist())
    subset = ni < exact
    acceptance_record("3 NiLIF/oracle agreement", ok and subset, f"{checks[-1].detail}; fixture exact {sorted(exact)}, NiLIF {sorted(ni)}")
    assert ok and subset


def test_c4_gradient_statements(acceptance_record):
    checks = verify.suite_gradients()
    ok, bad = _all(checks)
    at100 = verify.decay_gradient(0.9, 100)
    detail = "; ".join(f"{c.name}: {c.detail}" for c in checks)
    acceptance_record("4 gradient decay / leaky-input gradient", ok and abs(at100 - 2.656e-5) < 1e-8, detail)
    assert ok and abs(at100 - 2.656e-5) < 1e-8


def test_c5_autodiff_integrity(acceptance_record):
    checks = verify.suite_autodiff()
    ok, bad = _all(checks)
    worst = max(checks, key=lambda c: float(c.detail.split()[3]))
    attention = [c for c in checks if c.name.startswith("attention")]
    ok = ok and len(attention) == 5
    acceptance_record("5 finite-difference checks", ok, f"{len(checks)} checks, worst {worst.name}: {worst.detail}")
    assert ok


def test_c6_attention_contracts(acceptance_record):
    checks = verify.suite_attention()
    ok, bad = _all(checks)
    acceptance_record("6 attention contracts", ok, f"{len(checks)} checks" + (f", failed {bad.name}" if bad else ""))
    assert ok


def test_c7_sparsity(acceptance_record):
    k = build_leaky_kernel(2.0, 1.0, 0.5, 49)
    x = np.random.default_rng(0).uniform(-1, 1, size=(1000, 50))
    ni, ex, it = sparsity_compare(x, k)
    acceptance_record("7 sparsity", ni <= it, f"NiLIF {ni:.4f}, exact {ex:.4f}, iterative {it:.4f}")
    assert ni <= it


def test_c8_energy_reconciliation(acceptance_record):
    em = EnergyModel()
    a, b = 4_000_000, 10_000
    ac = PUBLISHED_SNN_RATES[0] * a + PUBLISHED_SNN_RATES[1] * b
    derived = em.energy(PUBLISHED_SNN_MAC, ac) * 1e6
    snn_mac = profile_static(build_snn(NetworkSpec())).mac_total
    ours = em.energy(snn_mac, ac) * 1e6
    cnn = em.energy(profile_static(build_cnn(NetworkSpec())).mac_total, 0) * 1e6
    snn_gap = abs(derived - PUBLISHED_SNN_UJ) / PUBLISHED_SNN_UJ
    own_gap = abs(ours - PUBLISHED_SNN_UJ) / PUBLISHED_SNN_UJ
    cnn_gap = abs(cnn - PUBLISHED_CNN_UJ) / PUBLISHED_CNN_UJ
    ok = snn_mac == PUBLISHED_SNN_MAC and micro_joules(derived * 1e-6) == "6.814" and micro_joules(cnn * 1e-6) == "22.126" and max(snn_gap, own_gap, cnn_gap) < 0.10
    acceptance_record(
        "8 energy reconciliation",
        ok,
        f"SNN MAC {snn_mac}, SNN {derived:.3f} uJ ({snn_gap:.1%} off), own count {ours:.3f} uJ ({own_gap:.1%}), CNN {cnn:.3f} uJ ({cnn_gap:.1%})",
    )
    assert ok


# -- end-to-end ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    ds = synth_generate(0, n_subjects=3, trials_per_subject=60, channels=20, samples=400, difficulty=0.0)
    out = tmp_path_factory.mktemp("run1")
    start = time.perf_counter()
    summary = run_loso(END_TO_END_SPEC, ds, END_TO_END_CFG, out)
    return ds, out, summary, time.perf_counter() - start


def window_ratio(ds, run_dir: Path, export_root: Path) -> float:
    """Mean exported score over window samples / mean elsewhere, over every held-out trial."""
    a, b = ds.manifest.extra["window"]
    spec = END_TO_END_SPEC
    inside, outside = [], []
    for plan in loso_splits(ds.manifest):
        model, _, _ = load_model(run_dir / plan.held_out / "checkpoint.ckpt")
        for i in plan.test:
            paths = export_attention(model, ds, i, export_root / ds.manifest.trials[i].key)
            rows = np.loadtxt(paths["attention"], delimiter=",", skiprows=1)
            scores = np.zeros((spec.channels, spec.pieces // 2, spec.steps // 2))
            scores[rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 2].astype(int)] = rows[:, 3]
            # each pooled cell covers a 2x2 block of (piece, step), i.e. 4 input samples
            per_sample = scores.repeat(2, axis=1).repeat(2, axis=2).reshape(spec.channels, -1)
            mask = np.zeros(per_sample.shape[1], bool)
            mask[a:b] = True
            inside.append(per_sample[:, mask].mean())
            outside.append(per_sample[:, ~mask].mean())
    return float(np.mean(inside) / np.mean(outside))


def test_c9a_end_to_end_accuracy(end_to_end, acceptance_record):
    _, _, summary, elapsed = end_to_end
    acc = summary["mean_accuracy"]
    ok = acc >= 0.90 and elapsed < 300
    per = ", ".join(f"{s} {v:.3f}" for s, v in summary["accuracy"].items())
    acceptance_record("9a end-to-end LOSO accuracy", ok, f"mean {acc:.4f} ({per}) in {elapsed:.0f}s")
    assert ok


def test_c9b_attention_concentrates_on_window(end_to_end, acceptance_record, tmp_path):
    ds, run_dir, _, _ = end_to_end
    ratio = window_ratio(ds, run_dir, tmp_path)
    ok = ratio >= 1.5
    acceptance_record("9b attention window ratio", ok, f"window/elsewhere = {ratio:.3f} (needs >= 1.5)")
    assert ok


def test_c10_determinism(end_to_end, acceptance_record, tmp_path):
    ds, run_dir, summary, _ = end_to_end
    again = run_loso(END_TO_END_SPEC, ds, END_TO_END_CFG, tmp_path)
    diffs = []
    for plan in loso_splits(ds.manifest):
        for name in ("checkpoint.ckpt", "history.jsonl"):
            if (run_dir / plan.held_out / name).read_bytes() != (tmp_path / plan.held_out / name).read_bytes():
                diffs.append(f"{plan.held_out}/{name}")
    ok = not diffs and again == summary
    acceptance_record("10 determinism", ok, "checkpoints and histories bitwise identical" if ok else f"differs: {diffs}")
    assert ok
