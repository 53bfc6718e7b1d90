"""Static FLOPs accounting and the MAC/AC energy model.

One MAC (multiply-accumulate) counts as one FLOP unit, as do the products in
the three formulas below.  Bias additions, batch norm, ReLU, pooling, softmax,
thresholding and elementwise residual/attention mixing are not part of the
MAC/AC totals; they are listed per layer under ``uncounted``.

Neuron overhead: a NiLIF neuron over T steps costs two (1 x T)(T x T) products
and the length-T membrane subtraction (2 T^2 + T), plus two comparisons (2 T,
uncounted).  An iterative neuron costs one decay multiply per step (T) plus the
reset subtraction, input add and comparison (3 T, uncounted).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import Network

MAC_CLASSES = ("MAC-conv", "MAC-fc", "MAC-matmul", "neuron-overhead")
AC_CLASSES = ("AC-conv", "AC-fc")


def flops_conv(k0: int, k1: int, h: int, w: int, c_out: int, c_in: int) -> int:
    return int(k0) * int(k1) * int(h) * int(w) * int(c_out) * int(c_in)


def flops_fc(i: int, o: int) -> int:
    return int(i) * int(o)


def flops_mm(m1: int, n: int, m2: int) -> int:
    return int(m1) * int(n) * int(m2)


@dataclass(frozen=True)
class EnergyModel:
    mac_joules: float = 4.6e-12
    ac_joules: float = 0.9e-12

    def __post_init__(self):
        if self.mac_joules <= 0 or self.ac_joules <= 0:
            raise ContractError("energy per operation must be positive")

    def energy(self, mac: float, ac_effective: float) -> float:
        return self.mac_joules * mac + self.ac_joules * ac_effective


@dataclass
class LayerCost:
    name: str
    op_class: str
    static: int
    rate: float | None = None
    uncounted: int = 0

    @property
    def effective(self) -> float:
        if self.op_class in AC_CLASSES:
            return self.static * (self.rate if self.rate is not None else 1.0)
        return float(self.static)


@dataclass
class CostReport:
    records: list[LayerCost] = field(default_factory=list)
    energy_model: EnergyModel = field(default_factory=EnergyModel)

    @property
    def mac_total(self) -> int:
        return sum(r.static for r in self.records if r.op_class in MAC_CLASSES)

    @property
    def ac_static_total(self) -> int:
        return sum(r.static for r in self.records if r.op_class in AC_CLASSES)

    @property
    def ac_effective_total(self) -> float:
        return float(sum(r.effective for r in self.records if r.op_class in AC_CLASSES))

    @property
    def rates_known(self) -> bool:
        return all(r.rate is not None for r in self.records if r.op_class in AC_CLASSES)

    @property
    def energy_joules(self) -> float:
        return self.energy_model.energy(self.mac_total, self.ac_effective_total)

    def static_for(self, op_class: str) -> int:
        return sum(r.static for r in self.records if r.op_class == op_class)

    def with_rates(self, rates: dict[str, float]) -> "CostReport":
        recs = [replace(r, rate=rates[r.name]) if r.op_class in AC_CLASSES and r.name in rates else r for r in self.records]
        return CostReport(recs, self.energy_model)


# -- static walk --------------------------------------------------------------


def _attention_costs(kind: str, cfg, C: int, S: int, Tn: int) -> list[LayerCost]:
    n = C * S * Tn
    if kind == "linear-seq":
        feat, hid = C * Tn, cfg.d1 * cfg.d2
        return [
            LayerCost("attention.qkv", "MAC-fc", 3 * S * flops_fc(feat, hid), uncounted=n),
            LayerCost("attention.scores", "MAC-matmul", cfg.d1 * flops_mm(S, cfg.d2, S), uncounted=cfg.d1 * S * S),
            LayerCost("attention.mix", "MAC-matmul", cfg.d1 * flops_mm(S, S, cfg.d2)),
            LayerCost("attention.out", "MAC-fc", S * flops_fc(hid, feat)),
        ]
    if kind == "linear-chanseq":
        hid = cfg.d1 * cfg.d2
        return [
            LayerCost("attention.qkv", "MAC-fc", 3 * C * S * flops_fc(Tn, hid), uncounted=n),
            LayerCost("attention.scores", "MAC-matmul", C * cfg.d1 * flops_mm(S, cfg.d2, S), uncounted=C * cfg.d1 * S * S),
            LayerCost("attention.mix", "MAC-matmul", C * cfg.d1 * flops_mm(S, S, cfg.d2)),
            LayerCost("attention.out", "MAC-fc", C * S * flops_fc(hid, Tn)),
        ]
    proj = 2 * flops_conv(1, 1, S, Tn, cfg.d * C, C)
    if kind == "conv-seq":
        return [
            LayerCost("attention.qk", "MAC-conv", proj),
            LayerCost("attention.scores", "MAC-matmul", flops_mm(S, cfg.d * C * Tn, S), uncounted=S * S),
            LayerCost("attention.mix", "MAC-matmul", flops_mm(S, S, C * Tn), uncounted=2 * n),
        ]
    if kind == "conv-chanseq":
        return [
            LayerCost("attention.qk", "MAC-conv", proj),
            LayerCost("attention.scores", "MAC-matmul", C * flops_mm(S, cfg.d * Tn, S), uncounted=C * S * S),
            LayerCost("attention.mix", "MAC-matmul", C * flops_mm(S, S, Tn), uncounted=2 * n),
        ]
    if kind == "global":
        return [
            LayerCost("attention.qk", "MAC-conv", proj),
            LayerCost("attention.scores", "MAC-matmul", C * flops_mm(S, cfg.d * Tn, Tn), uncounted=C * S * Tn),
            LayerCost("attention.mix", "MAC-matmul", 0, uncounted=3 * n),
        ]
    raise ContractError(f"no cost rule for attention kind {kind!r}")


def profile_static(model: Network) -> CostReport:
    recs: list[LayerCost] = []
    for info in model.layer_plan():
        shape = info.in_shape
        numel = int(np.prod(shape))
        if info.kind == "conv":
            conv = info.module
            C, H, W = shape
            count = flops_conv(*conv.kernel, H, W, conv.c_out, conv.c_in)
            recs.append(LayerCost(info.name, "AC-conv" if info.ac else "MAC-conv", count, uncounted=conv.c_out * H * W))
        elif info.kind == "fc":
            fc = info.module
            recs.append(LayerCost(info.name, "AC-fc" if info.ac else "MAC-fc", flops_fc(fc.n_in, fc.n_out), uncounted=fc.n_out))
        elif info.kind in ("nilif", "iterative"):
            C, S, Tn = shape
            neurons = C * S
            if info.kind == "nilif":
                per, skipped = 2 * Tn * Tn + Tn, 2 * Tn
            else:
                per, skipped = Tn, 3 * Tn
            recs.append(LayerCost(info.name, "neuron-overhead", neurons * per, uncounted=neurons * skipped + 2 * numel))
        elif info.kind in ("bn", "relu", "pool", "add"):
            recs.append(LayerCost(info.name, "uncounted", 0, uncounted=2 * numel if info.kind == "bn" else numel))
        else:
            recs.extend(_attention_costs(info.kind, info.module.cfg, *shape))
    return CostReport(recs)


def measure_spike_rates(model: Network, batches: Iterable) -> CostReport:
    """Static report with AC rates = mean of the binary inputs seen over all batches."""
    report = profile_static(model)
    ac = model.ac_layers()
    ones = {name: 0.0 for name in ac}
    total = {name: 0.0 for name in ac}
    seen = 0
    model.eval()
    with T.no_grad():
        for batch in batches:
            model(T.as_tensor(batch))
            seen += 1
            for name in ac:
                s, n = model.trace[f"{name}.ones"]
                ones[name] += s
                total[name] += n
    if seen == 0:
        raise ContractError("spike-rate measurement needs at least one batch")
    return report.with_rates({name: ones[name] / total[name] for name in ac})


# -- rendering ----------------------------------------------------------------

COLUMNS = ("layer", "op_class", "static", "rate", "effective", "uncounted")


def micro_joules(joules: float) -> str:
    return f"{joules * 1e6:.3f}"


def render_report(report: CostReport, fmt: str = "table") -> str:
    if fmt == "json-lines":
        lines = [
            json.dumps(
                {"layer": r.name, "op_class": r.op_class, "static": r.static, "rate": r.rate, "uncounted": r.uncounted},
                sort_keys=False,
            )
            for r in report.records
        ]
        return "".join(line + "\n" for line in lines)
    if fmt != "table":
        raise ContractError(f"unknown report format {fmt!r}")
    rows = [COLUMNS]
    for r in report.records:
        rate = "-" if r.rate is None else f"{r.rate:.4f}"
        eff = f"{r.effective:.0f}" if r.op_class in AC_CLASSES and r.rate is not None else str(r.static)
        rows.append((r.name, r.op_class, str(r.static), rate, eff, str(r.uncounted)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    out = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    out.append("")
    out.append(f"MAC total: {report.mac_total}")
    out.append(f"AC static total: {report.ac_static_total}")
    for cls in AC_CLASSES:
        out.append(f"{cls} static: {report.static_for(cls)}")
    if report.rates_known:
        out.append(f"AC effective total: {report.ac_effective_total:.0f}")
        out.append(f"Energy (uJ): {micro_joules(report.energy_joules)}")
    else:
        out.append(f"Energy (uJ, MAC only): {micro_joules(report.energy_model.energy(report.mac_total, 0))}")
    return "\n".join(out) + "\n"


def parse_json_lines(text: str, energy_model: EnergyModel | None = None) -> CostReport:
    recs = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        recs.append(LayerCost(d["layer"], d["op_class"], int(d["static"]), d["rate"], int(d["uncounted"])))
    return CostReport(recs, energy_model or EnergyModel())


def report_to_dict(report: CostReport) -> dict:
    return {"records": [asdict(r) for r in report.records], "mac_total": report.mac_total}
