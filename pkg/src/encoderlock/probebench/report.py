"""Probe measurements and the report derived from them.

Measurements (per-head accuracies, scratch baselines, sweeps) are the only
trained quantities; ``assemble`` turns them into every metric deterministically,
so a report can be regenerated from a run directory without retraining.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from torch import nn

from ..weightspace import DeltaW
from .metrics import (SecurityVerdict, UndefinedMetricError, aggregate_drop, pad_history, ppi, ppi_clamped,
                      relative_drop, security_verdict)
from .probe import DEFAULT_FRACTIONS, HeadConfig, data_fraction_sweep, default_grid, probe_detailed, train_from_scratch


@dataclass
class ProbeRecord:
    head: HeadConfig
    domain: str
    domain_role: str
    acc_o: float
    acc_m: float
    history_o: list[float] = field(default_factory=list)
    history_m: list[float] = field(default_factory=list)

    def __post_init__(self):
        for a in (self.acc_o, self.acc_m):
            if not 0 <= a <= 1:
                raise ValueError("accuracies must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeRecord":
        return cls(**{**d, "head": HeadConfig.from_dict(d["head"])})


@dataclass
class ProbeMeasurements:
    records: list[ProbeRecord]
    scratch: dict[str, float]  # train-from-scratch accuracy per prohibited domain
    sweep: dict[str, dict[str, float]] = field(default_factory=dict)  # domain -> fraction -> acc_m
    delta_w: dict | None = None
    num_classes: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records], "scratch": self.scratch, "sweep": self.sweep,
                "delta_w": self.delta_w, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeMeasurements":
        return cls([ProbeRecord.from_dict(r) for r in d["records"]], d["scratch"], d.get("sweep", {}),
                   d.get("delta_w"), d.get("num_classes", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ProbeMeasurements":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ProbeReport:
    records: list[ProbeRecord]
    relative_drop: dict[str, float]
    aggregate_drop_target: float
    delta_w: float | None  # per mille of eligible weights
    ppi: dict[str, float | None]
    ppi_clamped: dict[str, float]
    ppi_curve: dict[str, list[float | None]]
    verdict: SecurityVerdict
    scratch: dict[str, float]
    sweep: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records], "relative_drop": self.relative_drop,
                "aggregate_drop_target": self.aggregate_drop_target, "delta_w_per_mille": self.delta_w,
                "ppi": self.ppi, "ppi_clamped": self.ppi_clamped, "ppi_curve": self.ppi_curve,
                "verdict": self.verdict.as_dict(), "scratch": self.scratch, "sweep": self.sweep}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "role", "depth", "hidden_dim", "data_fraction", "acc_o", "acc_m", "relative_drop"])
        for r in self.records:
            drop = relative_drop(r.acc_o, r.acc_m) if r.acc_o > 0 else ""
            w.writerow([r.domain, r.domain_role, r.head.depth, r.head.hidden_dim or "", r.head.data_fraction,
                        f"{r.acc_o:.6f}", f"{r.acc_m:.6f}", f"{drop:.6f}" if drop != "" else ""])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())


def _default_records(meas: ProbeMeasurements) -> dict[str, ProbeRecord]:
    """The first record per domain, i.e. the grid's default head."""
    out: dict[str, ProbeRecord] = {}
    for r in meas.records:
        out.setdefault(r.domain, r)
    return out


def assemble(meas: ProbeMeasurements, epsilon: float = 0.02) -> ProbeReport:
    default = _default_records(meas)
    auth = [d for d, r in default.items() if r.domain_role == "authorized"]
    targets = [d for d, r in default.items() if r.domain_role == "prohibited"]
    if len(auth) != 1 or not targets:
        raise ValueError("need exactly one authorized and at least one prohibited domain")
    base = default[auth[0]]
    drops = {d: relative_drop(r.acc_o, r.acc_m) for d, r in default.items()}
    agg = aggregate_drop([(default[d].acc_o, default[d].acc_m) for d in targets])
    ppis: dict[str, float | None] = {}
    clamped: dict[str, float] = {}
    curves: dict[str, list[float | None]] = {}
    for d in targets:
        t = default[d]
        key = f"{d}|{base.domain}"
        floor = 1.0 / meas.num_classes.get(d, 10)
        try:
            ppis[key] = ppi(t.acc_o, t.acc_m, base.acc_o, base.acc_m)
        except UndefinedMetricError:
            ppis[key] = None
        clamped[key] = ppi_clamped(t.acc_o, t.acc_m, base.acc_o, base.acc_m, floor)
        n = max(len(t.history_o), len(t.history_m), len(base.history_o), len(base.history_m))
        hs = [pad_history(h, n) for h in (t.history_o, t.history_m, base.history_o, base.history_m)]
        curve = []
        for e in range(n if all(hs) else 0):
            try:
                curve.append(ppi(hs[0][e], hs[1][e], hs[2][e], hs[3][e]))
            except UndefinedMetricError:
                curve.append(None)
        curves[key] = curve
    # worst case over prohibited domains and every head in the grid
    margins = {}
    for d in targets:
        worst = max(r.acc_m for r in meas.records if r.domain == d)
        margins[d] = (worst - meas.scratch[d], worst)
    d_star = max(margins, key=lambda d: margins[d][0])
    verdict = security_verdict(margins[d_star][1], meas.scratch[d_star], drops[base.domain], epsilon)
    dw = None
    if meas.delta_w:
        dw = DeltaW(**meas.delta_w).per_mille
    return ProbeReport(meas.records, drops, agg, dw, ppis, clamped, curves, verdict, meas.scratch, meas.sweep)


def measure(encoder_o: nn.Module, encoder_m: nn.Module, domains: dict[str, tuple[str, object]],
            grid: list[HeadConfig] | None = None, seed: int = 0, scratch: dict[str, float] | None = None,
            fractions=DEFAULT_FRACTIONS, delta_w: DeltaW | None = None, sweep: bool = True) -> ProbeMeasurements:
    """Probe original and locked encoders on every domain with every head.

    ``domains`` maps a name to ``(role, dataset)``. Scratch baselines are trained
    for prohibited domains not already given in ``scratch``.
    """
    grid = grid or default_grid()
    records, scratch = [], dict(scratch or {})
    sweeps: dict[str, dict[str, float]] = {}
    ncls = {}
    for name, (role, ds) in domains.items():
        ncls[name] = ds.num_classes if getattr(ds, "num_classes", None) else 10
        heads = grid if role == "prohibited" else grid[:1]
        for h in heads:
            o = probe_detailed(encoder_o, ds, h, seed)
            m = probe_detailed(encoder_m, ds, h, seed)
            records.append(ProbeRecord(h, name, role, o.accuracy, m.accuracy, o.history, m.history))
        if role == "prohibited":
            if name not in scratch:
                scratch[name] = train_from_scratch(ds, grid[0].data_fraction, seed)
            if sweep:
                sw = data_fraction_sweep(encoder_m, ds, grid[0], fractions, seed)
                sweeps[name] = {str(k): v for k, v in sw.items()}
    dw = asdict(delta_w) if delta_w is not None else None
    return ProbeMeasurements(records, scratch, sweeps, dw, ncls)
