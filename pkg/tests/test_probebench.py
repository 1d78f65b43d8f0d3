import csv
import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from encoderlock.expcli.datasets import toy_handle
from encoderlock.models import ConstantEncoder, ToyEncoder
from encoderlock.probebench import (DomainSpec, EncoderMutationError, HeadConfig, ProbeMeasurements, ProbeRecord,
                                    UndefinedMetricError, Verdict, aggregate_drop, assemble, default_grid,
                                    domain_similarity, measure, ppi, ppi_clamped, probe, probe_detailed,
                                    relative_drop, security_verdict)
from encoderlock.probebench.metrics import pad_history
from encoderlock.probebench.plots import plot_fraction_sweep, plot_ppi_curve

MT_ROW = [(96.35, 8.47), (43.74, 18.98), (68.24, 18.05), (69.65, 13.67)]


def test_relative_drop_cells():
    assert relative_drop(99.53, 99.32) == pytest.approx(0.0021, abs=5e-5)
    assert relative_drop(0.5, 0.5) == 0.0
    assert relative_drop(0.4, 0.6) < 0
    with pytest.raises(UndefinedMetricError):
        relative_drop(0.0, 0.1)


def test_aggregate_drop_is_ratio_of_sums():
    oracle = sum(o - m for o, m in MT_ROW) / sum(o for o, _ in MT_ROW)
    assert aggregate_drop(MT_ROW) == pytest.approx(oracle, abs=1e-12)
    assert aggregate_drop(MT_ROW) == pytest.approx(0.7871, abs=5e-5)
    # not the mean of per-domain drops
    assert abs(aggregate_drop(MT_ROW) - np.mean([relative_drop(o, m) for o, m in MT_ROW])) > 1e-3
    with pytest.raises(UndefinedMetricError):
        aggregate_drop([])


def test_ppi_cells():
    assert ppi(94.7, 17.8, 94.2, 93.5) == pytest.approx(5.281, abs=1e-3)
    assert ppi(0.9, 0.9, 0.8, 0.8) == 1.0
    with pytest.raises(UndefinedMetricError, match="floor"):
        ppi(0.9, 0.0, 0.9, 0.9)
    assert ppi_clamped(0.9, 0.0, 0.9, 0.9, 0.1) == pytest.approx(9.0)


@settings(max_examples=50, deadline=None)
@given(o=st.floats(0.01, 1), m=st.floats(0.01, 1), k=st.floats(0.1, 10))
def test_metric_scale_invariance(o, m, k):
    assert relative_drop(o * k, m * k) == pytest.approx(relative_drop(o, m), abs=1e-9)
    assert ppi(o, m, m, o) == pytest.approx((o / m) ** 2, rel=1e-9)


def test_verdict_clauses():
    assert security_verdict(0.10, 0.78, 0.01).verdict is Verdict.SECURE
    # equality on either clause is still secure
    assert security_verdict(0.78, 0.78, 0.02).secure
    v = security_verdict(0.80, 0.78, 0.01)
    assert not v.secure and v.violated == ("attacker-advantage",)
    v = security_verdict(0.10, 0.78, 0.03)
    assert v.violated == ("utility",)
    assert security_verdict(0.9, 0.78, 0.5).violated == ("attacker-advantage", "utility")
    assert security_verdict(0.1, 0.78, 0.03, epsilon=0.05).secure
    assert json.loads(json.dumps(v.as_dict()))["verdict"] == "NOT_SECURE"


def test_pad_history():
    assert pad_history([0.1, 0.2], 4) == [0.1, 0.2, 0.2, 0.2]
    assert pad_history([], 3) == []


def test_head_config_validation():
    assert HeadConfig().label == "linear"
    assert HeadConfig(3, 256).label == "d3h256"
    for bad in ({"depth": 0}, {"depth": 5, "hidden_dim": 64}, {"depth": 1, "hidden_dim": 64},
                {"depth": 2, "hidden_dim": 100}, {"data_fraction": 0.0}, {"optimizer": {"name": "sgd"}}):
        with pytest.raises(ValueError):
            HeadConfig(**bad)
    h = HeadConfig(2, 64, data_fraction=0.5)
    assert HeadConfig.from_dict(json.loads(json.dumps(h.to_dict()))) == h
    grid = default_grid()
    assert grid[0] == HeadConfig() and len(grid) == 5


def test_domain_spec_validation():
    DomainSpec("prohibited", 3, "military vehicles")
    DomainSpec("authorized", 1, "toy_mnist")
    with pytest.raises(ValueError):
        DomainSpec("friend", 1, "x")
    with pytest.raises(ValueError):
        DomainSpec("prohibited", 4, "x")
    with pytest.raises(ValueError):
        DomainSpec("prohibited", 3, None)


def test_domain_similarity_oracle():
    rng = np.random.default_rng(0)
    xa = torch.tensor(rng.random((20, 2, 2, 2)), dtype=torch.float32)
    xb = torch.tensor(rng.random((15, 2, 2, 2)), dtype=torch.float32) ** 3
    enc = nn.Flatten()
    a, b = {"test": (xa, None)}, {"test": (xb, None)}
    ma, mb = xa.reshape(20, -1).double().mean(0).numpy(), xb.reshape(15, -1).double().mean(0).numpy()
    oracle = ma @ mb / np.linalg.norm(ma) / np.linalg.norm(mb)
    assert domain_similarity(a, b, enc) == pytest.approx(oracle, abs=1e-6)
    assert domain_similarity(a, a, enc) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        domain_similarity(a, {"test": (xa[:0], None)}, enc)


def _imbalanced(n, seed):
    g = torch.Generator().manual_seed(seed)
    y = (torch.rand(n, generator=g) > 0.7).long() * torch.randint(1, 4, (n,), generator=g)
    return torch.rand(n, 3, 4, 4, generator=g), y


def test_constant_encoder_probes_at_majority_rate():
    ds = {"train": _imbalanced(2000, 0), "test": _imbalanced(1000, 1)}
    majority = float((ds["test"][1] == 0).float().mean())
    acc = probe(ConstantEncoder(8), ds, HeadConfig(data_fraction=0.5))
    assert acc == pytest.approx(majority, abs=0.02)


class SelfMutating(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(4))

    def forward(self, x):
        with torch.no_grad():
            self.w += 1
        return x.flatten(1)[:, :4] + self.w


def test_probe_refuses_encoder_mutation():
    ds = {"train": _imbalanced(100, 0), "test": _imbalanced(50, 1)}
    with pytest.raises(EncoderMutationError):
        probe(SelfMutating(), ds, HeadConfig(data_fraction=1.0))


def test_probe_is_deterministic_and_leaves_encoder():
    torch.manual_seed(0)
    enc = ToyEncoder()
    ds = toy_handle("mnist", {"train": 300, "test": 200})
    a = probe_detailed(enc, ds, HeadConfig(data_fraction=0.5), seed=3)
    b = probe_detailed(enc, ds, HeadConfig(data_fraction=0.5), seed=3)
    assert a == b
    assert len(a.history) == a.epochs_trained
    with pytest.raises(ValueError):
        probe(enc, {"train": (torch.zeros(4, 3, 32, 32), None), "test": (torch.zeros(4, 3, 32, 32), None)})


def synthetic_measurements(worst_target=0.15, acc_m_source=0.88) -> ProbeMeasurements:
    lin, mlp = HeadConfig(), HeadConfig(2, 64)
    recs = [
        ProbeRecord(lin, "src", "authorized", 0.88, acc_m_source, [0.5, 0.8, 0.88], [0.5, 0.8, acc_m_source]),
        ProbeRecord(lin, "tgt", "prohibited", 0.86, 0.12, [0.6, 0.86], [0.1, 0.11, 0.12]),
        ProbeRecord(mlp, "tgt", "prohibited", 0.87, worst_target),
        ProbeRecord(lin, "other", "prohibited", 0.70, 0.0, [0.7], [0.0]),
    ]
    return ProbeMeasurements(recs, {"tgt": 0.78, "other": 0.5}, {"tgt": {"0.1": 0.12, "1.0": 0.16}},
                             {"changed": 95, "eligible_total": 10_000, "model_total": 10_000},
                             {"src": 10, "tgt": 10, "other": 10})


def test_assemble_metrics():
    rep = assemble(synthetic_measurements())
    assert rep.relative_drop["src"] == 0.0
    assert rep.relative_drop["tgt"] == pytest.approx((0.86 - 0.12) / 0.86)
    assert rep.aggregate_drop_target == pytest.approx((0.74 + 0.70) / (0.86 + 0.70))
    assert rep.ppi["tgt|src"] == pytest.approx((0.86 / 0.12) / 1.0)
    assert rep.ppi["other|src"] is None
    assert rep.ppi_clamped["other|src"] == pytest.approx(0.7 / 0.1)
    # histories are padded with their last value before the per-epoch ratio
    assert rep.ppi_curve["tgt|src"] == pytest.approx([(0.6 / 0.1) / 1.0, (0.86 / 0.11) / 1.0, 0.86 / 0.12])
    assert rep.delta_w == pytest.approx(9.5)
    assert rep.verdict.secure


def test_assemble_verdict_uses_worst_head_and_source_drop():
    assert not assemble(synthetic_measurements(worst_target=0.8)).verdict.secure
    rep = assemble(synthetic_measurements(acc_m_source=0.85))
    assert rep.verdict.violated == ("utility",)


def test_assemble_needs_roles():
    m = synthetic_measurements()
    m.records = [r for r in m.records if r.domain_role != "authorized"]
    with pytest.raises(ValueError):
        assemble(m)


def test_report_serialization_and_determinism(tmp_path):
    meas = synthetic_measurements()
    meas.save(tmp_path / "probes.json")
    again = ProbeMeasurements.load(tmp_path / "probes.json")
    r1, r2 = assemble(meas), assemble(again)
    assert r1.to_json() == r2.to_json()
    r1.write(tmp_path / "out")
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    assert doc["verdict"]["verdict"] == "SECURE" and doc["ppi"]["other|src"] is None
    rows = list(csv.DictReader(io.StringIO((tmp_path / "out" / "report.csv").read_text())))
    assert len(rows) == 4 and rows[1]["domain"] == "tgt"
    assert float(rows[1]["relative_drop"]) == pytest.approx(0.860465, abs=1e-6)
    assert plot_ppi_curve(r1, tmp_path / "ppi.png").stat().st_size > 0
    assert plot_fraction_sweep(r1, tmp_path / "sweep.png").stat().st_size > 0


def test_probe_record_validation():
    with pytest.raises(ValueError):
        ProbeRecord(HeadConfig(), "d", "prohibited", 1.2, 0.1)


def test_measure_grid_coverage():
    torch.manual_seed(0)
    enc_o, enc_m = ToyEncoder(), ToyEncoder()
    src = toy_handle("mnist", {"train": 200, "test": 100})
    tgt = toy_handle("usps", {"train": 200, "test": 100})
    grid = [HeadConfig(data_fraction=0.5), HeadConfig(2, 64, data_fraction=0.5)]
    meas = measure(enc_o, enc_m, {"s": ("authorized", src), "t": ("prohibited", tgt)}, grid,
                   scratch={"t": 0.5}, sweep=False)
    assert [(r.domain, r.head.label) for r in meas.records] == [("s", "linear"), ("t", "linear"), ("t", "d2h64")]
    assert meas.scratch == {"t": 0.5} and meas.num_classes == {"s": 10, "t": 10}
