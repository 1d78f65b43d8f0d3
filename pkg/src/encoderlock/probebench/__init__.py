"""Probing attacker, accuracy-drop and PPI metrics, and the security verdict."""

from .metrics import (SecurityVerdict, UndefinedMetricError, Verdict, aggregate_drop, ppi, ppi_clamped,
                      relative_drop, security_verdict)
from .probe import (DomainSpec, EncoderMutationError, HeadConfig, data_fraction_sweep, default_grid,
                    domain_similarity, probe, probe_detailed, train_from_scratch)
from .report import ProbeMeasurements, ProbeRecord, ProbeReport, assemble, measure

__all__ = [
    "SecurityVerdict", "UndefinedMetricError", "Verdict", "aggregate_drop", "ppi", "ppi_clamped",
    "relative_drop", "security_verdict", "DomainSpec", "EncoderMutationError", "HeadConfig",
    "data_fraction_sweep", "default_grid", "domain_similarity", "probe", "probe_detailed",
    "train_from_scratch", "ProbeMeasurements", "ProbeRecord", "ProbeReport", "assemble", "measure",
]
