"""Accuracy-drop, PPI and security-verdict arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import torch


class UndefinedMetricError(ValueError):
    pass


def relative_drop(acc_o: float, acc_m: float) -> float:
    """``(acc_o - acc_m) / acc_o``."""
    if acc_o <= 0:
        raise UndefinedMetricError("relative drop is undefined for acc_o = 0")
    return (acc_o - acc_m) / acc_o


def aggregate_drop(pairs: Iterable[tuple[float, float]]) -> float:
    """Ratio of sums over domains: ``sum(acc_o - acc_m) / sum(acc_o)``."""
    pairs = list(pairs)
    if not pairs:
        raise UndefinedMetricError("aggregate drop needs at least one domain")
    if any(o <= 0 for o, _ in pairs):
        raise UndefinedMetricError("aggregate drop is undefined when any acc_o = 0")
    return sum(o - m for o, m in pairs) / sum(o for o, _ in pairs)


def ppi(acc_o_t: float, acc_m_t: float, acc_o_b: float, acc_m_b: float) -> float:
    """Protection performance index ``(acc_o_T / acc_m_T) / (acc_o_B / acc_m_B)``."""
    if min(acc_o_t, acc_m_t, acc_o_b, acc_m_b) <= 0:
        raise UndefinedMetricError(
            "PPI is undefined with a zero accuracy; report a floor-clamped variant separately "
            "(e.g. ppi_clamped with floor=1/num_classes)")
    return (acc_o_t / acc_m_t) / (acc_o_b / acc_m_b)


def ppi_clamped(acc_o_t: float, acc_m_t: float, acc_o_b: float, acc_m_b: float, floor: float) -> float:
    return ppi(*(max(a, floor) for a in (acc_o_t, acc_m_t, acc_o_b, acc_m_b)))


class Verdict(str, Enum):
    SECURE = "SECURE"
    NOT_SECURE = "NOT_SECURE"


@dataclass(frozen=True)
class SecurityVerdict:
    verdict: Verdict
    acc_threshold: float
    epsilon: float
    violated: tuple[str, ...] = ()

    @property
    def secure(self) -> bool:
        return self.verdict is Verdict.SECURE

    def as_dict(self) -> dict:
        return {"verdict": self.verdict.value, "acc_threshold": self.acc_threshold,
                "epsilon": self.epsilon, "violated": list(self.violated)}


def security_verdict(acc_m_t: float, acc_train_from_scratch: float, drop_s: float,
                     epsilon: float = 0.02) -> SecurityVerdict:
    """SECURE iff probing the locked encoder is no better than training from
    scratch and the authorized-domain drop stays within ``epsilon``."""
    violated = []
    if acc_m_t > acc_train_from_scratch:
        violated.append("attacker-advantage")
    if drop_s > epsilon:
        violated.append("utility")
    return SecurityVerdict(Verdict.NOT_SECURE if violated else Verdict.SECURE,
                           acc_train_from_scratch, epsilon, tuple(violated))


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> float:
    return float((a @ b) / (a.norm() * b.norm()).clamp_min(eps))


def mean_feature_cosine(feats_a: torch.Tensor, feats_b: torch.Tensor) -> float:
    if len(feats_a) == 0 or len(feats_b) == 0:
        raise ValueError("both feature sets must be nonempty")
    return cosine(feats_a.double().mean(0), feats_b.double().mean(0))


def pad_history(hist: Sequence[float], length: int) -> list[float]:
    """Extend an early-stopped per-epoch curve by holding its last value."""
    hist = list(hist)
    if not hist:
        return []
    return hist + [hist[-1]] * (length - len(hist))
