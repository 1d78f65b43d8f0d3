"""Domain-aware weight selection.

Each eligible weight is scored by how much more the prohibited-domain loss
depends on it than the authorized-domain loss, ``|g_T| / (|g_S| + eps)``, and the
critical set grows by the ``N`` best-scoring weights not already in it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .weightspace import CriticalWeightSet, EncoderState, WeightCoordinate

log = logging.getLogger(__name__)

LossEvaluator = Callable[[], torch.Tensor]


class ScoringError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    n_per_round: int = 100
    rounds_max: int = 100
    score_epsilon: float = 1e-12
    batches_per_score: int = 1

    def __post_init__(self):
        if self.n_per_round <= 0 or self.rounds_max < 0:
            raise ValueError("n_per_round must be positive and rounds_max nonnegative")
        if not self.score_epsilon > 0:
            raise ValueError("score_epsilon must be > 0")
        if self.batches_per_score < 1:
            raise ValueError("batches_per_score must be >= 1")

    @property
    def budget_M(self) -> int:
        return self.n_per_round * self.rounds_max


@dataclass
class RoundSelection:
    cws: CriticalWeightSet
    added: list[WeightCoordinate]
    exhausted: bool
    score_min_added: float
    score_max_excluded: float

    def log_record(self, round_no: int, layer_names: list[str]) -> dict:
        return {
            "round": round_no,
            "added": [[layer_names[c.layer_id], c.flat_index] for c in self.added],
            "score_min_added": _finite_or_none(self.score_min_added),
            "score_max_excluded": _finite_or_none(self.score_max_excluded),
            "exhausted": self.exhausted,
        }


def _finite_or_none(x: float) -> float | None:
    return x if math.isfinite(x) else None


def _grads(encoder: EncoderState, loss_fn: LossEvaluator) -> dict[str, torch.Tensor]:
    params = [p for _, _, p in encoder.eligible_params()]
    names = [n for _, n, _ in encoder.eligible_params()]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not bool(torch.isfinite(g).all()):
            raise ScoringError(f"non-finite gradient in layer {n}")
        out[n] = g
    return out


def score_weights(encoder: EncoderState, loss_source: LossEvaluator, loss_target: LossEvaluator,
                  cfg: SelectionConfig) -> dict[str, torch.Tensor]:
    """Per-element ``|g_T| / (|g_S| + eps)`` for every eligible tensor.

    Each evaluator is called once per batch pair and must return a scalar loss
    on a freshly drawn batch; scores are averaged over ``cfg.batches_per_score`` pairs.
    """
    total: dict[str, torch.Tensor] = {}
    for _ in range(cfg.batches_per_score):
        g_t = _grads(encoder, loss_target)
        g_s = _grads(encoder, loss_source)
        for n in g_t:
            s = g_t[n].abs() / (g_s[n].abs() + cfg.score_epsilon)
            total[n] = total[n] + s if n in total else s
    return {n: s / cfg.batches_per_score for n, s in total.items()}


def select_round(scores: dict[str, torch.Tensor], cws: CriticalWeightSet, cfg: SelectionConfig,
                 encoder: EncoderState, round_no: int | None = None) -> RoundSelection:
    """Grow ``cws`` (in place) by the ``N`` highest-scoring unselected coordinates.

    Ties go to the lexicographically smaller (layer_id, flat_index). With fewer
    than ``N`` candidates left, all of them are taken and ``exhausted`` is set.
    """
    round_no = cws.last_round + 1 if round_no is None else round_no
    ids = encoder.layer_ids
    layers = sorted((ids[n], n) for n in scores)
    flat_scores, flat_layer, flat_index = [], [], []
    for lid, n in layers:
        s = scores[n].detach().reshape(-1).double().cpu().numpy()
        flat_scores.append(s)
        flat_layer.append(np.full(s.size, lid, dtype=np.int64))
        flat_index.append(np.arange(s.size, dtype=np.int64))
    s = np.concatenate(flat_scores) if flat_scores else np.empty(0)
    lid_arr = np.concatenate(flat_layer) if flat_layer else np.empty(0, dtype=np.int64)
    ix_arr = np.concatenate(flat_index) if flat_index else np.empty(0, dtype=np.int64)

    taken = np.zeros(s.size, dtype=bool)
    if len(cws):
        offsets = {}
        pos = 0
        for (lid, n), fs in zip(layers, flat_scores):
            offsets[lid] = pos
            pos += fs.size
        for c in cws:
            if c.layer_id in offsets:
                taken[offsets[c.layer_id] + c.flat_index] = True
    candidates = np.flatnonzero(~taken)
    room = cws.budget_M - len(cws)
    n_take = min(cfg.n_per_round, room)
    exhausted = candidates.size < cfg.n_per_round
    n_take = min(n_take, candidates.size)
    # stable sort on -score keeps coordinate order among ties
    order = candidates[np.argsort(-s[candidates], kind="stable")]
    chosen = order[:n_take]
    rest = order[n_take:]
    added = [WeightCoordinate(int(lid_arr[i]), int(ix_arr[i])) for i in chosen]
    cws.add(added, round_no)
    sel = RoundSelection(
        cws=cws,
        added=added,
        exhausted=bool(exhausted),
        score_min_added=float(s[chosen].min()) if chosen.size else float("nan"),
        score_max_excluded=float(s[rest].max()) if rest.size else float("nan"),
    )
    if exhausted:
        log.warning("round %d: only %d unselected coordinates remained", round_no, candidates.size)
    return sel


def dws_round(encoder: EncoderState, loss_source: LossEvaluator, loss_target: LossEvaluator,
              cws: CriticalWeightSet, cfg: SelectionConfig, round_no: int | None = None) -> RoundSelection:
    scores = score_weights(encoder, loss_source, loss_target, cfg)
    return select_round(scores, cws, cfg, encoder, round_no)


class SelectionLog:
    """Append-only JSON Lines log of per-round selections."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]
