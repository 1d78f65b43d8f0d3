"""Prompt sets, prompt similarity and similarity-driven refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .clients import AgentClient, ClientError, normalize_prompt, with_retry

SYM_TOL = 1e-6


class PromptParseError(ValueError):
    def __init__(self, message: str, payload):
        super().__init__(f"{message}; raw payload: {payload!r}"[:500])
        self.payload = payload


@dataclass(frozen=True)
class PromptSet:
    theme: str
    prompts: tuple[str, ...]
    round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "prompts", tuple(self.prompts))
        if not self.prompts:
            raise ValueError("a prompt set must be nonempty")
        norm = [normalize_prompt(p) for p in self.prompts]
        if len(set(norm)) != len(norm):
            raise ValueError("prompts must be distinct after case/whitespace normalization")

    def __len__(self) -> int:
        return len(self.prompts)

    def to_dict(self) -> dict:
        return {"theme": self.theme, "prompts": list(self.prompts), "round": self.round}


def _parse_prompts(resp) -> list[str]:
    if not isinstance(resp, dict) or not isinstance(resp.get("prompts"), list):
        raise PromptParseError("agent response lacks a 'prompts' list", resp)
    if not all(isinstance(p, str) and p.strip() for p in resp["prompts"]):
        raise PromptParseError("agent returned a non-string or empty prompt", resp)
    return [p.strip() for p in resp["prompts"]]


def generate_prompts(agent: AgentClient, theme: str, k: int, max_requests: int = 5) -> PromptSet:
    """Ask the agent for ``k`` distinct prompts, re-requesting after duplicates."""
    if k < 2:
        raise ValueError("k must be >= 2")
    have: list[str] = []
    seen: set[str] = set()
    for _ in range(max_requests):
        req = {"task": "generate", "theme": theme, "k": k - len(have), "exclude": list(have)}
        for p in _parse_prompts(with_retry(lambda: agent.complete(req), retries=2, backoff=0.1)):
            if normalize_prompt(p) not in seen and len(have) < k:
                seen.add(normalize_prompt(p))
                have.append(p)
        if len(have) == k:
            return PromptSet(theme, tuple(have), 0)
    raise ClientError(f"agent produced only {len(have)} distinct prompts of {k} after {max_requests} requests")


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    prompts: tuple[str, ...]
    aggregation: str = "centroid-cosine"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] != len(self.prompts):
            raise ValueError("similarity matrix must be square and indexed by prompts")
        if not np.allclose(v, v.T, atol=SYM_TOL):
            raise ValueError("similarity matrix must be symmetric")
        if not np.allclose(np.diag(v), 1.0, atol=SYM_TOL):
            raise ValueError("similarity matrix must have unit diagonal")
        self.values = np.clip((v + v.T) / 2, -1.0, 1.0)
        np.fill_diagonal(self.values, 1.0)
        self.prompts = tuple(self.prompts)

    def max_offdiag(self) -> float:
        n = len(self.prompts)
        if n < 2:
            return float("-inf")
        return float(self.values[~np.eye(n, dtype=bool)].max())

    def pairs_above(self, threshold: float) -> list[tuple[int, int, float]]:
        n = len(self.prompts)
        return [(i, j, float(self.values[i, j])) for i in range(n) for j in range(i + 1, n)
                if self.values[i, j] > threshold]

    def to_dict(self) -> dict:
        return {"aggregation": self.aggregation, "values": self.values.tolist()}


def similarity_from_embeddings(groups: list[torch.Tensor], aggregation: str = "centroid-cosine") -> np.ndarray:
    """Per-group similarity from raw embeddings (each group (n_i, d))."""
    if any(len(g) == 0 for g in groups):
        raise ValueError("every prompt group must be nonempty")
    normed = [F.normalize(g.double(), dim=1) for g in groups]
    k = len(groups)
    if aggregation == "centroid-cosine":
        c = F.normalize(torch.stack([g.mean(0) for g in normed]), dim=1)
        m = (c @ c.T).numpy()
    elif aggregation == "mean-pairwise":
        m = np.ones((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                m[i, j] = m[j, i] = float((normed[i] @ normed[j].T).mean())
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    np.fill_diagonal(m, 1.0)
    return m


def prompt_similarity(dataset, feature_encoder: nn.Module, aggregation: str = "centroid-cosine") -> SimilarityMatrix:
    from ..models import extract_features

    groups = [extract_features(feature_encoder, dataset.group_tensor(i)) for i in range(len(dataset.prompts))]
    return SimilarityMatrix(similarity_from_embeddings(groups, aggregation), dataset.prompts.prompts, aggregation)


@dataclass
class RefinementMemory:
    """Per-pair count of consecutive unchanged revisions, and the pairs frozen because of it."""

    strikes: dict[tuple[str, str], int] = field(default_factory=dict)
    frozen: set[tuple[str, str]] = field(default_factory=set)


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return tuple(sorted((normalize_prompt(a), normalize_prompt(b))))  # type: ignore[return-value]


def refine(agent: AgentClient, prompts: PromptSet, sim: SimilarityMatrix, threshold: float = 0.5,
           max_rounds: int = 5, memory: RefinementMemory | None = None) -> PromptSet:
    """Send every non-frozen pair above ``threshold`` to the agent for revision.

    A pair that comes back unchanged twice in a row is frozen and never sent again.
    Revisions that would duplicate another prompt are rejected (the old prompt stays).
    """
    if tuple(sim.prompts) != tuple(prompts.prompts):
        raise ValueError("similarity matrix is not indexed by these prompts")
    memory = memory if memory is not None else RefinementMemory()
    if max_rounds <= 0 or prompts.round >= max_rounds:
        return prompts
    flagged = [(i, j) for i, j, _ in sim.pairs_above(threshold)
               if _pair_key(prompts.prompts[i], prompts.prompts[j]) not in memory.frozen]
    if not flagged:
        return prompts
    req = {"task": "revise", "theme": prompts.theme, "prompts": list(prompts.prompts),
           "flagged": [list(p) for p in flagged]}
    revised = _parse_prompts(with_retry(lambda: agent.complete(req), retries=2, backoff=0.1))
    if len(revised) != len(prompts):
        raise PromptParseError(f"revision returned {len(revised)} prompts, expected {len(prompts)}", revised)
    out = list(prompts.prompts)
    taken = {normalize_prompt(p) for p in out}
    for i, p in enumerate(revised):
        if normalize_prompt(p) != normalize_prompt(out[i]) and normalize_prompt(p) not in taken:
            taken.discard(normalize_prompt(out[i]))
            taken.add(normalize_prompt(p))
            out[i] = p
    for i, j in flagged:
        key = _pair_key(prompts.prompts[i], prompts.prompts[j])
        if out[i] == prompts.prompts[i] and out[j] == prompts.prompts[j]:
            memory.strikes[key] = memory.strikes.get(key, 0) + 1
            if memory.strikes[key] >= 2:
                memory.frozen.add(key)
        else:
            memory.strikes.pop(key, None)
    return PromptSet(prompts.theme, tuple(out), prompts.round + 1)
