"""The synthesize -> similarity -> refine loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from torch import nn

from .clients import AgentClient, ImageGeneratorClient
from .manifest import Quality, SyntheticDataset, save_manifest, synthesize
from .prompts import PromptSet, RefinementMemory, SimilarityMatrix, generate_prompts, prompt_similarity, refine

log = logging.getLogger(__name__)

EXIT_REASONS = ("converged", "stopped-decreasing", "max-rounds", "unchanged")


@dataclass
class RefinementResult:
    rounds: list[tuple[SyntheticDataset, SimilarityMatrix]]
    ledger: list[dict]
    exit_reason: str
    frozen_pairs: list[tuple[str, str]] = field(default_factory=list)

    @property
    def selected(self) -> int:
        """Index of the round with the lowest max off-diagonal similarity (latest on ties)."""
        best = min(r["max_offdiag"] for r in self.ledger)
        return max(i for i, r in enumerate(self.ledger) if r["max_offdiag"] == best)

    @property
    def dataset(self) -> SyntheticDataset:
        return self.rounds[self.selected][0]

    @property
    def max_similarity_trace(self) -> list[float]:
        return [r["max_offdiag"] for r in self.ledger]

    def save(self, out_dir: str | Path) -> Path:
        extra = {"ledger": self.ledger, "exit_reason": self.exit_reason,
                 "frozen_pairs": [list(p) for p in self.frozen_pairs],
                 "selected_round": self.rounds[self.selected][0].prompts.round}
        return save_manifest(out_dir, self.rounds, extra)


def run_refinement(agent: AgentClient, generator: ImageGeneratorClient, feature_encoder: nn.Module, theme: str,
                   k: int = 10, per_prompt: int = 100, threshold: float = 0.5, max_rounds: int = 5,
                   quality: Quality = Quality(), seed: int = 0, aggregation: str = "centroid-cosine",
                   max_workers: int = 4, prompts: PromptSet | None = None) -> RefinementResult:
    """At most ``max_rounds`` refinements, i.e. ``max_rounds + 1`` synthesized rounds."""
    ps = prompts or generate_prompts(agent, theme, k)
    memory = RefinementMemory()
    rounds: list[tuple[SyntheticDataset, SimilarityMatrix]] = []
    ledger: list[dict] = []
    exit_reason = "max-rounds"
    while True:
        ds = synthesize(generator, ps, per_prompt, quality, seed, max_workers)
        sim = prompt_similarity(ds, feature_encoder, aggregation)
        rounds.append((ds, sim))
        m = sim.max_offdiag()
        flagged = sim.pairs_above(threshold)
        ledger.append({"round": ps.round, "max_offdiag": m, "flagged": len(flagged),
                       "frozen": len(memory.frozen), "failures": len(ds.failures)})
        log.info("refinement round %d: max off-diagonal similarity %.4f, %d pairs flagged", ps.round, m, len(flagged))
        if m <= threshold:
            exit_reason = "converged"
            break
        if len(ledger) > 1 and m >= ledger[-2]["max_offdiag"]:
            exit_reason = "stopped-decreasing"
            break
        if ps.round >= max_rounds:
            exit_reason = "max-rounds"
            break
        new = refine(agent, ps, sim, threshold, max_rounds, memory)
        if new.prompts == ps.prompts:
            exit_reason = "unchanged"
            break
        ps = new
    ledger[-1]["exit_reason"] = exit_reason
    return RefinementResult(rounds, ledger, exit_reason, sorted(memory.frozen))
