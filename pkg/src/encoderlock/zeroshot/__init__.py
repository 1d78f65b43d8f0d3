"""Theme-only locking: prompts, synthetic images and similarity-driven refinement."""

from .clients import (AgentClient, ClientError, HttpAgent, HttpImageGenerator, ImageGeneratorClient, MockAgent,
                      MockImageGenerator)
from .loop import RefinementResult, run_refinement
from .manifest import Quality, SyntheticDataset, load_dataset, load_manifest, save_manifest, synthesize
from .prompts import (PromptParseError, PromptSet, RefinementMemory, SimilarityMatrix, generate_prompts,
                      prompt_similarity, refine, similarity_from_embeddings)

__all__ = [
    "AgentClient", "ClientError", "HttpAgent", "HttpImageGenerator", "ImageGeneratorClient", "MockAgent",
    "MockImageGenerator", "RefinementResult", "run_refinement", "Quality", "SyntheticDataset", "load_dataset",
    "load_manifest", "save_manifest", "synthesize", "PromptParseError", "PromptSet", "RefinementMemory",
    "SimilarityMatrix", "generate_prompts", "prompt_similarity", "refine", "similarity_from_embeddings",
]
