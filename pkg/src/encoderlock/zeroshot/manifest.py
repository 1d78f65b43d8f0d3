"""Synthetic datasets: generation, and the on-disk manifest they round-trip through."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .clients import ImageGeneratorClient
from .prompts import PromptSet, SimilarityMatrix

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Quality:
    inference_iterations: int = 50
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.inference_iterations < 1 or self.noise_sigma < 0:
            raise ValueError("inference_iterations must be >= 1 and noise_sigma >= 0")


def pixel_checksum(img: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(repr((img.shape, str(img.dtype))).encode())
    h.update(np.ascontiguousarray(img).tobytes())
    return h.hexdigest()


@dataclass
class SyntheticDataset:
    prompts: PromptSet
    groups: list[list[np.ndarray]]  # per prompt, uint8 (H, W, 3)
    per_prompt: int
    quality: Quality
    seed: int = 0
    failures: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.groups) != len(self.prompts):
            raise ValueError("one image group per prompt is required")
        failed = {f["prompt_index"] for f in self.failures}
        for i, g in enumerate(self.groups):
            want = 0 if i in failed else self.per_prompt
            if len(g) != want:
                raise ValueError(f"prompt {i} has {len(g)} images, expected {want}")

    @property
    def theme(self) -> str:
        return self.prompts.theme

    @property
    def total_images(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def prompt_indices(self) -> list[int]:
        return [i for i, g in enumerate(self.groups) for _ in g]

    def group_tensor(self, i: int) -> torch.Tensor:
        return _to_tensor(self.groups[i])

    def as_tensor(self) -> torch.Tensor:
        return _to_tensor([im for g in self.groups for im in g])

    def load(self, split: str = "train"):
        """DatasetHandle-style access; synthetic data is unlabeled."""
        return self.as_tensor(), None

    def records(self) -> list[dict]:
        return [{"prompt_index": i, "round": self.prompts.round, "quality": asdict(self.quality),
                 "checksum": pixel_checksum(im)} for i, g in enumerate(self.groups) for im in g]


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    if not images:
        return torch.empty(0, 3, 0, 0)
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().div(255.0)


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return img
    noisy = img.astype(np.float64) / 255.0 + rng.normal(0, sigma, img.shape)
    return (np.clip(noisy, 0, 1) * 255).round().astype(np.uint8)


def synthesize(generator: ImageGeneratorClient, prompts: PromptSet, per_prompt: int,
               quality: Quality = Quality(), seed: int = 0, max_workers: int = 4) -> SyntheticDataset:
    """``per_prompt`` images for each prompt; failed prompts go to the failure ledger."""
    if per_prompt < 1:
        raise ValueError("per_prompt must be >= 1")

    def one(i: int):
        imgs = generator.generate(prompts.prompts[i], per_prompt, seed + i, quality.inference_iterations)
        if len(imgs) != per_prompt:
            raise SynthesisError(f"generator returned {len(imgs)} images, expected {per_prompt}")
        rng = np.random.default_rng([seed, i, prompts.round])
        return [add_noise(np.asarray(im, dtype=np.uint8), quality.noise_sigma, rng) for im in imgs]

    groups: list[list[np.ndarray]] = [[] for _ in prompts.prompts]
    failures = []
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = {i: pool.submit(one, i) for i in range(len(prompts))}
        for i, fut in futures.items():
            try:
                groups[i] = fut.result()
            except Exception as exc:  # a failed prompt must not sink the batch
                log.warning("prompt %d (%r) failed: %s", i, prompts.prompts[i], exc)
                failures.append({"prompt_index": i, "prompt": prompts.prompts[i], "error": str(exc)})
    if len(failures) == len(prompts):
        raise SynthesisError("image generation failed for every prompt")
    return SyntheticDataset(prompts, groups, per_prompt, quality, seed, failures)


def save_manifest(out_dir: str | Path, rounds: list[tuple[SyntheticDataset, SimilarityMatrix | None]],
                  extra: dict | None = None) -> Path:
    """Write PNGs under ``round_<r>/`` and ``manifest.json`` describing every round."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not rounds:
        raise ManifestError("nothing to save")
    entries = []
    for ds, sim in rounds:
        rdir = out / f"round_{ds.prompts.round}"
        rdir.mkdir(exist_ok=True)
        images = []
        for i, g in enumerate(ds.groups):
            for k, im in enumerate(g):
                rel = f"{rdir.name}/p{i:03d}_{k:04d}.png"
                Image.fromarray(im).save(out / rel)
                images.append({"path": rel, "prompt_index": i, "checksum": pixel_checksum(im),
                               "quality": asdict(ds.quality)})
        entries.append({"round": ds.prompts.round, "prompts": list(ds.prompts.prompts),
                        "similarity_matrix": sim.to_dict() if sim is not None else None,
                        "per_prompt": ds.per_prompt, "seed": ds.seed, "failures": ds.failures, "images": images})
    doc = {"theme": rounds[0][0].theme, "rounds": entries, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _manifest_path(path: str | Path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def load_manifest(path: str | Path) -> dict:
    p = _manifest_path(path)
    doc = json.loads(p.read_text())
    for key in ("theme", "rounds"):
        if key not in doc:
            raise ManifestError(f"manifest lacks {key!r}")
    return doc


def load_dataset(path: str | Path, round_index: int | None = None, verify: bool = True) -> SyntheticDataset:
    """Rebuild a round (default: the one named ``selected_round``, else the last) and verify checksums."""
    p = _manifest_path(path)
    doc = load_manifest(p)
    if round_index is None:
        round_index = doc.get("selected_round", doc["rounds"][-1]["round"])
    entry = next((r for r in doc["rounds"] if r["round"] == round_index), None)
    if entry is None:
        raise ManifestError(f"manifest has no round {round_index}")
    groups: list[list[np.ndarray]] = [[] for _ in entry["prompts"]]
    quality = None
    for rec in entry["images"]:
        im = np.asarray(Image.open(p.parent / rec["path"]).convert("RGB"))
        if verify and pixel_checksum(im) != rec["checksum"]:
            raise ManifestError(f"checksum mismatch for {rec['path']}")
        groups[rec["prompt_index"]].append(im)
        quality = quality or Quality(**rec["quality"])
    prompts = PromptSet(doc["theme"], tuple(entry["prompts"]), entry["round"])
    return SyntheticDataset(prompts, groups, entry["per_prompt"], quality or Quality(), entry.get("seed", 0),
                            entry.get("failures", []))


def load_similarity(path: str | Path, round_index: int) -> SimilarityMatrix | None:
    doc = load_manifest(path)
    entry = next(r for r in doc["rounds"] if r["round"] == round_index)
    sm = entry["similarity_matrix"]
    if sm is None:
        return None
    return SimilarityMatrix(np.asarray(sm["values"]), tuple(entry["prompts"]), sm["aggregation"])
