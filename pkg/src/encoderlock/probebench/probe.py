"""The probing attacker and its baselines."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import torch
import torch.nn.functional as F
from torch import nn

from ..models import ToyEncoder, build_head, extract_features
from ..training import accuracy, fit_head, split_indices
from ..weightspace import checksum
from .metrics import mean_feature_cosine

HIDDEN_DIMS = (64, 256, 512, 1024, 2048, 4096)
ROLES = ("authorized", "prohibited", "admissible")
DEFAULT_FRACTIONS = (0.1, 0.25, 0.5, 1.0)


class EncoderMutationError(AssertionError):
    pass


@dataclass(frozen=True)
class HeadConfig:
    depth: int = 1
    hidden_dim: int | None = None
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "lr": 1e-3})
    data_fraction: float = 0.1

    def __post_init__(self):
        if not 1 <= self.depth <= 4:
            raise ValueError("depth must be 1-4")
        if self.depth == 1 and self.hidden_dim is not None:
            raise ValueError("depth 1 heads take no hidden_dim")
        if self.depth > 1 and self.hidden_dim not in HIDDEN_DIMS:
            raise ValueError(f"hidden_dim must be one of {HIDDEN_DIMS}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.optimizer.get("name", "adam") != "adam":
            raise ValueError("only the adam optimizer descriptor is supported")

    @property
    def label(self) -> str:
        return "linear" if self.depth == 1 else f"d{self.depth}h{self.hidden_dim}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclass(frozen=True)
class DomainSpec:
    role: str
    accessibility: int
    dataset: Any

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.accessibility not in (1, 2, 3):
            raise ValueError("accessibility must be 1, 2 or 3")
        if self.accessibility == 3 and not (isinstance(self.dataset, str) and self.dataset.strip()):
            raise ValueError("accessibility 3 takes a nonempty theme string")
        if self.dataset is None:
            raise ValueError("accessibility 1-2 domains need a dataset")


def default_grid() -> list[HeadConfig]:
    """Depths {1, 2, 3} crossed with hidden widths {64, 256}."""
    return [HeadConfig()] + [HeadConfig(d, h) for d in (2, 3) for h in (64, 256)]


@dataclass
class ProbeOutcome:
    accuracy: float
    val_accuracy: float
    epochs_trained: int
    history: list[float]  # per-epoch test accuracy


def _xy(dataset, split: str):
    if isinstance(dataset, dict):
        return dataset[split]
    return dataset.load(split)


def _fraction(n: int, frac: float, seed: int) -> torch.Tensor:
    k = max(2, int(round(frac * n)))
    return torch.randperm(n, generator=torch.Generator().manual_seed(seed))[:k]


def probe_detailed(encoder: nn.Module, dataset, head: HeadConfig, seed: int = 0,
                   standardize: bool = True) -> ProbeOutcome:
    """Fit ``head`` on a ``data_fraction`` sample of the training split and score the test split.

    20% of the sampled training data is held out for early stopping.
    """
    before = checksum(encoder)
    x, y = _xy(dataset, "train")
    xte, yte = _xy(dataset, "test")
    if y is None or yte is None:
        raise ValueError("probing needs a labeled dataset")
    idx = _fraction(len(x), head.data_fraction, seed)
    f = extract_features(encoder, x[idx])
    fy = y[idx]
    fte = extract_features(encoder, xte)
    tr, va = split_indices(len(idx), 0.8, seed)
    ncls = int(max(y.max(), yte.max())) + 1
    fit = fit_head(f[tr], fy[tr], f[va], fy[va], ncls, head.depth, head.hidden_dim, seed=seed,
                   lr=head.optimizer.get("lr", 1e-3), standardize=standardize, eval_sets={"test": (fte, yte)})
    if checksum(encoder) != before:
        raise EncoderMutationError("encoder parameters changed during probing")
    return ProbeOutcome(accuracy(fit.head, fte, yte), fit.val_accuracy, fit.epochs_trained, fit.history["test"])


def probe(encoder: nn.Module, dataset, head: HeadConfig = HeadConfig(), seed: int = 0) -> float:
    return probe_detailed(encoder, dataset, head, seed).accuracy


def data_fraction_sweep(encoder: nn.Module, dataset, head: HeadConfig = HeadConfig(),
                        fractions=DEFAULT_FRACTIONS, seed: int = 0) -> dict[float, float]:
    return {f: probe(encoder, dataset, HeadConfig(head.depth, head.hidden_dim, head.optimizer, f), seed)
            for f in fractions}


def domain_similarity(dataset_a, dataset_b, feature_encoder: nn.Module, split: str = "test") -> float:
    """Cosine similarity between the mean features of two datasets."""
    xa, _ = _xy(dataset_a, split)
    xb, _ = _xy(dataset_b, split)
    if len(xa) == 0 or len(xb) == 0:
        raise ValueError("both datasets must be nonempty")
    return mean_feature_cosine(extract_features(feature_encoder, xa), extract_features(feature_encoder, xb))


def train_from_scratch(dataset, data_fraction: float = 0.1, seed: int = 0,
                       model_factory: Callable[[], nn.Module] | None = None, lr: float = 1e-3,
                       max_epochs: int = 100, patience: int = 10, batch_size: int = 64) -> float:
    """Accuracy of an encoder+head trained end to end on the attacker's data budget.

    This is the security threshold: probing a locked encoder should not beat it.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x, y = _xy(dataset, "train")
    xte, yte = _xy(dataset, "test")
    idx = _fraction(len(x), data_fraction, seed)
    tr, va = split_indices(len(idx), 0.8, seed)
    xtr, ytr, xva, yva = x[idx][tr], y[idx][tr], x[idx][va], y[idx][va]
    ncls = int(max(y.max(), yte.max())) + 1
    if model_factory is None:
        enc = ToyEncoder()
        model = nn.Sequential(enc, build_head(enc.feature_dim, ncls))
    else:
        model = model_factory()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=0.5, patience=3)
    best, best_state, bad = float("inf"), copy.deepcopy(model.state_dict()), 0
    for _ in range(max_epochs):
        model.train()
        perm = torch.randperm(len(xtr), generator=gen)
        for i in range(0, len(xtr), batch_size):
            b = perm[i:i + batch_size]
            loss = F.cross_entropy(model(xtr[b]), ytr[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = float(F.cross_entropy(model(xva), yva))
        sched.step(val)
        if val < best - 1e-6:
            best, best_state, bad = val, copy.deepcopy(model.state_dict()), 0
        else:
            bad += 1
            if bad >= patience:
                break
    model.load_state_dict(best_state)
    return accuracy(model, xte, yte)
