"""Downstream-head fitting shared by the challenger and the probing attacker."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .models import build_head


@dataclass
class HeadFit:
    head: nn.Module
    val_accuracy: float
    epochs_trained: int
    # per-epoch accuracy on each named eval set, for accuracy-vs-epoch curves
    history: dict[str, list[float]] = field(default_factory=dict)


class Standardize(nn.Module):
    """Fixed z-scoring of features, fitted on the head's training data."""

    def __init__(self, mean: torch.Tensor, std: torch.Tensor):
        super().__init__()
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x):
        return (x - self.mean) / self.std

    @classmethod
    def fit(cls, feats: torch.Tensor) -> "Standardize":
        return cls(feats.mean(0), feats.std(0, unbiased=False).clamp_min(1e-6))


@torch.no_grad()
def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return float("nan")
    model.eval()
    return float((model(x).argmax(1) == y).float().mean())


def fit_head(f_train: torch.Tensor, y_train: torch.Tensor, f_val: torch.Tensor, y_val: torch.Tensor,
             num_classes: int, depth: int = 1, hidden_dim: int | None = None, *, seed: int = 0,
             lr: float = 1e-3, max_epochs: int = 200, patience: int = 10, batch_size: int = 64,
             standardize: bool = True, eval_sets: dict[str, tuple[torch.Tensor, torch.Tensor]] | None = None) -> HeadFit:
    """Train a fresh head on fixed features with Adam, plateau LR decay and early stopping.

    Early stopping watches validation loss; the best-loss state is restored.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    core = build_head(f_train.shape[1], num_classes, depth, hidden_dim)
    head: nn.Module = nn.Sequential(Standardize.fit(f_train), core) if standardize else core
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=0.5, patience=3)
    best_loss, best_state, best_epoch, bad = float("inf"), copy.deepcopy(head.state_dict()), 0, 0
    history: dict[str, list[float]] = {k: [] for k in (eval_sets or {})}
    n = len(y_train)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        head.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(head(f_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        head.eval()
        with torch.no_grad():
            val_loss = float(F.cross_entropy(head(f_val), y_val)) if len(y_val) else float(loss)
        for k, (fx, fy) in (eval_sets or {}).items():
            history[k].append(accuracy(head, fx, fy))
        if not torch.isfinite(torch.tensor(val_loss)):
            break
        sched.step(val_loss)
        if val_loss < best_loss - 1e-6:
            best_loss, best_state, best_epoch, bad = val_loss, copy.deepcopy(head.state_dict()), epoch, 0
        else:
            bad += 1
            if bad >= patience:
                break
    head.load_state_dict(best_state)
    head.eval()
    return HeadFit(head, accuracy(head, f_val, y_val), epoch, history)


def split_indices(n: int, frac_first: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    k = int(round(frac_first * n))
    return perm[:k], perm[k:]


def pretrain_encoder(datasets: list[tuple[torch.Tensor, torch.Tensor]], num_classes: int, epochs: int = 8,
                     seed: int = 0, lr: float = 1e-3, batch_size: int = 128, feature_dim: int = 64,
                     activation: str = "relu6") -> nn.Module:
    """Supervised pre-training of a ToyEncoder on the union of labeled datasets.

    The auxiliary head is discarded; only the encoder is returned.
    """
    from .models import ToyEncoder

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.cat([d[0] for d in datasets])
    y = torch.cat([d[1] for d in datasets])
    enc = ToyEncoder(feature_dim, activation)
    head = build_head(feature_dim, num_classes)
    opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=lr)
    enc.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(head(enc(x[idx])), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    enc.eval()
    return enc
