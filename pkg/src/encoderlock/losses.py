"""Lock-loss arithmetic.

Supervised: cross-entropy on each domain combined as
``L_el = L_S + ln(1 + alpha * L_S / L_T)``. Unsupervised: the same log-ratio
over contrastive losses computed from augmented positive pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

L_TARGET_FLOOR = 1e-8
NORM_TOL = 1e-6


class LabelRangeError(ValueError):
    pass


class ContrastiveDomainError(ArithmeticError):
    """A per-anchor ratio in the literal contrastive loss is not positive."""

    def __init__(self, anchor: int, value: float):
        super().__init__(f"anchor {anchor}: ratio argument {value:.6g} is not positive; "
                         "raw-cosine contrastive loss is undefined here (use mode='exp')")
        self.anchor = anchor
        self.value = value


@dataclass(frozen=True)
class LossBundle:
    l_source: float
    l_target: float
    alpha: float
    r_target: float
    l_el: float
    saturated: bool = False

    def as_dict(self) -> dict:
        return {"l_source": self.l_source, "l_target": self.l_target, "alpha": self.alpha,
                "r_target": self.r_target, "l_el": self.l_el, "saturated": self.saturated}


def el_objective(l_source: torch.Tensor, l_target: torch.Tensor, alpha: float,
                 floor: float = L_TARGET_FLOOR) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Differentiable ``(l_el, r_target, saturated)``; ``l_target`` is clamped at ``floor``."""
    saturated = bool(l_target.detach() <= floor)
    l_t = l_target.clamp_min(floor)
    r = torch.log1p(alpha * l_source / l_t)
    return l_source + r, r, saturated


def el_loss(l_source: float, l_target: float, alpha: float) -> LossBundle:
    if l_source < 0 or alpha < 0:
        raise ValueError("l_source and alpha must be nonnegative")
    saturated = l_target <= L_TARGET_FLOOR
    l_t = max(l_target, L_TARGET_FLOOR)
    r = math.log1p(alpha * l_source / l_t)
    return LossBundle(float(l_source), float(l_target), float(alpha), r, l_source + r, saturated)


def el_loss_contrastive(l_source_cont: float, l_target_cont: float, alpha: float) -> LossBundle:
    return el_loss(l_source_cont, l_target_cont, alpha)


def el_loss_grad(l_source: float, l_target: float, alpha: float) -> tuple[float, float]:
    """Closed-form partials of ``l_el`` w.r.t. ``(l_source, l_target)``."""
    u = 1.0 + alpha * l_source / l_target
    return 1.0 + (alpha / l_target) / u, -(alpha * l_source / l_target ** 2) / u


def supervised_pair_losses(encoder: nn.Module, head_source: nn.Module, head_target: nn.Module,
                           batch_source: tuple[torch.Tensor, torch.Tensor],
                           batch_target: tuple[torch.Tensor, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean cross-entropy of head∘encoder on each labeled batch."""
    out = []
    for head, (x, y) in ((head_source, batch_source), (head_target, batch_target)):
        logits = head(encoder(x))
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= logits.shape[1]):
            raise LabelRangeError(f"labels must lie in [0, {logits.shape[1]})")
        out.append(F.cross_entropy(logits, y))
    return out[0], out[1]


@dataclass
class EmbeddingBatch:
    anchors: torch.Tensor
    positives: torch.Tensor

    def __post_init__(self):
        if self.anchors.ndim != 2 or self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must both be (N_B, d)")
        if self.anchors.shape[0] < 1:
            raise ValueError("empty embedding batch")
        for name, t in (("anchors", self.anchors), ("positives", self.positives)):
            dev = (t.detach().norm(dim=1) - 1).abs().max()
            if float(dev) > NORM_TOL:
                raise ValueError(f"{name} are not unit norm (max deviation {float(dev):.2e})")

    @classmethod
    def from_raw(cls, anchors: torch.Tensor, positives: torch.Tensor, eps: float = 1e-12) -> "EmbeddingBatch":
        return cls(F.normalize(anchors, dim=1, eps=eps), F.normalize(positives, dim=1, eps=eps))

    def __len__(self) -> int:
        return self.anchors.shape[0]


def similarity_matrix(batch: EmbeddingBatch) -> torch.Tensor:
    return batch.anchors @ batch.positives.T


def contrastive_loss(batch: EmbeddingBatch, mode: str = "literal", tau: float = 0.5) -> torch.Tensor:
    """``-(1/N_B) sum_i ln(sim(z_i, z~_i) / sum_j sim(z_i, z~_j))``.

    ``mode="literal"`` uses raw cosines and raises ContrastiveDomainError when a
    ratio is not positive. ``mode="exp"`` uses ``exp(sim / tau)`` (InfoNCE form).
    """
    sim = similarity_matrix(batch)
    if mode == "exp":
        return -(torch.diagonal(sim) / tau - torch.logsumexp(sim / tau, dim=1)).mean()
    if mode != "literal":
        raise ValueError(f"unknown contrastive mode {mode!r}")
    ratio = torch.diagonal(sim) / sim.sum(dim=1)
    bad = torch.nonzero(~(ratio.detach() > 0)).flatten()
    if bad.numel():
        i = int(bad[0])
        raise ContrastiveDomainError(i, float(ratio[i]))
    return -torch.log(ratio).mean()


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    color_jitter_strength: float = 0.4
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    seed: int = 0
    max_retries: int = 10

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop scale range must satisfy 0 < low <= high <= 1")
        if self.color_jitter_strength < 0:
            raise ValueError("color jitter strength must be nonnegative")
        b_lo, b_hi = self.blur_sigma_range
        if not 0 <= b_lo <= b_hi:
            raise ValueError("blur sigma range must be nonnegative and ordered")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls((1.0, 1.0), 0.0, (0.0, 0.0), seed)


class EmptyCropError(RuntimeError):
    pass


def _uniform(gen: torch.Generator, n: int, lo: float, hi: float) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=gen)


def _random_crop(x: torch.Tensor, policy: AugmentationPolicy, gen: torch.Generator) -> torch.Tensor:
    """Random square-ish resized crop, batched through one grid_sample call."""
    n, _, h, w = x.shape
    lo, hi = policy.crop_scale_range
    if lo == hi == 1.0:
        return x
    side_h = torch.zeros(n, dtype=torch.long)
    side_w = torch.zeros(n, dtype=torch.long)
    todo = torch.ones(n, dtype=torch.bool)
    for _ in range(policy.max_retries):
        k = int(todo.sum())
        if k == 0:
            break
        root = _uniform(gen, k, lo, hi).sqrt()
        side_h[todo] = (h * root).round().long()
        side_w[todo] = (w * root).round().long()
        todo = (side_h < 1) | (side_w < 1)
    if bool(todo.any()):
        raise EmptyCropError(f"no non-empty crop after {policy.max_retries} draws")
    top = (torch.rand(n, generator=gen) * (h - side_h + 1)).floor()
    left = (torch.rand(n, generator=gen) * (w - side_w + 1)).floor()
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = side_w / w
    theta[:, 1, 1] = side_h / h
    theta[:, 0, 2] = (2 * left + side_w) / w - 1
    theta[:, 1, 2] = (2 * top + side_h) / h - 1
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    full = (side_h == h) & (side_w == w)
    out[full] = x[full]
    return out


def _color_jitter(x: torch.Tensor, strength: float, gen: torch.Generator) -> torch.Tensor:
    if strength == 0:
        return x
    n = x.shape[0]
    lo, hi = max(0.0, 1 - strength), 1 + strength
    b = _uniform(gen, n, lo, hi).view(n, 1, 1, 1)
    c = _uniform(gen, n, lo, hi).view(n, 1, 1, 1)
    s = _uniform(gen, n, lo, hi).view(n, 1, 1, 1)
    x = x * b
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * c + mean
    gray = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
    x = (x - gray) * s + gray
    return x.clamp(0.0, 1.0)


def _gaussian_blur(x: torch.Tensor, sigma_range: tuple[float, float], gen: torch.Generator) -> torch.Tensor:
    lo, hi = sigma_range
    if hi == 0:
        return x
    n, ch, h, w = x.shape
    sigma = _uniform(gen, n, lo, hi).clamp_min(1e-3)
    radius = max(1, int(math.ceil(3 * hi)))
    r = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k1 = torch.exp(-(r[None] ** 2) / (2 * sigma[:, None] ** 2))
    k1 = k1 / k1.sum(dim=1, keepdim=True)
    k1 = k1.repeat_interleave(ch, dim=0)
    xx = x.reshape(1, n * ch, h, w)
    xx = F.pad(xx, (radius, radius, radius, radius), mode="reflect" if radius < min(h, w) else "replicate")
    xx = F.conv2d(xx, k1[:, None, None, :], groups=n * ch)
    xx = F.conv2d(xx, k1[:, None, :, None], groups=n * ch)
    return xx.reshape(n, ch, h, w)


def augment(x: torch.Tensor, policy: AugmentationPolicy, gen: torch.Generator) -> torch.Tensor:
    x = _random_crop(x, policy, gen)
    x = _color_jitter(x, policy.color_jitter_strength, gen)
    return _gaussian_blur(x, policy.blur_sigma_range, gen)


def make_positive_pairs(images: torch.Tensor, policy: AugmentationPolicy, encoder: nn.Module,
                        gen: torch.Generator | None = None) -> EmbeddingBatch:
    """Two independent augmentations per image, encoded and L2-normalized.

    Row i of ``anchors`` and ``positives`` come from the same source image, so
    every off-diagonal pair is a negative.
    """
    if images.shape[0] == 0:
        raise ValueError("images must be nonempty")
    if gen is None:
        gen = torch.Generator().manual_seed(policy.seed)
    a = augment(images, policy, gen)
    b = augment(images, policy, gen)
    z = encoder(torch.cat([a, b]))
    n = images.shape[0]
    return EmbeddingBatch.from_raw(z[:n], z[n:])
