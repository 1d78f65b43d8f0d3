"""Procedural Gaussian-blob digit stand-ins.

Ten classes, each a fixed layout of three blobs. Styles change colour, blob
width, background and noise but keep the class layouts, so a source/target
pair shares labels the way MNIST and USPS do. The "mnist" and "usps" styles
occupy disjoint colour channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 32
NUM_CLASSES = 10
BLOBS_PER_CLASS = 3
TEMPLATE_SEED = 1234
SHIFT = 4.0
DISTRACTORS = 2


@dataclass(frozen=True)
class BlobStyle:
    color: tuple[float, float, float]
    color_jitter: float
    sigma: float
    background: float
    noise: float
    random_color: bool = False


STYLES = {
    "mnist": BlobStyle(color=(0.95, 0.0, 0.0), color_jitter=0.05, sigma=2.2, background=0.0, noise=0.05),
    "usps": BlobStyle(color=(0.0, 0.45, 0.95), color_jitter=0.05, sigma=3.0, background=0.0, noise=0.06),
    "svhn": BlobStyle(color=(0.5, 0.5, 0.5), color_jitter=0.0, sigma=2.6, background=0.3, noise=0.08, random_color=True),
}


def class_templates(seed: int = TEMPLATE_SEED) -> np.ndarray:
    """Blob centres per class, shape (classes, blobs, 2), in pixel units."""
    rng = np.random.default_rng(seed)
    templates = []
    while len(templates) < NUM_CLASSES:
        cand = rng.uniform(7.0, 25.0, size=(BLOBS_PER_CLASS, 2))
        # blobs inside a layout must not merge
        d = np.linalg.norm(cand[:, None] - cand[None], axis=-1)
        if d[np.triu_indices(BLOBS_PER_CLASS, 1)].min() < 7.0:
            continue
        if any(np.abs(np.sort(cand, axis=0) - np.sort(t, axis=0)).max() < 4.0 for t in templates):
            continue
        templates.append(cand)
    return np.stack(templates)


def render(centers: np.ndarray, amps: np.ndarray, colors: np.ndarray, style: BlobStyle,
           rng: np.random.Generator) -> np.ndarray:
    """Render blobs to float32 images in [0, 1], shape (n, 3, H, W).

    centers: (n, k, 2) as (row, col); amps: (n, k); colors: (n, 3).
    """
    n = centers.shape[0]
    grid = np.arange(IMAGE_SIZE, dtype=np.float32)
    dr = grid[None, None, :] - centers[..., 0:1]
    dc = grid[None, None, :] - centers[..., 1:2]
    g_r = np.exp(-(dr ** 2) / (2 * style.sigma ** 2))
    g_c = np.exp(-(dc ** 2) / (2 * style.sigma ** 2))
    intensity = np.einsum("nk,nkh,nkw->nhw", amps, g_r, g_c)
    # noise perturbs luminance, so channels a style leaves dark stay exactly zero
    intensity = intensity + rng.normal(0.0, style.noise, size=intensity.shape)
    intensity = np.clip(intensity, 0.0, 1.0)
    img = style.background + intensity[:, None] * (colors[:, :, None, None] - style.background)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_split(style_name: str, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    style = STYLES[style_name]
    rng = np.random.default_rng(seed)
    templates = class_templates()
    labels = rng.integers(0, NUM_CLASSES, size=n)
    centers = templates[labels].copy()
    centers += rng.uniform(-SHIFT, SHIFT, size=(n, 1, 2))
    centers += rng.normal(0.0, 1.2, size=centers.shape)
    amps = rng.uniform(0.6, 1.0, size=(n, BLOBS_PER_CLASS))
    # distractor blobs carry no label information
    distract = rng.uniform(4.0, 28.0, size=(n, DISTRACTORS, 2))
    d_amp = rng.uniform(0.3, 0.8, size=(n, DISTRACTORS)) * (rng.random((n, DISTRACTORS)) < 0.5)
    centers = np.concatenate([centers, distract], axis=1)
    amps = np.concatenate([amps, d_amp], axis=1)
    if style.random_color:
        colors = rng.uniform(0.0, 1.0, size=(n, 3))
    else:
        base = np.asarray(style.color)
        colors = base + (base > 0) * rng.normal(0.0, style.color_jitter, size=(n, 3))
        colors = np.clip(colors, 0.0, 1.0)
    return render(centers, amps, colors, style, rng), labels.astype(np.int64)
