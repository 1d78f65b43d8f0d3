"""Dataset handles and the registry that resolves them.

Every handle yields float32 tensors shaped (N, 3, H, W) in [0, 1]. Digit-family
sets are normalized to 32x32x3; the high-resolution family to 224x224x3.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from . import toy

DIGIT_SHAPE = (32, 32, 3)
HIRES_SHAPE = (224, 224, 3)
DIGIT_FAMILY = {"mnist", "usps", "svhn", "mnistm", "syn", "syndigits", "emnist"}
TOY_SIZES = {"train": 5000, "test": 1000}


class DatasetError(LookupError):
    pass


@dataclass
class DatasetHandle:
    name: str
    image_shape: tuple[int, int, int]
    num_classes: int | None
    split_sizes: dict[str, int]
    loader: dict[str, Any]
    _cache: dict[str, tuple[torch.Tensor, torch.Tensor | None]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def labeled(self) -> bool:
        return self.num_classes is not None

    def load(self, split: str = "train") -> tuple[torch.Tensor, torch.Tensor | None]:
        if split not in self.split_sizes:
            raise DatasetError(f"{self.name} has no split {split!r}")
        if split not in self._cache:
            x, y = _LOADERS[self.loader["kind"]](self, split)
            x = conform(x, self.image_shape)
            self._cache[split] = (x, y)
        return self._cache[split]

    def describe(self) -> dict:
        return {"name": self.name, "image_shape": list(self.image_shape), "num_classes": self.num_classes,
                "split_sizes": self.split_sizes, "loader": self.loader}


def shape_rule(name: str) -> tuple[int, int, int]:
    base = name.split(":")[-1].split("_")[-1].lower()
    return DIGIT_SHAPE if base in DIGIT_FAMILY else HIRES_SHAPE


def conform(x: torch.Tensor, shape: tuple[int, int, int]) -> torch.Tensor:
    """Resize to (H, W) and broadcast grayscale to three channels."""
    h, w, c = shape
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] == 1 and c == 3:
        x = x.expand(-1, 3, -1, -1)
    if tuple(x.shape[2:]) != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)
    return x.contiguous().float()


def _stable_seed(*parts: Any) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode()) & 0x7FFFFFFF


def _load_toy(handle: DatasetHandle, split: str):
    style = handle.loader["style"]
    seed = _stable_seed("toy", style, split, handle.loader.get("seed", 0))
    x, y = toy.make_split(style, handle.split_sizes[split], seed)
    return torch.from_numpy(x), torch.from_numpy(y)


def _load_synthetic(handle: DatasetHandle, split: str):
    from ..zeroshot.manifest import load_dataset

    ds = load_dataset(handle.loader["manifest"], round_index=handle.loader.get("round"))
    return ds.as_tensor(), None


def _load_torchvision(handle: DatasetHandle, split: str):
    import torchvision

    cls = {"mnist": torchvision.datasets.MNIST, "usps": torchvision.datasets.USPS,
           "svhn": torchvision.datasets.SVHN, "emnist": torchvision.datasets.EMNIST}[handle.loader["dataset"]]
    root = handle.loader.get("root", "~/.cache/encoderlock")
    kwargs: dict[str, Any] = {"root": str(Path(root).expanduser()), "download": handle.loader.get("download", False)}
    if cls is torchvision.datasets.SVHN:
        kwargs["split"] = split
    else:
        kwargs["train"] = split == "train"
    if cls is torchvision.datasets.EMNIST:
        kwargs["split"] = "balanced"
    try:
        ds = cls(**kwargs)
    except RuntimeError as exc:
        raise DatasetError(f"{handle.name}: {exc}") from exc
    data = ds.data if hasattr(ds, "data") else ds.dataset
    x = torch.as_tensor(np.asarray(data)).float() / 255.0
    if x.ndim == 4 and x.shape[-1] in (1, 3):
        x = x.permute(0, 3, 1, 2)
    y = torch.as_tensor(np.asarray(getattr(ds, "targets", getattr(ds, "labels", None)))).long()
    return x, y


def _load_folder(handle: DatasetHandle, split: str):
    """ImageFolder layout: <root>/<split>/<class>/<image>."""
    from PIL import Image

    root = Path(handle.loader["root"]) / split
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    xs, ys = [], []
    h, w, _ = handle.image_shape
    for ci, cname in enumerate(classes):
        for f in sorted((root / cname).iterdir()):
            img = Image.open(f).convert("RGB").resize((w, h))
            xs.append(torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1))
            ys.append(ci)
    return torch.stack(xs), torch.tensor(ys)


def _load_tensor(handle: DatasetHandle, split: str):
    return handle.loader["splits"][split]


_LOADERS = {"toy": _load_toy, "synthetic": _load_synthetic, "torchvision": _load_torchvision,
            "folder": _load_folder, "tensor": _load_tensor}


def toy_handle(style: str, sizes: dict[str, int] | None = None, seed: int = 0) -> DatasetHandle:
    if style not in toy.STYLES:
        raise DatasetError(f"unknown toy style {style!r}")
    return DatasetHandle(f"toy_{style}", DIGIT_SHAPE, toy.NUM_CLASSES, dict(sizes or TOY_SIZES),
                         {"kind": "toy", "style": style, "seed": seed})


def tensor_handle(name: str, splits: dict[str, tuple[torch.Tensor, torch.Tensor | None]],
                  num_classes: int | None, image_shape: tuple[int, int, int] = DIGIT_SHAPE) -> DatasetHandle:
    return DatasetHandle(name, image_shape, num_classes, {k: len(v[0]) for k, v in splits.items()},
                         {"kind": "tensor", "splits": splits})


def resolve(spec: str | dict) -> DatasetHandle:
    """Resolve a registry name (``toy_usps``, ``mnist``) or a loader dict."""
    if isinstance(spec, str):
        if spec.startswith("toy_"):
            return toy_handle(spec[4:])
        if spec in ("mnist", "usps", "svhn", "emnist"):
            ncls = 47 if spec == "emnist" else 10
            return DatasetHandle(spec, DIGIT_SHAPE, ncls, {"train": -1, "test": -1},
                                 {"kind": "torchvision", "dataset": spec})
        raise DatasetError(f"unknown dataset {spec!r}")
    kind = spec.get("kind")
    if kind == "toy":
        return toy_handle(spec["style"], spec.get("sizes"), spec.get("seed", 0))
    if kind == "synthetic":
        from ..zeroshot.manifest import load_dataset

        ds = load_dataset(spec["manifest"], round_index=spec.get("round"))
        shape = tuple(spec.get("image_shape", DIGIT_SHAPE))
        return DatasetHandle(spec.get("name", "synthetic"), shape, None, {"train": ds.total_images}, dict(spec))
    if kind == "torchvision":
        h = resolve(spec["dataset"])
        h.loader.update({k: v for k, v in spec.items() if k != "kind"})
        return h
    if kind == "folder":
        name = spec.get("name", Path(spec["root"]).name)
        shape = tuple(spec.get("image_shape", shape_rule(name)))
        root = Path(spec["root"])
        splits = {p.name: -1 for p in root.iterdir() if p.is_dir()}
        first = next(iter(sorted(splits)))
        ncls = len([p for p in (root / first).iterdir() if p.is_dir()])
        return DatasetHandle(name, shape, ncls, splits, dict(spec))
    raise DatasetError(f"cannot resolve dataset spec {spec!r}")
