"""Columnar text export of encoder embeddings."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..models import extract_features


def export_embeddings(encoder: nn.Module, dataset, out_path: str | Path, split: str = "test") -> Path:
    """Write one row per sample: ``f0..f{d-1}`` and, for labeled data, ``label``.

    The first line is a comment stating whether labels are present.
    """
    x, y = dataset.load(split) if hasattr(dataset, "load") else dataset
    z = extract_features(encoder, x).double().numpy()
    out = Path(out_path)
    with out.open("w", newline="") as fh:
        fh.write(f"# encoderlock embeddings n={z.shape[0]} d={z.shape[1]} "
                 f"labels={'present' if y is not None else 'absent'}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(z.shape[1])] + (["label"] if y is not None else []))
        for i, row in enumerate(z):
            w.writerow([repr(float(v)) for v in row] + ([int(y[i])] if y is not None else []))
    return out


def read_embeddings(path: str | Path) -> tuple[torch.Tensor, torch.Tensor | None]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    labeled = header[-1] == "label"
    d = len(header) - int(labeled)
    z = torch.from_numpy(np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(-1, d))
    y = torch.tensor([int(r[-1]) for r in body]) if labeled else None
    return z, y
