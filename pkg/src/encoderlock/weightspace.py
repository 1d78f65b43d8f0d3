"""Addressing, masking and change accounting over encoder parameters."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from typing import Iterable, Mapping

import torch
from torch import nn

ELIGIBLE_MODULES = (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear, nn.MultiheadAttention)


class StructuralError(ValueError):
    """Tensor shapes or coordinates do not line up with the encoder."""


class BudgetError(ValueError):
    pass


@total_ordering
@dataclass(frozen=True)
class WeightCoordinate:
    layer_id: int
    flat_index: int

    def __post_init__(self):
        if self.layer_id < 0 or self.flat_index < 0:
            raise StructuralError(f"negative coordinate {self}")

    def key(self) -> tuple[int, int]:
        return (self.layer_id, self.flat_index)

    def __lt__(self, other: "WeightCoordinate") -> bool:
        return self.key() < other.key()


class CriticalWeightSet:
    """Duplicate-free, insertion-ordered set of coordinates under an L0 budget."""

    def __init__(self, budget_M: int):
        if budget_M <= 0:
            raise BudgetError("budget_M must be positive")
        self.budget_M = int(budget_M)
        self.round_added: dict[WeightCoordinate, int] = {}

    @property
    def coordinates(self) -> list[WeightCoordinate]:
        return list(self.round_added)

    def __len__(self) -> int:
        return len(self.round_added)

    def __contains__(self, coord: WeightCoordinate) -> bool:
        return coord in self.round_added

    def __iter__(self):
        return iter(self.round_added)

    @property
    def last_round(self) -> int:
        return max(self.round_added.values(), default=0)

    def add(self, coords: Iterable[WeightCoordinate], round_no: int) -> list[WeightCoordinate]:
        coords = [c for c in dict.fromkeys(coords) if c not in self.round_added]
        if round_no < self.last_round:
            raise ValueError(f"round {round_no} precedes already-recorded round {self.last_round}")
        if len(self) + len(coords) > self.budget_M:
            raise BudgetError(f"adding {len(coords)} coordinates exceeds budget {self.budget_M} (have {len(self)})")
        for c in coords:
            self.round_added[c] = round_no
        return coords

    def copy(self) -> "CriticalWeightSet":
        out = CriticalWeightSet(self.budget_M)
        out.round_added = dict(self.round_added)
        return out

    def by_layer(self) -> dict[int, torch.Tensor]:
        """Flat indices grouped per layer id, sorted ascending."""
        groups: dict[int, list[int]] = {}
        for c in self.round_added:
            groups.setdefault(c.layer_id, []).append(c.flat_index)
        return {lid: torch.tensor(sorted(ix), dtype=torch.long) for lid, ix in sorted(groups.items())}

    def to_json(self, layer_names: Mapping[int, str]) -> list[dict]:
        return [{"layer": layer_names[c.layer_id], "index": c.flat_index, "round": r}
                for c, r in self.round_added.items()]

    @classmethod
    def from_json(cls, records: list[dict], layer_ids: Mapping[str, int], budget_M: int) -> "CriticalWeightSet":
        out = cls(budget_M)
        for rec in records:
            out.add([WeightCoordinate(layer_ids[rec["layer"]], int(rec["index"]))], int(rec["round"]))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, CriticalWeightSet):
            return NotImplemented
        return self.budget_M == other.budget_M and list(self.round_added.items()) == list(other.round_added.items())

    def __repr__(self) -> str:
        return f"CriticalWeightSet(size={len(self)}, budget_M={self.budget_M})"


def is_eligible(module: nn.Module) -> bool:
    return isinstance(module, ELIGIBLE_MODULES)


@dataclass
class EncoderState:
    """A live encoder plus an immutable copy of its weights at lock start.

    Layer ids are ordinals over ``module.named_parameters()``; only ids in
    ``eligible_layers`` may be selected or counted by ``delta_w``.
    """

    module: nn.Module
    baseline_snapshot: dict[str, torch.Tensor] = field(default_factory=dict)
    eligible_layers: frozenset[int] = frozenset()

    def __post_init__(self):
        names = self.layer_names
        if not self.baseline_snapshot:
            self.baseline_snapshot = {n: p.detach().clone() for n, p in self.module.named_parameters()}
        if not self.eligible_layers:
            self.eligible_layers = frozenset(default_eligible_layers(self.module))
        bad = set(self.eligible_layers) - set(range(len(names)))
        if bad:
            raise StructuralError(f"eligible layer ids {sorted(bad)} not in encoder")
        params = dict(self.module.named_parameters())
        if set(params) != set(self.baseline_snapshot):
            raise StructuralError("baseline snapshot does not name the same tensors as the encoder")
        for n, p in params.items():
            if p.shape != self.baseline_snapshot[n].shape:
                raise StructuralError(f"baseline shape mismatch for {n}")

    @classmethod
    def from_module(cls, module: nn.Module, eligible: Iterable[str] | None = None) -> "EncoderState":
        names = [n for n, _ in module.named_parameters()]
        ids = frozenset(names.index(n) for n in eligible) if eligible is not None else frozenset()
        return cls(module, {}, ids)

    @property
    def layer_names(self) -> list[str]:
        return [n for n, _ in self.module.named_parameters()]

    @property
    def layer_ids(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.layer_names)}

    def param(self, layer_id: int) -> torch.nn.Parameter:
        return list(self.module.parameters())[layer_id]

    def eligible_params(self) -> list[tuple[int, str, torch.nn.Parameter]]:
        return [(i, n, p) for i, (n, p) in enumerate(self.module.named_parameters()) if i in self.eligible_layers]

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return {n: p.detach() for n, p in self.module.named_parameters()}

    def check_coordinate(self, coord: WeightCoordinate) -> None:
        if coord.layer_id not in self.eligible_layers:
            raise StructuralError(f"layer {coord.layer_id} is not eligible")
        if coord.flat_index >= self.param(coord.layer_id).numel():
            raise StructuralError(f"{coord} out of range for layer of {self.param(coord.layer_id).numel()} elements")


def default_eligible_layers(module: nn.Module) -> list[int]:
    """Weights and biases of conv/dense/attention modules; norm layers excluded."""
    owner = {}
    for mname, sub in module.named_modules():
        for pname, _ in sub.named_parameters(recurse=False):
            owner[f"{mname}.{pname}" if mname else pname] = sub
    return [i for i, (n, _) in enumerate(module.named_parameters()) if is_eligible(owner[n])]


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MaskedAdam:
    """Adam restricted to the coordinates of a CriticalWeightSet.

    Moments and step counts exist only for selected coordinates; a coordinate
    added in a later round starts from zero moments and its own bias correction.
    """

    def __init__(self, lr: float = 0.01, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[int, dict[str, torch.Tensor]] = {}

    def _sync(self, layer_id: int, index: torch.Tensor, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        st = self.state.get(layer_id)
        if st is not None and torch.equal(st["index"], index):
            return st
        new = {"index": index, "m": torch.zeros(len(index), dtype=dtype), "v": torch.zeros(len(index), dtype=dtype),
               "t": torch.zeros(len(index), dtype=torch.long)}
        if st is not None:
            pos = torch.searchsorted(index, st["index"])
            for k in ("m", "v", "t"):
                new[k][pos] = st[k]
        self.state[layer_id] = new
        return new

    @torch.no_grad()
    def step(self, param: torch.Tensor, layer_id: int, index: torch.Tensor, grad: torch.Tensor, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        st = self._sync(layer_id, index, param.dtype)
        g = grad.reshape(-1)[index]
        st["t"] += 1
        st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
        st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
        t = st["t"].to(param.dtype)
        m_hat = st["m"] / (1 - self.beta1 ** t)
        v_hat = st["v"] / (1 - self.beta2 ** t)
        flat = param.view(-1)
        flat[index] = flat[index] - lr * m_hat / (v_hat.sqrt() + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": (self.beta1, self.beta2), "eps": self.eps,
                "state": {k: {kk: vv.clone() for kk, vv in v.items()} for k, v in self.state.items()}}

    def load_state_dict(self, sd: dict) -> None:
        self.lr = sd["lr"]
        self.beta1, self.beta2 = sd["betas"]
        self.eps = sd["eps"]
        self.state = {int(k): dict(v) for k, v in sd["state"].items()}


@torch.no_grad()
def apply_masked_update(state: EncoderState, cws: CriticalWeightSet, gradients: Mapping[str, torch.Tensor],
                        step_size: float, optimizer: MaskedAdam | None = None) -> EncoderState:
    """One update step restricted to ``cws``; every other element stays bit-identical.

    ``optimizer=None`` is plain descent, ``p -= step_size * g`` on selected elements.
    """
    params = dict(state.module.named_parameters())
    for name, g in gradients.items():
        if name not in params:
            raise StructuralError(f"gradient for unknown tensor {name!r}")
        if g.shape != params[name].shape:
            raise StructuralError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(params[name].shape)} for {name}")
    if len(cws) > cws.budget_M:
        raise BudgetError("critical set exceeds its budget")
    if len(cws) == 0 or step_size == 0:
        return state
    names = state.layer_names
    for layer_id, index in cws.by_layer().items():
        name = names[layer_id]
        if layer_id not in state.eligible_layers:
            raise StructuralError(f"layer {name} is not eligible for update")
        p = params[name]
        if index[-1] >= p.numel():
            raise StructuralError(f"index {int(index[-1])} out of range for {name}")
        g = gradients.get(name)
        if g is None:
            continue
        if optimizer is None:
            flat = p.view(-1)
            flat[index] = flat[index] - step_size * g.reshape(-1)[index]
        else:
            optimizer.step(p, layer_id, index, g, lr=step_size)
    return state


@dataclass(frozen=True)
class DeltaW:
    changed: int
    eligible_total: int
    model_total: int

    @property
    def fraction(self) -> float:
        return self.changed / self.eligible_total if self.eligible_total else 0.0

    @property
    def per_mille(self) -> float:
        return 1000.0 * self.fraction

    @property
    def model_fraction(self) -> float:
        return self.changed / self.model_total if self.model_total else 0.0


@torch.no_grad()
def changed_mask(state: EncoderState, tolerance: float = 0.0) -> dict[int, torch.Tensor]:
    out = {}
    for layer_id, name, p in state.eligible_params():
        out[layer_id] = (p.detach() - state.baseline_snapshot[name]).abs() > tolerance
    return out


def delta_w(state: EncoderState, tolerance: float = 0.0) -> DeltaW:
    """Changed-element count over eligible tensors (and the whole-model count alongside)."""
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    masks = changed_mask(state, tolerance)
    changed = int(sum(int(m.sum()) for m in masks.values()))
    eligible_total = sum(p.numel() for _, _, p in state.eligible_params())
    model_total = sum(p.numel() for p in state.module.parameters())
    return DeltaW(changed, eligible_total, model_total)


def changed_coordinates(state: EncoderState, tolerance: float = 0.0) -> set[WeightCoordinate]:
    out = set()
    for layer_id, m in changed_mask(state, tolerance).items():
        for ix in torch.nonzero(m.reshape(-1)).flatten().tolist():
            out.add(WeightCoordinate(layer_id, ix))
    return out


def save_critical_set(cws: CriticalWeightSet, state: EncoderState, path: str | Path) -> None:
    names = dict(enumerate(state.layer_names))
    Path(path).write_text(json.dumps(cws.to_json(names), indent=1))


def load_critical_set(path: str | Path, state: EncoderState, budget_M: int) -> CriticalWeightSet:
    return CriticalWeightSet.from_json(json.loads(Path(path).read_text()), state.layer_ids, budget_M)


def finite_or_raise(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite values in {what}")

