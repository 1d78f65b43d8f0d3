"""Experiment configuration: schema validation, defaults and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from ..dws import SelectionConfig
from ..locktrain import LockConfig
from ..losses import AugmentationPolicy
from ..probebench.probe import DomainSpec, HeadConfig, default_grid

ACCESS_TO_VARIANT = {1: "supervised", 2: "unsupervised", 3: "zeroshot"}


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("schema/experiment.schema.json").read_text())


def bundled_config(name: str = "toy") -> Path:
    return Path(str(resources.files(__package__).joinpath(f"configs/{name}.json")))


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config failed schema validation:\n  " + "\n  ".join(lines))
    lock, sel = doc.get("lock", {}), doc.get("selection", {})
    for k in ("n_per_round", "rounds_max"):
        if k in lock and k in sel and lock[k] != sel[k]:
            raise ConfigError(f"lock.{k} and selection.{k} disagree")
    for h in doc.get("probe_grid", []):
        try:
            HeadConfig.from_dict(h)
        except ValueError as exc:
            raise ConfigError(f"probe_grid entry {h}: {exc}") from exc
    names = [d["name"] for d in doc["domains"]]
    if len(set(names)) != len(names):
        raise ConfigError("domain names must be unique")


def config_hash(doc: dict) -> str:
    """Hash of the canonical config; ``output_dir`` is excluded so a run can be moved."""
    d = {k: v for k, v in doc.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    lock: LockConfig
    selection: SelectionConfig
    probe_grid: list[HeadConfig]
    domains: list[dict]
    zeroshot: dict
    augmentation: AugmentationPolicy
    output_dir: Path
    seed: int
    encoder: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    device: str = "cpu"

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def authorized(self) -> dict:
        return next(d for d in self.domains if d["role"] == "authorized")

    @property
    def prohibited(self) -> list[dict]:
        return [d for d in self.domains if d["role"] == "prohibited"]

    def domain_specs(self) -> list[DomainSpec]:
        return [DomainSpec(d["role"], d["accessibility"], d["theme"] if d["accessibility"] == 3 else d["dataset"])
                for d in self.domains]

    @classmethod
    def from_dict(cls, doc: dict, *, seed: int | None = None, output_dir: str | None = None,
                  variant: str | None = None, device: str | None = None) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        if seed is not None:
            doc["seed"] = seed
        if output_dir is not None:
            doc["output_dir"] = output_dir
        if device is not None:
            doc["device"] = device
        if variant is not None:
            doc.setdefault("lock", {})["variant"] = variant
        validate(doc)
        dev = doc.get("device", "cpu")
        if dev != "cpu":
            raise ConfigError(f"device {dev!r} is not supported; this build runs on cpu")
        seed_ = doc.get("seed", 0)
        first_target = [d for d in doc["domains"] if d["role"] == "prohibited"][0]
        lock_doc = dict(doc.get("lock", {}))
        lock_doc.setdefault("variant", ACCESS_TO_VARIANT[first_target["accessibility"]])
        lock_doc.setdefault("seed", seed_)
        sel_doc = dict(doc.get("selection", {}))
        for k in ("n_per_round", "rounds_max"):
            if k in sel_doc:
                lock_doc[k] = sel_doc[k]
            elif k in lock_doc:
                sel_doc[k] = lock_doc[k]
        if lock_doc["variant"] != "supervised":
            lock_doc.setdefault("alpha", 10.0)
            lock_doc.setdefault("n_per_round", 200)
            sel_doc.setdefault("n_per_round", 200)
        try:
            lock = LockConfig(**lock_doc)
            selection = SelectionConfig(**{"n_per_round": lock.n_per_round, "rounds_max": lock.rounds_max,
                                           **sel_doc})
            aug_doc = doc.get("augmentation", {})
            aug = AugmentationPolicy(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug_doc.items()})
            grid = [HeadConfig.from_dict(h) for h in doc["probe_grid"]] if "probe_grid" in doc else default_grid()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if lock.variant == "supervised" and first_target["accessibility"] != 1:
            raise ConfigError("supervised locking needs a labeled (accessibility 1) prohibited domain")
        if lock.variant == "zeroshot" and first_target["accessibility"] != 3 and "theme" not in doc.get("zeroshot", {}):
            raise ConfigError("zero-shot locking needs a theme (accessibility 3 domain or zeroshot.theme)")
        zs = {"k": 10, "per_prompt": 100, "threshold": 0.5, "max_rounds": 5, "inference_iterations": 50,
              "noise_sigma": 0.0, "aggregation": "centroid-cosine", "backend": "mock", "max_workers": 4,
              **doc.get("zeroshot", {})}
        zs.setdefault("theme", first_target.get("theme"))
        return cls(doc, lock, selection, grid, doc["domains"], zs, aug,
                   Path(doc.get("output_dir", "runs/experiment")), seed_, doc.get("encoder", {}),
                   doc.get("probe", {}), dev)

    @classmethod
    def load(cls, path: str | Path, **overrides: Any) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, **overrides)
