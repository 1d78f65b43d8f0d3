"""Run-directory orchestration.

Layout of a run directory::

    manifest.json          config hash, config, per-stage status
    config.json            the validated config
    metrics.jsonl          one JSON record per finished stage
    failures.jsonl         failure ledger (only when something broke)
    encoder_pretrained.pt
    synthetic/             zero-shot manifest and images
    lock/                  config.json, rounds.jsonl, critical_set.json, checkpoints
    probe/probes.json      raw probe measurements
    report.json, report.csv, plots/
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import traceback
from pathlib import Path

import torch

from .. import __version__
from ..locktrain import lock_supervised, lock_unsupervised
from ..models import ToyEncoder
from ..probebench.plots import plot_fraction_sweep, plot_ppi_curve
from ..probebench.report import ProbeMeasurements, assemble, measure
from ..training import pretrain_encoder
from ..weightspace import EncoderState, delta_w
from .config import ConfigError, ExperimentConfig
from .datasets import DatasetHandle, resolve

log = logging.getLogger(__name__)

STAGES = ("pretrain", "synthetic", "lock", "probe", "report")


class ConfigDriftError(ConfigError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def save_encoder(enc: ToyEncoder, path: Path) -> None:
    torch.save({"arch": "toy", "feature_dim": enc.feature_dim,
                "activation": "relu6" if isinstance(enc.out_act, torch.nn.ReLU6) else "relu",
                "state_dict": enc.state_dict()}, path)


def load_encoder(path: str | Path) -> ToyEncoder:
    blob = torch.load(path, weights_only=False)
    if "state_dict" not in blob:  # a bare state dict
        blob = {"state_dict": blob}
    sd = blob["state_dict"]
    enc = ToyEncoder(blob.get("feature_dim", sd["fc.weight"].shape[0]), blob.get("activation", "relu6"))
    enc.load_state_dict(sd)
    enc.eval()
    return enc


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Runner:
    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir is not None else cfg.output_dir
        self._handles: dict[str, DatasetHandle] = {}

    # run directory bookkeeping

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def _write_manifest(self, m: dict) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def open(self) -> None:
        """Create or reopen the run directory, refusing config drift."""
        self.out.mkdir(parents=True, exist_ok=True)
        m = self.manifest()
        if m and m.get("config_hash") != self.cfg.hash:
            raise ConfigDriftError(f"{self.out} was created from a different config "
                                   f"(hash {m.get('config_hash', '?')[:12]} vs {self.cfg.hash[:12]})")
        if not m:
            m = {"config_hash": self.cfg.hash, "created": _now(), "version": __version__, "stages": {}}
            (self.out / "config.json").write_text(json.dumps(self.cfg.raw, indent=2, sort_keys=True))
            self._write_manifest(m)

    def done(self, stage: str) -> bool:
        return self.manifest().get("stages", {}).get(stage, {}).get("status") == "done"

    def _mark(self, stage: str, status: str, **info) -> None:
        m = self.manifest()
        m.setdefault("stages", {})[stage] = {"status": status, "at": _now(), **info}
        self._write_manifest(m)

    def _metric(self, record: dict) -> None:
        with (self.out / "metrics.jsonl").open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _failure(self, stage: str, exc: BaseException) -> None:
        with (self.out / "failures.jsonl").open("a") as fh:
            fh.write(json.dumps({"stage": stage, "at": _now(), "error": type(exc).__name__, "message": str(exc),
                                 "traceback": traceback.format_exc()}) + "\n")

    # datasets

    def handle(self, spec) -> DatasetHandle:
        key = json.dumps(spec, sort_keys=True)
        if key not in self._handles:
            self._handles[key] = resolve(spec)
        return self._handles[key]

    def eval_handle(self, dom: dict) -> DatasetHandle | None:
        spec = dom.get("eval_dataset", dom.get("dataset"))
        return self.handle(spec) if spec is not None else None

    # stages

    def stage_pretrain(self) -> None:
        enc_cfg = self.cfg.encoder
        if enc_cfg.get("checkpoint"):
            enc = load_encoder(enc_cfg["checkpoint"])
        else:
            pre = enc_cfg.get("pretrain", {})
            names = pre.get("datasets") or [self.cfg.authorized["dataset"]]
            data = []
            for n in names:
                h = self.handle(n)
                x, y = h.load("train")
                if y is None:
                    raise ConfigError(f"pretraining dataset {h.name} is unlabeled")
                data.append((x, y))
            ncls = max(self.handle(n).num_classes or 0 for n in names)
            enc = pretrain_encoder(data, ncls, pre.get("epochs", 8), self.cfg.seed, pre.get("lr", 1e-3),
                                   pre.get("batch_size", 128), enc_cfg.get("feature_dim", 64),
                                   enc_cfg.get("activation", "relu6"))
        save_encoder(enc, self.out / "encoder_pretrained.pt")

    def stage_synthetic(self) -> None:
        from ..zeroshot import HttpAgent, HttpImageGenerator, MockAgent, MockImageGenerator, Quality, run_refinement

        zs = self.cfg.zeroshot
        if zs["backend"] == "mock":
            agent, gen = MockAgent(), MockImageGenerator()
        else:
            agent, gen = HttpAgent(), HttpImageGenerator()
        enc = load_encoder(self.out / "encoder_pretrained.pt")
        res = run_refinement(agent, gen, enc, zs["theme"], zs["k"], zs["per_prompt"], zs["threshold"],
                             zs["max_rounds"], Quality(zs["inference_iterations"], zs["noise_sigma"]),
                             self.cfg.seed, zs["aggregation"], zs["max_workers"])
        res.save(self.out / "synthetic")
        self._metric({"stage": "synthetic", "exit_reason": res.exit_reason,
                      "max_similarity_trace": res.max_similarity_trace, "images": res.dataset.total_images})

    def stage_lock(self) -> None:
        lock = self.cfg.lock
        enc = load_encoder(self.out / "encoder_pretrained.pt")
        state = EncoderState(enc)
        src = self.handle(self.cfg.authorized["dataset"])
        target = self.cfg.prohibited[0]
        lock_dir = self.out / "lock"
        if lock.variant == "supervised":
            res = lock_supervised(state, src, self.handle(target["dataset"]), None, lock, run_dir=lock_dir,
                                  resume=True, num_classes=self.handle(target["dataset"]).num_classes)
        else:
            if lock.variant == "zeroshot":
                from ..zeroshot import load_dataset

                tgt = load_dataset(self.out / "synthetic")
            else:
                tgt = self.handle(target["dataset"])
            res = lock_unsupervised(state, src, tgt, lock, self.cfg.augmentation, run_dir=lock_dir, resume=True)
        save_encoder(enc, self.out / "encoder_locked.pt")
        dw = delta_w(state)
        self._metric({"stage": "lock", "variant": lock.variant, "exit_reason": res.exit_reason,
                      "rounds": len(res.rounds), "delta_w": dw.changed, "delta_w_per_mille": dw.per_mille,
                      "challenger_trace": [c.valid_accuracy for c in res.challengers]})

    def stage_probe(self) -> None:
        enc_o = load_encoder(self.out / "encoder_pretrained.pt")
        enc_m = load_encoder(self.out / "encoder_locked.pt")
        state = EncoderState(enc_m, {n: p.detach().clone() for n, p in enc_o.named_parameters()})
        domains = {}
        for d in self.cfg.domains:
            h = self.eval_handle(d)
            if h is None or not h.labeled:
                log.warning("domain %s has no labeled evaluation data; skipped in probing", d["name"])
                continue
            domains[d["name"]] = (d["role"], h)
        pcfg = self.cfg.probe
        meas = measure(enc_o, enc_m, domains, self.cfg.probe_grid, pcfg.get("seed", self.cfg.seed),
                       fractions=tuple(pcfg.get("fractions", (0.1, 0.25, 0.5, 1.0))), delta_w=delta_w(state),
                       sweep=pcfg.get("sweep", True))
        (self.out / "probe").mkdir(exist_ok=True)
        meas.save(self.out / "probe" / "probes.json")

    def stage_report(self) -> None:
        report_from_dir(self.out, self.cfg.probe.get("epsilon", 0.02))

    def stages_for(self) -> list[str]:
        return [s for s in STAGES if s != "synthetic" or self.cfg.lock.variant == "zeroshot"]

    def run(self, stages: list[str] | None = None) -> Path:
        self.open()
        for stage in stages or self.stages_for():
            if self.done(stage) and stage != "report":
                log.info("stage %s already done; skipping", stage)
                continue
            self._mark(stage, "running")
            try:
                getattr(self, f"stage_{stage}")()
            except ConfigError:
                self._mark(stage, "failed")
                raise
            except Exception as exc:
                self._failure(stage, exc)
                self._mark(stage, "failed", error=str(exc))
                raise StageError(stage, exc) from exc
            self._mark(stage, "done")
        return self.out


def report_from_dir(run_dir: str | Path, epsilon: float = 0.02, plots: bool = True) -> dict:
    """Regenerate report.json / report.csv (and plots) from stored probe measurements."""
    run_dir = Path(run_dir)
    meas = ProbeMeasurements.load(run_dir / "probe" / "probes.json")
    report = assemble(meas, epsilon)
    report.write(run_dir)
    if plots:
        (run_dir / "plots").mkdir(exist_ok=True)
        plot_ppi_curve(report, run_dir / "plots" / "ppi_curve.png")
        plot_fraction_sweep(report, run_dir / "plots" / "fraction_sweep.png")
    return report.to_dict()
