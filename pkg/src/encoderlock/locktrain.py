"""Supervised and unsupervised lock trainers.

Each round grows the critical set by DWS, then runs ``inner_epochs`` masked
passes over the lock subsets minimizing ``L_el``. The supervised trainer also
retrains a fresh challenger head on the prohibited domain every round and stops
once it can no longer reach ``acc_goal``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import torch
import torch.nn.functional as F
from torch import nn

from .dws import SelectionConfig, SelectionLog, dws_round
from .losses import AugmentationPolicy, contrastive_loss, el_objective, make_positive_pairs
from .models import extract_features
from .training import accuracy, fit_head, split_indices
from .weightspace import (CriticalWeightSet, EncoderState, MaskedAdam, apply_masked_update, delta_w,
                          finite_or_raise, save_critical_set)

log = logging.getLogger(__name__)

VARIANTS = ("supervised", "unsupervised", "zeroshot")
CHECKPOINT = "lock_state.pt"


class LockAborted(RuntimeError):
    """Raised when a lock run must stop early; ``snapshot`` holds the diagnostic state."""

    def __init__(self, reason: str, snapshot: dict):
        super().__init__(reason)
        self.reason = reason
        self.snapshot = snapshot


@dataclass
class LockConfig:
    variant: str = "supervised"
    n_per_round: int = 100
    rounds_max: int = 100
    alpha: float = 1000.0
    inner_epochs: int = 5
    lock_subset_size: int = 1000
    acc_goal: float = 0.15
    challenger_spec: dict = field(default_factory=lambda: {"depth": 2, "hidden_dim": 256})
    learning_rate: float = 0.01
    seed: int = 0
    batch_size: int = 100
    score_batch_size: int = 128
    # abort when frozen-source-head accuracy on the lock subset falls below this fraction of its start value
    source_floor: float = 0.5
    contrastive_mode: str = "literal"
    # unsupervised source term: contrastive on source images, or cross-entropy through the frozen source head
    source_loss: str = "contrastive"
    challenger_split: float = 0.8
    # unsupervised exit once the epoch-mean target contrastive loss reaches this fraction of ln(batch_size),
    # the loss of a fully collapsed target batch; further rounds then only cost source accuracy. 0 disables.
    saturation_stop: float = 0.99

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0 < self.acc_goal <= 1:
            raise ValueError("acc_goal must lie in (0, 1]")
        if self.learning_rate <= 0 or self.alpha < 0:
            raise ValueError("learning_rate must be positive and alpha nonnegative")
        if self.inner_epochs < 0 or self.lock_subset_size < 1 or self.batch_size < 1:
            raise ValueError("inner_epochs, lock_subset_size and batch_size out of range")
        if not 0 <= self.source_floor < 1:
            raise ValueError("source_floor must lie in [0, 1)")
        if not 0 < self.challenger_split < 1:
            raise ValueError("challenger_split must lie in (0, 1)")
        if not 0 <= self.saturation_stop <= 1:
            raise ValueError("saturation_stop must lie in [0, 1]")
        if self.source_loss not in ("contrastive", "cross-entropy"):
            raise ValueError("source_loss must be 'contrastive' or 'cross-entropy'")
        SelectionConfig(self.n_per_round, self.rounds_max)

    @property
    def selection(self) -> SelectionConfig:
        return SelectionConfig(self.n_per_round, self.rounds_max)

    @property
    def budget_M(self) -> int:
        return self.n_per_round * self.rounds_max

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def supervised_defaults(cls, **kw) -> "LockConfig":
        return cls(**{"variant": "supervised", "n_per_round": 100, "rounds_max": 100, "alpha": 1000.0, **kw})

    @classmethod
    def unsupervised_defaults(cls, **kw) -> "LockConfig":
        return cls(**{"variant": "unsupervised", "n_per_round": 200, "rounds_max": 100, "alpha": 10.0, **kw})


@dataclass(frozen=True)
class ChallengerRecord:
    round: int
    head_init_seed: int
    valid_accuracy: float
    epochs_trained: int

    def __post_init__(self):
        if not 0 <= self.valid_accuracy <= 1:
            raise ValueError("valid_accuracy must lie in [0, 1]")


@dataclass
class LockResult:
    state: EncoderState
    critical_set: CriticalWeightSet
    challengers: list[ChallengerRecord]
    rounds: list[dict]
    exit_reason: str
    source_head: nn.Module | None = None


Data = Any  # a DatasetHandle or an (images, labels) pair


def as_xy(data: Data, split: str = "train") -> tuple[torch.Tensor, torch.Tensor | None]:
    if isinstance(data, (tuple, list)):
        x, y = data
        return x, y
    return data.load(split)


def _subset(x: torch.Tensor, y: torch.Tensor | None, k: int, gen: torch.Generator):
    idx = torch.randperm(len(x), generator=gen)[:k]
    return x[idx], (y[idx] if y is not None else None)


def challenge_once(encoder: nn.Module, target_train: Data, target_valid: Data, challenger_spec: dict,
                   seed: int, num_classes: int | None = None, round_no: int = 0):
    """Fit a fresh challenger head on frozen features; returns ``(record, head)``."""
    xt, yt = as_xy(target_train)
    xv, yv = as_xy(target_valid, "test") if not isinstance(target_valid, (tuple, list)) else target_valid
    if yt is None or yv is None:
        raise ValueError("challenger data must be labeled")
    ncls = num_classes or int(max(yt.max(), yv.max())) + 1
    was_training = encoder.training
    ft, fv = extract_features(encoder, xt), extract_features(encoder, xv)
    encoder.train(was_training)
    fit = fit_head(ft, yt, fv, yv, ncls, challenger_spec.get("depth", 2), challenger_spec.get("hidden_dim"),
                   seed=seed, standardize=challenger_spec.get("standardize", False),
                   lr=challenger_spec.get("lr", 1e-3), patience=challenger_spec.get("patience", 10))
    for p in fit.head.parameters():
        p.requires_grad_(False)
    return ChallengerRecord(round_no, seed, fit.val_accuracy, fit.epochs_trained), fit.head


class _RunFiles:
    def __init__(self, run_dir: str | Path | None):
        self.dir = Path(run_dir) if run_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            self.rounds = SelectionLog(self.dir / "rounds.jsonl")

    def write_config(self, cfg: LockConfig) -> None:
        if self.dir is not None:
            (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))

    def baseline(self, state: EncoderState) -> None:
        if self.dir is not None and not (self.dir / "encoder_baseline.pt").exists():
            torch.save(state.baseline_snapshot, self.dir / "encoder_baseline.pt")

    def round(self, record: dict) -> None:
        if self.dir is not None:
            self.rounds.append(record)

    def checkpoint(self, payload: dict) -> None:
        if self.dir is not None:
            tmp = self.dir / (CHECKPOINT + ".tmp")
            torch.save(payload, tmp)
            tmp.replace(self.dir / CHECKPOINT)

    def load_checkpoint(self) -> dict | None:
        if self.dir is None or not (self.dir / CHECKPOINT).exists():
            return None
        return torch.load(self.dir / CHECKPOINT, weights_only=False)

    def finish(self, state: EncoderState, cws: CriticalWeightSet) -> None:
        if self.dir is not None:
            save_critical_set(cws, state, self.dir / "critical_set.json")
            torch.save(state.module.state_dict(), self.dir / "encoder_locked.pt")


def _new_set(cfg: LockConfig) -> CriticalWeightSet:
    # budgets are positive; an R = 0 run keeps an empty set with a nominal budget of N
    return CriticalWeightSet(cfg.budget_M or cfg.n_per_round)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _masked_pass(state: EncoderState, cws: CriticalWeightSet, opt: MaskedAdam, cfg: LockConfig,
                 loss_pair: Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]],
                 n_s: int, n_t: int, gen: torch.Generator) -> dict:
    """One epoch of masked updates; returns mean loss terms over the epoch."""
    names = [n for _, n, _ in state.eligible_params()]
    params = [p for _, _, p in state.eligible_params()]
    bs, bt = _batches(n_s, cfg.batch_size, gen), _batches(n_t, cfg.batch_size, gen)
    totals = {"l_source": 0.0, "l_target": 0.0, "r_target": 0.0, "l_el": 0.0}
    saturated = False
    steps = min(len(bs), len(bt))
    for a, b in zip(bs, bt):
        ls, lt = loss_pair(a, b)
        l_el, r, sat = el_objective(ls, lt, cfg.alpha)
        finite_or_raise(l_el.detach(), "lock loss")
        grads = torch.autograd.grad(l_el, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
        apply_masked_update(state, cws, dict(zip(names, grads)), cfg.learning_rate, opt)
        saturated |= sat
        for k, v in (("l_source", ls), ("l_target", lt), ("r_target", r), ("l_el", l_el)):
            totals[k] += float(v.detach()) / steps
    return {**totals, "alpha": cfg.alpha, "saturated": saturated}


def _rng_state(gen: torch.Generator) -> dict:
    return {"gen": gen.get_state(), "torch": torch.get_rng_state()}


def _set_rng_state(gen: torch.Generator, st: dict) -> None:
    gen.set_state(st["gen"])
    torch.set_rng_state(st["torch"])


def _source_check(state, cws, cfg, acc, start, round_no, files, extra) -> None:
    if start > 0 and acc < cfg.source_floor * start:
        snapshot = {"round": round_no, "source_accuracy": acc, "source_accuracy_start": start,
                    "delta_w": delta_w(state).changed, "critical_set_size": len(cws), **extra}
        if files.dir is not None:
            (files.dir / "abort_snapshot.json").write_text(json.dumps(snapshot, indent=2))
            torch.save(state.module.state_dict(), files.dir / "encoder_aborted.pt")
        raise LockAborted(f"source accuracy collapsed to {acc:.3f} (start {start:.3f})", snapshot)


def _fit_source_head(encoder: nn.Module, x: torch.Tensor, y: torch.Tensor, seed: int) -> nn.Module:
    tr, va = split_indices(len(x), 0.8, seed)
    f = extract_features(encoder, x)
    fit = fit_head(f[tr], y[tr], f[va], y[va], int(y.max()) + 1, seed=seed)
    return fit.head


def lock_supervised(state: EncoderState, source: Data, target_train: Data, target_valid: Data | None,
                    cfg: LockConfig, *, source_head: nn.Module | None = None, run_dir: str | Path | None = None,
                    resume: bool = False, num_classes: int | None = None) -> LockResult:
    """Self-challenging lock against a labeled prohibited domain.

    When ``target_valid`` is None the prohibited data is split ``challenger_split``
    / rest for challenger training and validation. The lock subsets hold
    ``lock_subset_size`` samples per domain. Without ``source_head`` a linear head
    is fit on frozen source features once and kept frozen.
    """
    if cfg.variant != "supervised":
        raise ValueError("lock_supervised needs variant='supervised'")
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    enc = state.module
    xs, ys = as_xy(source)
    xt, yt = as_xy(target_train)
    if ys is None or yt is None:
        raise ValueError("supervised locking needs labeled source and target data")
    if target_valid is None:
        tr, va = split_indices(min(len(xt), cfg.lock_subset_size), cfg.challenger_split, cfg.seed)
        ch_train, ch_valid = (xt[tr], yt[tr]), (xt[va], yt[va])
    else:
        ch_train, ch_valid = (xt, yt), as_xy(target_valid)
    ls_x, ls_y = _subset(xs, ys, cfg.lock_subset_size, gen)
    lt_x, lt_y = _subset(xt, yt, cfg.lock_subset_size, gen)
    if source_head is None:
        source_head = _fit_source_head(enc, ls_x, ls_y, cfg.seed)
    for p in source_head.parameters():
        p.requires_grad_(False)
    source_head.eval()
    sel_cfg = cfg.selection
    files = _RunFiles(run_dir)
    files.write_config(cfg)

    ckpt = files.load_checkpoint() if resume else None
    if ckpt is not None:
        enc.load_state_dict(ckpt["encoder"])
        state.baseline_snapshot = ckpt["baseline"]
        cws = CriticalWeightSet.from_json(ckpt["critical_set"], state.layer_ids, _new_set(cfg).budget_M)
        opt = MaskedAdam(cfg.learning_rate)
        opt.load_state_dict(ckpt["optimizer"])
        head_t = ckpt["challenger_head"]
        challengers = [ChallengerRecord(**c) for c in ckpt["challengers"]]
        rounds, start_round, src_start = ckpt["rounds"], ckpt["round"] + 1, ckpt["source_start"]
        _set_rng_state(gen, ckpt["rng"])
        exit_reason = ckpt.get("exit_reason")
        log.info("resuming supervised lock at round %d", start_round)
    else:
        files.baseline(state)
        cws = _new_set(cfg)
        opt = MaskedAdam(cfg.learning_rate)
        rec, head_t = challenge_once(enc, ch_train, ch_valid, cfg.challenger_spec, cfg.seed, num_classes, 0)
        challengers, rounds, start_round = [rec], [], 1
        src_start = accuracy(source_head, extract_features(enc, ls_x), ls_y)
        exit_reason = None if cfg.rounds_max > 0 else "zero-rounds"

    def ce(head, x, y):
        logits = head(enc(x))
        return F.cross_entropy(logits, y)

    def pair(head):
        return lambda a, b: (ce(source_head, ls_x[a], ls_y[a]), ce(head, lt_x[b], lt_y[b]))

    r = start_round
    while exit_reason is None and r <= cfg.rounds_max:
        t0 = time.time()
        enc.train()
        si = torch.randint(0, len(ls_x), (cfg.score_batch_size,), generator=gen)
        ti = torch.randint(0, len(lt_x), (cfg.score_batch_size,), generator=gen)
        sel = dws_round(state, lambda: ce(source_head, ls_x[si], ls_y[si]),
                        lambda: ce(head_t, lt_x[ti], lt_y[ti]), cws, sel_cfg, r)
        losses = {}
        for _ in range(cfg.inner_epochs):
            losses = _masked_pass(state, cws, opt, cfg, pair(head_t), len(ls_x), len(lt_x), gen)
        with torch.no_grad():
            fs, ft = extract_features(enc, ls_x), extract_features(enc, lt_x)
            l_s = F.cross_entropy(source_head(fs), ls_y)
            before = el_objective(l_s, F.cross_entropy(head_t(ft), lt_y), cfg.alpha)[0]
        src_acc = accuracy(source_head, fs, ls_y)
        _source_check(state, cws, cfg, src_acc, src_start, r, files, {"losses": losses})
        rec, head_t = challenge_once(enc, ch_train, ch_valid, cfg.challenger_spec, cfg.seed + r, num_classes, r)
        with torch.no_grad():
            after = el_objective(l_s, F.cross_entropy(head_t(ft), lt_y), cfg.alpha)[0]
        challengers.append(rec)
        dw = delta_w(state)
        record = {"round": r, "losses": losses, "challenger": asdict(rec), "source_accuracy": src_acc,
                  "l_el_before_challenger": float(before), "l_el_after_challenger": float(after),
                  "delta_w": dw.changed, "delta_w_per_mille": dw.per_mille,
                  "selection": sel.log_record(r, state.layer_names), "seconds": time.time() - t0}
        rounds.append(record)
        files.round(record)
        log.info("round %d: challenger acc %.3f, source acc %.3f, dW %d", r, rec.valid_accuracy, src_acc, dw.changed)
        if rec.valid_accuracy < cfg.acc_goal:
            exit_reason = "acc-goal"
        elif len(cws) >= cfg.budget_M or sel.exhausted:
            exit_reason = "budget"
        elif r == cfg.rounds_max:
            exit_reason = "rounds-max"
        files.checkpoint({"encoder": enc.state_dict(), "baseline": state.baseline_snapshot,
                          "critical_set": cws.to_json(dict(enumerate(state.layer_names))),
                          "optimizer": opt.state_dict(), "challenger_head": head_t,
                          "challengers": [asdict(c) for c in challengers], "rounds": rounds, "round": r,
                          "source_start": src_start, "rng": _rng_state(gen), "exit_reason": exit_reason})
        r += 1
    enc.eval()
    files.finish(state, cws)
    return LockResult(state, cws, challengers, rounds, exit_reason or "rounds-max", source_head)


def lock_unsupervised(state: EncoderState, source: Data, target_unlabeled: Data, cfg: LockConfig,
                      policy: AugmentationPolicy | None = None, *, run_dir: str | Path | None = None,
                      resume: bool = False, source_head: nn.Module | None = None) -> LockResult:
    """Contrastive lock; no challenger. Source labels, when present, only feed the collapse monitor."""
    if cfg.variant not in ("unsupervised", "zeroshot"):
        raise ValueError("lock_unsupervised needs variant 'unsupervised' or 'zeroshot'")
    policy = policy or AugmentationPolicy(seed=cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    aug_gen = torch.Generator().manual_seed(policy.seed)
    torch.manual_seed(cfg.seed)
    enc = state.module
    xs, ys = as_xy(source)
    xt, _ = as_xy(target_unlabeled)
    ls_x, ls_y = _subset(xs, ys, cfg.lock_subset_size, gen)
    lt_x, _ = _subset(xt, None, cfg.lock_subset_size, gen)
    if cfg.source_loss == "cross-entropy" and ls_y is None:
        raise ValueError("source_loss='cross-entropy' needs labeled source data")
    if source_head is None and ls_y is not None:
        source_head = _fit_source_head(enc, ls_x, ls_y, cfg.seed)
    if source_head is not None:
        for p in source_head.parameters():
            p.requires_grad_(False)
    sel_cfg = cfg.selection
    files = _RunFiles(run_dir)
    files.write_config(cfg)

    def closs(x):
        return contrastive_loss(make_positive_pairs(x, policy, enc, aug_gen), cfg.contrastive_mode)

    def src_loss(idx):
        if cfg.source_loss == "cross-entropy":
            return F.cross_entropy(source_head(enc(ls_x[idx])), ls_y[idx])
        return closs(ls_x[idx])

    def pair(a, b):
        return src_loss(a), closs(lt_x[b])

    def src_acc():
        return accuracy(source_head, extract_features(enc, ls_x), ls_y) if source_head is not None else float("nan")

    ckpt = files.load_checkpoint() if resume else None
    if ckpt is not None:
        enc.load_state_dict(ckpt["encoder"])
        state.baseline_snapshot = ckpt["baseline"]
        cws = CriticalWeightSet.from_json(ckpt["critical_set"], state.layer_ids, _new_set(cfg).budget_M)
        opt = MaskedAdam(cfg.learning_rate)
        opt.load_state_dict(ckpt["optimizer"])
        rounds, start_round, src_start = ckpt["rounds"], ckpt["round"] + 1, ckpt["source_start"]
        _set_rng_state(gen, ckpt["rng"])
        aug_gen.set_state(ckpt["aug_rng"])
        exit_reason = ckpt.get("exit_reason")
    else:
        files.baseline(state)
        cws = _new_set(cfg)
        opt = MaskedAdam(cfg.learning_rate)
        rounds, start_round, src_start = [], 1, src_acc()
        exit_reason = None if cfg.rounds_max > 0 else "zero-rounds"

    r = start_round
    while exit_reason is None and r <= cfg.rounds_max:
        t0 = time.time()
        enc.train()
        si = torch.randint(0, len(ls_x), (cfg.score_batch_size,), generator=gen)
        ti = torch.randint(0, len(lt_x), (cfg.score_batch_size,), generator=gen)
        sel = dws_round(state, lambda: src_loss(si), lambda: closs(lt_x[ti]), cws, sel_cfg, r)
        losses = {}
        for _ in range(cfg.inner_epochs):
            losses = _masked_pass(state, cws, opt, cfg, pair, len(ls_x), len(lt_x), gen)
        acc = src_acc()
        if source_head is not None:
            _source_check(state, cws, cfg, acc, src_start, r, files, {"losses": losses})
        dw = delta_w(state)
        record = {"round": r, "losses": losses, "source_accuracy": acc if acc == acc else None,
                  "delta_w": dw.changed, "delta_w_per_mille": dw.per_mille,
                  "selection": sel.log_record(r, state.layer_names), "seconds": time.time() - t0}
        rounds.append(record)
        files.round(record)
        log.info("round %d: L_S %.4f L_T %.4f dW %d", r, losses.get("l_source", float("nan")),
                 losses.get("l_target", float("nan")), dw.changed)
        ceiling = math.log(min(cfg.batch_size, len(lt_x)))
        if cfg.saturation_stop > 0 and losses and losses["l_target"] >= cfg.saturation_stop * ceiling:
            exit_reason = "target-collapsed"
        elif len(cws) >= cfg.budget_M or sel.exhausted:
            exit_reason = "budget"
        elif r == cfg.rounds_max:
            exit_reason = "rounds-max"
        files.checkpoint({"encoder": enc.state_dict(), "baseline": state.baseline_snapshot,
                          "critical_set": cws.to_json(dict(enumerate(state.layer_names))),
                          "optimizer": opt.state_dict(), "rounds": rounds, "round": r, "source_start": src_start,
                          "rng": _rng_state(gen), "aug_rng": aug_gen.get_state(), "exit_reason": exit_reason})
        r += 1
    enc.eval()
    files.finish(state, cws)
    return LockResult(state, cws, [], rounds, exit_reason or "rounds-max", source_head)
