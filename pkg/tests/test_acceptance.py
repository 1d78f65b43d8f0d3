"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk-scale criteria (6-12) drive the bundled toy configs through the same
Runner the CLI uses, so these runs take several minutes on one CPU core.
"""

import copy
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from conftest import ACCEPTANCE
from encoderlock.dws import SelectionConfig, score_weights, select_round
from encoderlock.expcli.config import ExperimentConfig, bundled_config
from encoderlock.expcli.runner import Runner, load_encoder
from encoderlock.locktrain import LockConfig, lock_unsupervised
from encoderlock.losses import EmbeddingBatch, contrastive_loss, el_loss, el_loss_contrastive, el_loss_grad
from encoderlock.probebench import HeadConfig, aggregate_drop, assemble, measure, ppi, relative_drop
from encoderlock.weightspace import (CriticalWeightSet, EncoderState, changed_coordinates, checksum, delta_w,
                                     load_critical_set)
from encoderlock.zeroshot import load_dataset, load_manifest

pytestmark = pytest.mark.acceptance


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# metric and loss oracles

def test_c01_metric_definitions():
    pairs = [(96.35, 8.47), (43.74, 18.98), (68.24, 18.05), (69.65, 13.67)]
    agg = 100 * aggregate_drop(pairs)
    drop = 100 * relative_drop(99.53, 99.32)
    ok = abs(agg - 78.70) <= 0.05 and round(drop, 2) == 0.21
    record(1, ok, f"aggregate drop {agg:.3f}% (printed 78.70), relative drop {drop:.4f}% (printed 0.21)")


def test_c02_ppi():
    v = ppi(94.7, 17.8, 94.2, 93.5)
    same = ppi(0.91, 0.91, 0.88, 0.88)
    record(2, abs(v - 5.281) <= 0.01 and same == 1.0, f"PPI {v:.4f} (want 5.281 +- 0.01), no protection {same}")


def test_c03_loss_oracles():
    a = el_loss(1.0, 2.0, 1000).l_el
    b = el_loss_contrastive(0.5, 0.25, 10).l_el
    anchors = torch.tensor([[0.9, 0.1, math.sqrt(1 - 0.82)], [0.2, 0.8, math.sqrt(1 - 0.68)]], dtype=torch.float64)
    positives = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    c = float(contrastive_loss(EmbeddingBatch(anchors, positives)))
    ident = el_loss(0.7, 0.3, 0).l_el == 0.7 and el_loss(0.0, 0.3, 1000).l_el == 0.0
    ok = abs(a - 7.21661) <= 1e-5 and abs(b - 3.544522) <= 1e-5 and abs(c - 0.164252) <= 1e-6 and ident
    record(3, ok, f"el_loss {a:.6f}, el_loss_contrastive {b:.6f}, 2x2 contrastive {c:.7f}, identities {ident}")


def test_c04_gradient_checks():
    rng = np.random.default_rng(42)
    h, worst_el, worst_c = 1e-6, 0.0, 0.0
    for _ in range(100):
        ls, lt, alpha = rng.uniform(0.01, 5), rng.uniform(0.05, 5), rng.uniform(0, 2000)
        gs, gt = el_loss_grad(ls, lt, alpha)
        fs = (el_loss(ls + h, lt, alpha).l_el - el_loss(ls - h, lt, alpha).l_el) / (2 * h)
        ft = (el_loss(ls, lt + h, alpha).l_el - el_loss(ls, lt - h, alpha).l_el) / (2 * h)
        worst_el = max(worst_el, abs(gs - fs) / abs(fs), abs(gt - ft) / abs(ft))
    for _ in range(100):
        n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        p = torch.tensor(np.abs(rng.normal(size=(n, d))) + 0.05)
        x0 = np.abs(rng.normal(size=(n, d))) + 0.05
        f = lambda x: float(contrastive_loss(EmbeddingBatch.from_raw(torch.tensor(x), p)))  # noqa: E731
        xt = torch.tensor(x0, requires_grad=True)
        contrastive_loss(EmbeddingBatch.from_raw(xt, p)).backward()
        fd = np.zeros_like(x0)
        for idx in np.ndindex(*x0.shape):
            e = np.zeros_like(x0)
            e[idx] = h
            fd[idx] = (f(x0 + e) - f(x0 - e)) / (2 * h)
        worst_c = max(worst_c, float(np.abs(xt.grad.numpy() - fd).max() / max(np.abs(fd).max(), 1e-8)))
    record(4, worst_el <= 1e-4 and worst_c <= 1e-4,
           f"max relative error el_loss {worst_el:.2e}, contrastive {worst_c:.2e} (limit 1e-4)")


def test_c05_dws_oracle():
    m = nn.Linear(2, 1, bias=False).double()
    with torch.no_grad():
        m.weight.copy_(torch.tensor([[0.3, -0.7]], dtype=torch.float64))
    state = EncoderState(m)
    xs, ys = torch.tensor([[1.0, 0.5]], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64)
    xt, yt = torch.tensor([[0.2, 1.0]], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64)
    src = lambda: ((m(xs).squeeze(1) - ys) ** 2).mean()  # noqa: E731
    tgt = lambda: ((m(xt).squeeze(1) - yt) ** 2).mean()  # noqa: E731
    cfg = SelectionConfig(2, 1)
    scores = score_weights(state, src, tgt, cfg)
    sel = select_round(scores, CriticalWeightSet(2), cfg, state)
    w = np.array([0.3, -0.7])
    g_s = 2 * (xs.numpy()[0] @ w - 2.0) * xs.numpy()[0]
    g_t = 2 * (xt.numpy()[0] @ w - 1.0) * xt.numpy()[0]
    ratio = np.abs(g_t) / (np.abs(g_s) + 1e-12)
    brute = sorted(range(2), key=lambda i: (-ratio[i], i))
    ranking_ok = [c.flat_index for c in sel.added] == brute
    ones = score_weights(state, src, src, cfg)["weight"]
    ones_ok = bool(torch.allclose(ones, torch.ones_like(ones), atol=1e-9))

    def seeded():
        torch.manual_seed(7)
        net = nn.Sequential(nn.Linear(4, 6), nn.ReLU(), nn.Linear(6, 3))
        st = EncoderState(net)
        x, y = torch.randn(9, 4), torch.randint(0, 3, (9,))
        s = score_weights(st, lambda: F.cross_entropy(net(x), y), lambda: F.cross_entropy(net(x + 1), y),
                          SelectionConfig(5, 1))
        return select_round(s, CriticalWeightSet(5), SelectionConfig(5, 1), st).added

    det_ok = seeded() == seeded()
    record(5, ranking_ok and ones_ok and det_ok,
           f"ranking {[c.flat_index for c in sel.added]} vs brute force {brute}, unit scores {ones_ok}, "
           f"deterministic {det_ok}")


# desk-scale runs

def _run(tmp_path_factory, name, checkpoint=None):
    doc = json.loads(bundled_config(name).read_text())
    out = tmp_path_factory.mktemp(name) / "run"
    if checkpoint is not None:
        doc["encoder"]["checkpoint"] = str(checkpoint)
    cfg = ExperimentConfig.from_dict(doc, output_dir=str(out))
    t0 = time.time()
    Runner(cfg).run()
    metrics = {}
    for line in (out / "metrics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        metrics[rec["stage"]] = rec
    report = json.loads((out / "report.json").read_text())
    return {"out": out, "cfg": cfg, "metrics": metrics, "report": report, "seconds": time.time() - t0}


@pytest.fixture(scope="module")
def supervised_run(tmp_path_factory):
    return _run(tmp_path_factory, "toy")


@pytest.fixture(scope="module")
def unsupervised_run(tmp_path_factory, supervised_run):
    # same pretraining config and seed, so reuse the identical pretrained encoder
    return _run(tmp_path_factory, "toy_unsupervised", supervised_run["out"] / "encoder_pretrained.pt")


@pytest.fixture(scope="module")
def zeroshot_run(tmp_path_factory, supervised_run):
    return _run(tmp_path_factory, "toy_zeroshot", supervised_run["out"] / "encoder_pretrained.pt")


def test_c06_supervised_lock(supervised_run):
    r, lock = supervised_run["report"], supervised_run["metrics"]["lock"]
    cfg = supervised_run["cfg"].lock
    src, tgt = r["relative_drop"]["toy_mnist"], r["relative_drop"]["toy_usps"]
    budget = cfg.n_per_round * cfg.rounds_max
    minutes = supervised_run["seconds"] / 60
    ok = (src <= 0.05 and tgt >= 0.50 and lock["delta_w"] <= budget and minutes <= 30
          and cfg.n_per_round == 50 and cfg.rounds_max <= 20 and cfg.alpha == 1000)
    record(6, ok, f"source drop {100 * src:.2f}% (<=5), target drop {100 * tgt:.2f}% (>=50), "
                  f"dW {lock['delta_w']} (<= {budget}), {lock['rounds']} rounds, exit {lock['exit_reason']}, "
                  f"pipeline {minutes:.1f} min")


def test_c07_head_grid(supervised_run):
    r = supervised_run["report"]
    goal = supervised_run["cfg"].lock.acc_goal
    accs = {f"d{x['head']['depth']}h{x['head']['hidden_dim']}": x["acc_m"] for x in r["records"]
            if x["domain"] == "toy_usps"}
    grid = {(x["head"]["depth"], x["head"]["hidden_dim"]) for x in r["records"] if x["domain"] == "toy_usps"}
    want = {(1, None), (2, 64), (2, 256), (3, 64), (3, 256)}
    spread = max(accs.values()) - min(accs.values())
    ok = grid == want and max(accs.values()) <= goal + 0.05 and spread <= 0.10
    record(7, ok, f"target accuracies {', '.join(f'{k}={v:.3f}' for k, v in accs.items())}; "
                  f"max {max(accs.values()):.3f} (<= {goal + 0.05:.2f}), spread {100 * spread:.1f} pts (<=10)")


def test_c08_unsupervised_lock(unsupervised_run):
    r, lock = unsupervised_run["report"], unsupervised_run["metrics"]["lock"]
    src, tgt = r["relative_drop"]["toy_mnist"], r["relative_drop"]["toy_usps"]
    record(8, src <= 0.05 and tgt >= 0.40,
           f"source drop {100 * src:.2f}% (<=5), target drop {100 * tgt:.2f}% (>=40), dW {lock['delta_w']}, "
           f"{lock['rounds']} rounds, exit {lock['exit_reason']}")


def test_c09_data_fraction_sweep(supervised_run):
    r = supervised_run["report"]
    sweep = {float(k): v for k, v in r["sweep"]["toy_usps"].items()}
    scratch = r["scratch"]["toy_usps"]
    gain = sweep[1.0] - sweep[0.1]
    ok = gain <= 0.10 and max(sweep.values()) < scratch
    record(9, ok, f"sweep {', '.join(f'{k:g}:{v:.3f}' for k, v in sorted(sweep.items()))}; "
                  f"gain 0.1->1.0 {100 * gain:.1f} pts (<=10), scratch threshold {scratch:.3f}")


def test_c10_security_verdict(supervised_run):
    out = supervised_run["out"]
    r = supervised_run["report"]
    locked_ok = r["verdict"]["verdict"] == "SECURE" and r["verdict"]["epsilon"] == 0.02
    enc_o = load_encoder(out / "encoder_pretrained.pt")
    runner = Runner(supervised_run["cfg"], out)
    domains = {d["name"]: (d["role"], runner.eval_handle(d)) for d in supervised_run["cfg"].domains}
    meas = measure(enc_o, copy.deepcopy(enc_o), domains, [HeadConfig()], scratch=r["scratch"], sweep=False)
    unlocked = assemble(meas, 0.02).verdict
    record(10, locked_ok and not unlocked.secure,
           f"locked {r['verdict']['verdict']} (threshold {r['verdict']['acc_threshold']:.3f}); "
           f"unlocked {unlocked.verdict.value} violating {list(unlocked.violated)}")


def test_c11_zeroshot_loop(zeroshot_run, tmp_path):
    out = zeroshot_run["out"]
    zs = zeroshot_run["cfg"].zeroshot
    doc = load_manifest(out / "synthetic")
    trace = [e["max_offdiag"] for e in doc["ledger"]]
    monotone = all(b <= a for a, b in zip(trace, trace[1:]))
    within = len(doc["ledger"]) <= zs["max_rounds"] + 1
    rounds_ok = True
    for entry in doc["rounds"]:
        ds = load_dataset(out / "synthetic", entry["round"], verify=True)
        rounds_ok &= len(ds.prompts) == 10 and all(len(g) == 100 for g in ds.groups)
    lock = zeroshot_run["metrics"]["lock"]
    # and directly: the synthetic dataset feeds lock_unsupervised end to end
    enc = load_encoder(out / "encoder_pretrained.pt")
    runner = Runner(zeroshot_run["cfg"], out)
    res = lock_unsupervised(EncoderState(enc), runner.handle("toy_mnist"), load_dataset(out / "synthetic"),
                            LockConfig(variant="zeroshot", alpha=10, n_per_round=50, rounds_max=2, inner_epochs=1,
                                       lock_subset_size=500))
    ok = within and (monotone or doc["exit_reason"] == "stopped-decreasing") and rounds_ok and len(res.rounds) >= 1
    record(11, ok, f"ledger {[round(t, 3) for t in trace]} exit {doc['exit_reason']}, "
                   f"{len(doc['rounds'])} rounds of 10x100 images verified, pipeline lock {lock['rounds']} rounds "
                   f"(dW {lock['delta_w']}), direct lock {len(res.rounds)} rounds")


def test_c12_invariants(supervised_run, unsupervised_run, zeroshot_run):
    details, ok = [], True
    for name, run in (("supervised", supervised_run), ("unsupervised", unsupervised_run),
                      ("zeroshot", zeroshot_run)):
        out, cfg = run["out"], run["cfg"].lock
        enc_o, enc_m = load_encoder(out / "encoder_pretrained.pt"), load_encoder(out / "encoder_locked.pt")
        state = EncoderState(enc_m, {n: p.detach().clone() for n, p in enc_o.named_parameters()})
        cws = load_critical_set(out / "lock" / "critical_set.json", state, cfg.budget_M)
        inside = changed_coordinates(state) <= set(cws.coordinates)
        changed = delta_w(state).changed
        before = (checksum(enc_o), checksum(enc_m))
        runner = Runner(run["cfg"], out)
        d = run["cfg"].authorized
        measure(enc_o, enc_m, {d["name"]: ("authorized", runner.eval_handle(d)),
                               "probe": ("prohibited", runner.eval_handle(run["cfg"].prohibited[0]))},
                [HeadConfig()], scratch={"probe": 1.0}, sweep=False)
        untouched = (checksum(enc_o), checksum(enc_m)) == before
        good = inside and changed <= len(cws) <= cfg.budget_M and untouched
        ok &= good
        details.append(f"{name}: changed {changed} <= |set| {len(cws)} <= {cfg.budget_M}, "
                       f"complement bit-identical {inside}, probing left encoders {untouched}")
    record(12, ok, "; ".join(details))
