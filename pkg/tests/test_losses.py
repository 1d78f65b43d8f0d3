import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from encoderlock.losses import (AugmentationPolicy, ContrastiveDomainError, EmbeddingBatch, LabelRangeError,
                                augment, contrastive_loss, el_loss, el_loss_contrastive, el_loss_grad,
                                el_objective, make_positive_pairs, similarity_matrix, supervised_pair_losses)


def fixture_2x2() -> EmbeddingBatch:
    """Unit vectors whose anchor/positive cosines are [[0.9, 0.1], [0.2, 0.8]]."""
    a = torch.tensor([[0.9, 0.1, math.sqrt(1 - 0.82)], [0.2, 0.8, math.sqrt(1 - 0.68)]], dtype=torch.float64)
    p = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    return EmbeddingBatch(a, p)


def test_el_loss_values():
    assert el_loss(1.0, 2.0, 1000).l_el == pytest.approx(1 + math.log(501), abs=1e-12)
    assert el_loss(1.0, 2.0, 1000).l_el == pytest.approx(7.21661, abs=1e-5)
    assert el_loss_contrastive(0.5, 0.25, 10).l_el == pytest.approx(3.544522, abs=1e-5)
    b = el_loss(0.7, 0.3, 0)
    assert b.l_el == 0.7 and b.r_target == 0.0
    z = el_loss(0.0, 0.3, 1000)
    assert z.r_target == 0.0 and z.l_el == 0.0
    for mag in (1e-3, 1.0, 50.0):
        assert el_loss_contrastive(mag, mag, 10).r_target == pytest.approx(math.log(11), abs=1e-12)


def test_el_loss_bundle_invariants():
    b = el_loss(0.4, 1.3, 7.0)
    assert b.l_el == b.l_source + b.r_target
    assert b.r_target == pytest.approx(math.log(1 + 7.0 * 0.4 / 1.3))
    assert b.r_target >= 0 and not b.saturated
    assert set(b.as_dict()) >= {"l_source", "l_target", "alpha", "r_target", "l_el"}


def test_el_loss_saturation():
    b = el_loss(1.0, 0.0, 10)
    assert b.saturated and math.isfinite(b.l_el)
    assert b.r_target == pytest.approx(math.log1p(10 / 1e-8))
    _, _, sat = el_objective(torch.tensor(1.0), torch.tensor(1e-12), 10.0)
    assert sat


def test_el_loss_decreasing_in_target():
    grid = np.linspace(0.01, 10, 400)
    vals = [el_loss(0.8, t, 100).l_el for t in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_el_loss_gradient_check():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        ls, lt, alpha = rng.uniform(0.01, 5), rng.uniform(0.05, 5), rng.uniform(0, 2000)
        gs, gt = el_loss_grad(ls, lt, alpha)
        h = 1e-6
        fs = (el_loss(ls + h, lt, alpha).l_el - el_loss(ls - h, lt, alpha).l_el) / (2 * h)
        ft = (el_loss(ls, lt + h, alpha).l_el - el_loss(ls, lt - h, alpha).l_el) / (2 * h)
        worst = max(worst, abs(gs - fs) / max(abs(fs), 1e-12), abs(gt - ft) / max(abs(ft), 1e-12))
        # the torch objective must agree with the closed form
        s = torch.tensor(ls, dtype=torch.float64, requires_grad=True)
        t = torch.tensor(lt, dtype=torch.float64, requires_grad=True)
        el_objective(s, t, alpha)[0].backward()
        assert s.grad.item() == pytest.approx(gs, rel=1e-10)
        assert t.grad.item() == pytest.approx(gt, rel=1e-10)
    assert worst <= 1e-4


def test_contrastive_gradient_check():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n, d = rng.integers(1, 6), rng.integers(2, 8)
        # positive orthant keeps every cosine positive, so the literal form is defined
        a = torch.tensor(np.abs(rng.normal(size=(n, d))) + 0.05, dtype=torch.float64, requires_grad=True)
        p = torch.tensor(np.abs(rng.normal(size=(n, d))) + 0.05, dtype=torch.float64)

        def f(x):
            return contrastive_loss(EmbeddingBatch.from_raw(x, p))

        f(a).backward()
        g = a.grad.numpy()
        x0 = a.detach().numpy()
        h = 1e-6
        fd = np.zeros_like(x0)
        for idx in np.ndindex(*x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += h
            xm[idx] -= h
            fd[idx] = (float(f(torch.tensor(xp))) - float(f(torch.tensor(xm)))) / (2 * h)
        scale = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(g - fd).max() / scale))
    assert worst <= 1e-4


def test_contrastive_fixture_and_trivia():
    b = fixture_2x2()
    np.testing.assert_allclose(similarity_matrix(b).numpy(), [[0.9, 0.1], [0.2, 0.8]], atol=1e-12)
    assert float(contrastive_loss(b)) == pytest.approx(0.164252, abs=1e-6)
    assert float(contrastive_loss(b)) == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), abs=1e-12)
    one = EmbeddingBatch.from_raw(torch.randn(1, 4), torch.randn(1, 4).abs() + 1)
    one = EmbeddingBatch(one.anchors.abs() / one.anchors.abs().norm(), one.positives)
    assert float(contrastive_loss(one)) == pytest.approx(0.0, abs=1e-7)


def test_contrastive_permutation_and_rotation_invariance():
    torch.manual_seed(0)
    a = F.normalize(torch.rand(6, 5, dtype=torch.float64) + 0.1, dim=1)
    p = F.normalize(torch.rand(6, 5, dtype=torch.float64) + 0.1, dim=1)
    base = float(contrastive_loss(EmbeddingBatch(a, p)))
    perm = torch.randperm(6)
    assert float(contrastive_loss(EmbeddingBatch(a[perm], p[perm]))) == pytest.approx(base, abs=1e-12)
    q, _ = torch.linalg.qr(torch.randn(5, 5, dtype=torch.float64))
    assert float(contrastive_loss(EmbeddingBatch(a @ q, p @ q))) == pytest.approx(base, abs=1e-10)


def test_contrastive_domain_error_names_anchor():
    # anchor 1 is orthogonal to its positive, so its ratio is 0
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([[0.6, 0.8], [1.0, 0.0]], dtype=torch.float64)
    with pytest.raises(ContrastiveDomainError) as ei:
        contrastive_loss(EmbeddingBatch(a, p))
    assert ei.value.anchor == 1
    # the exp mode is always defined
    assert math.isfinite(float(contrastive_loss(EmbeddingBatch(a, p), mode="exp")))


def test_exp_mode_matches_infonce_oracle():
    torch.manual_seed(2)
    b = EmbeddingBatch.from_raw(torch.randn(5, 4, dtype=torch.float64), torch.randn(5, 4, dtype=torch.float64))
    s = (b.anchors @ b.positives.T).numpy() / 0.5
    oracle = -np.mean([s[i, i] - np.log(np.exp(s[i]).sum()) for i in range(5)])
    assert float(contrastive_loss(b, mode="exp", tau=0.5)) == pytest.approx(oracle, abs=1e-10)


def test_embedding_batch_validation():
    with pytest.raises(ValueError):
        EmbeddingBatch(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ValueError):
        EmbeddingBatch(torch.empty(0, 3), torch.empty(0, 3))
    with pytest.raises(ValueError):
        EmbeddingBatch(torch.eye(2), torch.eye(3)[:2])


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


def test_supervised_pair_losses_closed_forms():
    enc = nn.Identity()
    uniform = FixedLogits(torch.zeros(1, 10))
    half = FixedLogits(torch.tensor([[0.0, 0.0]]))
    x = torch.zeros(3, 4)
    ls, lt = supervised_pair_losses(enc, uniform, half, (x, torch.tensor([0, 4, 9])), (x[:1], torch.tensor([1])))
    assert float(ls) == pytest.approx(math.log(10), abs=1e-6)
    assert float(lt) == pytest.approx(math.log(2), abs=1e-6)
    with pytest.raises(LabelRangeError):
        supervised_pair_losses(enc, uniform, half, (x, torch.tensor([0, 1, 10])), (x[:1], torch.tensor([1])))


def test_supervised_pair_losses_oracle():
    torch.manual_seed(4)
    enc = nn.Linear(5, 6)
    hs, ht = nn.Linear(6, 3), nn.Linear(6, 4)
    xs, xt = torch.randn(7, 5), torch.randn(5, 5)
    ys, yt = torch.randint(0, 3, (7,)), torch.randint(0, 4, (5,))
    ls, lt = supervised_pair_losses(enc, hs, ht, (xs, ys), (xt, yt))
    ls, lt = ls.detach(), lt.detach()

    def oracle(head, x, y):
        z = head(enc(x)).detach().double().numpy()
        z = z - z.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        return -np.mean(logp[np.arange(len(y)), y.numpy()])

    assert float(ls) == pytest.approx(oracle(hs, xs, ys), abs=1e-6)
    assert float(lt) == pytest.approx(oracle(ht, xt, yt), abs=1e-6)


def test_augmentation_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentationPolicy(crop_scale_range=(0.9, 0.5))
    with pytest.raises(ValueError):
        AugmentationPolicy(blur_sigma_range=(-1.0, 1.0))


def test_identity_policy_gives_minimum_loss():
    torch.manual_seed(0)
    enc = nn.Sequential(nn.Flatten(), nn.Linear(3 * 8 * 8, 6), nn.ReLU6())
    imgs = torch.rand(5, 3, 8, 8)
    b = make_positive_pairs(imgs, AugmentationPolicy.identity(), enc)
    assert torch.equal(b.anchors, b.positives)
    s = similarity_matrix(b).detach().numpy()
    # with anchors == positives the loss is -mean ln(1 / row sum), the batch-determined minimum
    assert float(contrastive_loss(b).detach()) == pytest.approx(float(np.mean(np.log(s.sum(1)))), abs=1e-6)


def test_positive_pairs_deterministic_and_bruteforce():
    from encoderlock.expcli.toy import make_split

    x, _ = make_split("mnist", 8, 5)
    imgs = torch.from_numpy(x)
    torch.manual_seed(0)
    enc = nn.Sequential(nn.Conv2d(3, 4, 3), nn.ReLU6(), nn.Flatten(), nn.Linear(4 * 30 * 30, 16), nn.ReLU6())
    pol = AugmentationPolicy(seed=9)
    b1 = make_positive_pairs(imgs, pol, enc)
    b2 = make_positive_pairs(imgs, pol, enc)
    assert torch.equal(b1.anchors, b2.anchors) and torch.equal(b1.positives, b2.positives)
    a, p = b1.anchors.detach().double().numpy(), b1.positives.detach().double().numpy()
    loss = 0.0
    for i in range(8):
        num = sum(a[i, k] * p[i, k] for k in range(16))
        den = sum(sum(a[i, k] * p[j, k] for k in range(16)) for j in range(8))
        loss -= math.log(num / den) / 8
    assert float(contrastive_loss(b1).detach()) == pytest.approx(loss, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), lo=st.floats(0.05, 1.0))
def test_augment_shapes_and_range(seed, lo):
    imgs = torch.rand(4, 3, 12, 12)
    pol = AugmentationPolicy(crop_scale_range=(lo, 1.0), seed=seed)
    out = augment(imgs, pol, torch.Generator().manual_seed(seed))
    assert out.shape == imgs.shape
    assert float(out.min()) >= -1e-6 and float(out.max()) <= 1 + 1e-6


def test_full_crop_is_exact_copy():
    from encoderlock.losses import _random_crop

    imgs = torch.rand(3, 3, 10, 10)
    pol = AugmentationPolicy(crop_scale_range=(1.0, 1.0))
    assert torch.equal(_random_crop(imgs, pol, torch.Generator().manual_seed(0)), imgs)


def test_empty_crop_retries_then_fails():
    from encoderlock.losses import EmptyCropError, _random_crop

    imgs = torch.rand(2, 3, 2, 2)
    # sqrt(0.01) * 2 rounds to 0 pixels every time
    pol = AugmentationPolicy(crop_scale_range=(0.01, 0.01), max_retries=3)
    with pytest.raises(EmptyCropError):
        _random_crop(imgs, pol, torch.Generator().manual_seed(0))
