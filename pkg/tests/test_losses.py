import math

import numpy as np
import pytest
import torch

from sitegen.errors import SitegenError
from sitegen.losses import LossConfig, dice_loss, site_loss, total_loss

EPS = 1e-5


def test_dice_perfect_overlap_is_zero():
    target = torch.zeros(8, 8, dtype=torch.float64)
    target[2:5, 3:6] = 1
    assert dice_loss(target.clone(), target).item() == 0.0


def test_dice_empty_empty_is_zero():
    z = torch.zeros(8, 8, dtype=torch.float64)
    assert dice_loss(z, z).item() == 0.0


def test_dice_disjoint():
    pred = torch.zeros(10, 10, dtype=torch.float64)
    target = torch.zeros(10, 10, dtype=torch.float64)
    pred[0, :] = 1
    target[5, :] = 1
    expected = 1 - EPS / (10 + 10 + EPS)
    assert abs(dice_loss(pred, target).item() - expected) < 1e-12
    assert expected == pytest.approx(0.9999995, abs=1e-9)


def test_dice_range_and_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = torch.tensor(rng.random((6, 6)))
        target = torch.tensor((rng.random((6, 6)) > 0.5).astype(float))
        value = dice_loss(pred, target).item()
        assert 0 <= value < 1
        binary = (pred > 0.5).double()
        assert dice_loss(binary, target).item() == pytest.approx(dice_loss(target, binary).item(), abs=1e-15)


def test_dice_decreases_when_pixel_corrected():
    rng = np.random.default_rng(1)
    target = torch.tensor((rng.random((8, 8)) > 0.6).astype(float))
    pred = target.clone()
    wrong = torch.nonzero(target == 1)[:3]
    for r, c in wrong:
        pred[r, c] = 0
    before = dice_loss(pred, target).item()
    pred[wrong[0][0], wrong[0][1]] = 1
    assert dice_loss(pred, target).item() < before


def test_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(5):
        pred = torch.tensor(rng.uniform(0.05, 0.95, (8, 8)), requires_grad=True)
        target = torch.tensor((rng.random((8, 8)) > 0.5).astype(float))
        dice_loss(pred, target).backward()
        grad = pred.grad.numpy()
        h = 1e-6
        numeric = np.zeros((8, 8))
        base = pred.detach().numpy()
        for i in range(8):
            for j in range(8):
                up, down = base.copy(), base.copy()
                up[i, j] += h
                down[i, j] -= h
                numeric[i, j] = (
                    dice_loss(torch.tensor(up), target).item() - dice_loss(torch.tensor(down), target).item()
                ) / (2 * h)
        rel = np.linalg.norm(grad - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-3


def test_dice_batch_mean_of_samples():
    rng = np.random.default_rng(3)
    pred = torch.tensor(rng.random((4, 1, 5, 5)))
    target = torch.tensor((rng.random((4, 1, 5, 5)) > 0.5).astype(float))
    per = [dice_loss(pred[i, 0], target[i, 0]).item() for i in range(4)]
    assert dice_loss(pred, target).item() == pytest.approx(np.mean(per), abs=1e-12)
    with pytest.raises(SitegenError):
        dice_loss(pred, target[:, :, :4])


def test_site_loss_uniform():
    assert abs(site_loss(torch.zeros(8, dtype=torch.float64), 3).item() - math.log(8)) < 1e-9


def test_site_loss_known_value():
    expected = -math.log(math.e**2 / (math.e**2 + 2))
    value = site_loss(torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64), 0).item()
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.2395, abs=1e-4)


def test_site_loss_asymptote():
    assert site_loss(torch.tensor([50.0, 0.0, 0.0], dtype=torch.float64), 0).item() < 1e-20


def test_site_loss_matches_direct_cross_entropy():
    rng = np.random.default_rng(4)
    for _ in range(20):
        k = int(rng.integers(2, 9))
        logits = rng.normal(size=k) * 3
        y = int(rng.integers(k))
        probs = np.exp(logits) / np.exp(logits).sum()
        onehot = np.eye(k)[y]
        direct = -(onehot * np.log(probs)).sum()
        assert abs(site_loss(torch.tensor(logits), y).item() - direct) < 1e-8


def test_site_loss_index_out_of_range():
    with pytest.raises(SitegenError) as err:
        site_loss(torch.zeros(3), 3)
    assert err.value.code == "index-out-of-range"


def test_total_loss_is_plain_sum():
    assert total_loss(0.3, 0.7) == pytest.approx(1.0)
    assert total_loss(0, 0) == 0


def test_loss_config():
    assert LossConfig().epsilon == 1e-5
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
