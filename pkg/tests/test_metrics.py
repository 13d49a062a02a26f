import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from endodepthl.metrics import (ComplexityReport, compute_accuracy, count_flops, count_params, measure_fps,
                                profile_model)
from endodepthl.network import DepthNet, EncoderConfig, EndoDepthL, XCABlock


def test_accuracy_identity():
    gt = np.array([[10.0, 20.0], [35.0, 80.0]])
    r = compute_accuracy(gt, gt)
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) == (0, 0, 0, 0)
    assert (r.delta1, r.delta2, r.delta3) == (1, 1, 1)
    assert r.n_pixels == 4


def test_accuracy_double_prediction():
    gt = np.array([5.0, 10.0, 30.0, 60.0])
    r = compute_accuracy(2 * gt, gt, median_scaling=False)
    assert abs(r.abs_rel - 1.0) < 1e-6
    assert 2 > 1.25 ** 3
    assert r.delta3 == 0
    # median scaling removes a uniform factor entirely
    assert compute_accuracy(2 * gt, gt).abs_rel < 1e-12


def test_accuracy_hand_example():
    r = compute_accuracy(np.array([11.0, 18.0]), np.array([10.0, 20.0]), median_scaling=False)
    assert abs(r.abs_rel - 0.1) < 1e-6
    assert abs(r.rmse - math.sqrt(2.5)) < 1e-6
    assert abs(r.rmse - 1.5811) < 1e-4
    assert abs(r.sq_rel - (1 / 10 + 4 / 20) / 2) < 1e-6


def test_accuracy_cap_and_invalid():
    gt = np.array([0.0, 10.0, 400.0])
    pred = np.array([5.0, 10.0, 150.0])
    r = compute_accuracy(pred, gt, cap=150, median_scaling=False)
    assert r.n_pixels == 2 and r.abs_rel == 0
    with pytest.raises(ValueError):
        compute_accuracy(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        compute_accuracy(np.ones(3), np.ones(4))


def test_delta_monotone_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = rng.integers(1, 50)
        gt = rng.uniform(1, 150, n)
        pred = gt * np.exp(rng.normal(0, 0.5, n))
        r = compute_accuracy(pred, gt, median_scaling=bool(rng.integers(2)))
        assert 0 <= r.delta1 <= r.delta2 <= r.delta3 <= 1


def test_accuracy_permutation_and_scale_invariance():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 100, 200)
    pred = gt * np.exp(rng.normal(0, 0.2, 200))
    base = compute_accuracy(pred, gt)
    perm = rng.permutation(200)
    assert compute_accuracy(pred[perm], gt[perm]) == pytest.approx(base)
    scaled = compute_accuracy(3.7 * pred, gt)
    for key, val in base.to_dict().items():
        assert getattr(scaled, key) == pytest.approx(val, rel=1e-9, abs=1e-12)


def test_count_params_examples():
    assert count_params(nn.Conv2d(3, 16, 3)) == 448
    assert count_params(nn.Linear(128, 6)) == 774
    assert count_params(nn.Sequential()) == 0
    assert count_params({"a": np.zeros((2, 3)), "b": np.zeros(4)}) == 10
    both = nn.Sequential(nn.Conv2d(3, 16, 3), nn.Linear(128, 6))
    assert count_params(both) == 448 + 774


def test_count_flops_examples():
    conv = nn.Conv2d(3, 16, 3, padding=1)
    assert count_flops(conv, (1, 3, 64, 64)) == 3 * 3 * 3 * 16 * 64 * 64 == 1_769_472
    assert count_flops(conv, (1, 3, 64, 64), convention="2mac") == 2 * 1_769_472
    assert count_flops(nn.Identity(), (1, 3, 8, 8)) == 0
    assert count_flops(nn.Flatten(), (1, 3, 8, 8)) == 0
    dw = nn.Conv2d(8, 8, 3, padding=1, groups=8)
    assert count_flops(dw, (1, 8, 10, 10)) == 9 * 8 * 100
    assert count_flops(nn.Linear(128, 6), (1, 128)) == 768
    with pytest.raises(ValueError):
        count_flops(conv, (1, 3, None, 64))


def test_count_flops_spatial_scaling():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.Conv2d(8, 4, 3, stride=2, padding=1))
    assert count_flops(net, (1, 3, 64, 64)) == 4 * count_flops(net, (1, 3, 32, 32))


def test_count_flops_additive():
    a, b = nn.Conv2d(3, 8, 3, padding=1), nn.Conv2d(8, 4, 1)
    seq = nn.Sequential(a, b)
    assert count_flops(seq, (1, 3, 16, 16)) == count_flops(a, (1, 3, 16, 16)) + count_flops(b, (1, 8, 16, 16))


def test_xca_flops():
    c, h, w = 8, 4, 5
    n = h * w
    blk = XCABlock(c)
    proj = n * c * 3 * c + n * c * c
    attn = 2 * c * c * n + 2 * c * n + c * c + c * n
    gelu = c * n
    assert count_flops(blk, (1, c, h, w)) == proj + attn + gelu


def test_mode_ordering():
    eff = EndoDepthL(EncoderConfig("efficiency"))
    perf = EndoDepthL(EncoderConfig("performance"))
    assert count_params(eff) < count_params(perf)
    assert count_flops(eff, (1, 3, 256, 320)) < count_flops(perf, (1, 3, 256, 320))
    assert count_params(eff) <= 4_500_000 and count_params(perf) <= 16_000_000


class _Sleeper:
    def __init__(self, seconds):
        self.seconds = seconds

    def __call__(self, *args):
        time.sleep(self.seconds)


def test_fps_stubs():
    fast = measure_fps(_Sleeper(0.010), warmup=1, iters=10)
    slow = measure_fps(_Sleeper(0.020), warmup=1, iters=10)
    assert fast.mean == pytest.approx(100, rel=0.1)
    assert slow.mean == pytest.approx(50, rel=0.1)
    assert slow.mean / fast.mean == pytest.approx(0.5, rel=0.1)
    assert len(fast.runs) == 3 and fast.std >= 0


def test_fps_protocol_guards():
    with pytest.raises(ValueError):
        measure_fps(_Sleeper(0), warmup=0)
    with pytest.raises(ValueError):
        measure_fps(_Sleeper(0), iters=9)


def test_profile_report():
    torch.manual_seed(0)
    model = DepthNet(EncoderConfig("efficiency", 64, 64))
    rep = profile_model(model, (1, 3, 64, 64), warmup=1, iters=10, repeats=2)
    assert isinstance(rep, ComplexityReport)
    assert rep.param_count == count_params(model) > 0
    assert rep.flops == count_flops(model, (1, 3, 64, 64)) > 0
    assert rep.fps > 0
    assert set(rep.to_dict()) >= {"param_count", "flops", "fps", "input_shape", "warmup", "iters"}
