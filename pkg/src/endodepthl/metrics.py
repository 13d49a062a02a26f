"""Depth accuracy metrics and model complexity (parameters, FLOPs, FPS)."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

DELTA_BASE = 1.25


@dataclass
class AccuracyReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ComplexityReport:
    param_count: int
    flops: int
    fps: float
    fps_std: float
    input_shape: list
    warmup: int
    iters: int
    repeats: int
    flops_convention: str = "mac"

    def to_dict(self) -> dict:
        return asdict(self)


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def median_scale(pred, gt) -> float:
    return float(np.median(gt) / np.median(pred))


def accuracy_from_pixels(pred: np.ndarray, gt: np.ndarray) -> AccuracyReport:
    """Metrics over already-filtered, already-scaled depth samples."""
    if gt.size == 0:
        raise ValueError("no valid pixels to evaluate")
    ratio = np.maximum(gt / pred, pred / gt)
    diff = gt - pred
    return AccuracyReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE ** 2)),
        delta3=float(np.mean(ratio < DELTA_BASE ** 3)),
        n_pixels=int(gt.size),
    )


def select_pixels(pred, gt, valid=None, cap: float = 150.0, d_min: float = 1e-3,
                  median_scaling: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Valid, optionally median-scaled and clamped samples of one image."""
    pred, gt = _as_numpy(pred), _as_numpy(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = (gt > 0) & np.isfinite(gt)
    if valid is not None:
        mask &= _as_numpy(valid).astype(bool)
    pred, gt = pred[mask], gt[mask]
    if gt.size == 0:
        raise ValueError("no valid pixels to evaluate")
    if median_scaling:
        pred = pred * median_scale(pred, gt)
    return np.clip(pred, d_min, cap), np.clip(gt, d_min, cap)


def compute_accuracy(pred, gt, valid=None, cap: float = 150.0, d_min: float = 1e-3,
                     median_scaling: bool = True) -> AccuracyReport:
    p, g = select_pixels(pred, gt, valid, cap=cap, d_min=d_min, median_scaling=median_scaling)
    return accuracy_from_pixels(p, g)


# -- complexity -------------------------------------------------------------

def count_params(model) -> int:
    """Element count over trainable arrays of a module or a name->array mapping."""
    if isinstance(model, nn.Module):
        return sum(p.numel() for p in model.parameters() if p.requires_grad)
    return int(sum(np.asarray(v).size for v in dict(model).values()))


_ELEMENTWISE = (nn.GELU, nn.ReLU, nn.Sigmoid, nn.Tanh, nn.ELU, nn.LeakyReLU)


def _layer_macs(module: nn.Module, inputs, output) -> int:
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        per_sample = output.numel() // output.shape[0]
        return kh * kw * (module.in_channels // module.groups) * per_sample
    if isinstance(module, nn.Linear):
        rows = output.numel() // output.shape[-1] // output.shape[0]
        return module.in_features * module.out_features * rows
    if isinstance(module, _ELEMENTWISE):
        return output.numel() // output.shape[0]
    if isinstance(module, nn.AdaptiveAvgPool2d):
        return inputs[0].numel() // inputs[0].shape[0]
    return 0


def count_flops(model: nn.Module, input_shape, call=None, convention: str = "mac") -> int:
    """Per-forward arithmetic count at batch 1.

    Convolutions and linear layers count multiply-accumulates (bias adds are
    not counted); activations, pooling, residual adds and attention terms count
    one per element.  ``convention="2mac"`` doubles the total.
    ``call(model, x)`` overrides how the model is invoked.
    """
    shape = tuple(input_shape)
    if any(s is None or int(s) <= 0 for s in shape):
        raise ValueError(f"static input shape required, got {input_shape}")
    if convention not in ("mac", "2mac"):
        raise ValueError(f"unknown FLOPs convention {convention!r}")
    if len(shape) == 3:
        shape = (1,) + shape
    total = 0
    handles = []

    def hook(module, inputs, output):
        nonlocal total
        total += _layer_macs(module, inputs, output)
        extra = getattr(module, "extra_flops", None)
        if extra is not None:
            total += int(extra(inputs[0], output))

    for m in model.modules():
        if len(list(m.children())) == 0 or hasattr(m, "extra_flops"):
            handles.append(m.register_forward_hook(hook))
    try:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        x = torch.zeros(shape, dtype=dtype)
        with torch.no_grad():
            (call or (lambda mdl, inp: mdl(inp)))(model, x)
    finally:
        for h in handles:
            h.remove()
    return total * (2 if convention == "2mac" else 1)


@dataclass
class FpsResult:
    mean: float
    std: float
    runs: list = field(default_factory=list)


def measure_fps(model, input_shape=None, warmup: int = 3, iters: int = 20, repeats: int = 3) -> FpsResult:
    """Wall-clock frames per second at batch 1.

    ``model`` is any callable; when ``input_shape`` is given it is called with a
    zero tensor of that shape, otherwise with no arguments.
    """
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if iters < 10:
        raise ValueError(f"iters must be >= 10, got {iters}")
    args = ()
    if input_shape is not None:
        shape = tuple(input_shape)
        if len(shape) == 3:
            shape = (1,) + shape
        args = (torch.zeros(shape),)
    runs = []
    with torch.no_grad():
        for _ in range(warmup):
            model(*args)
        for _ in range(repeats):
            start = time.perf_counter()
            for _ in range(iters):
                model(*args)
            runs.append(iters / (time.perf_counter() - start))
    std = statistics.stdev(runs) if len(runs) > 1 else 0.0
    return FpsResult(statistics.fmean(runs), std, runs)


def profile_model(model: nn.Module, input_shape, warmup: int = 3, iters: int = 20, repeats: int = 3,
                  convention: str = "mac") -> ComplexityReport:
    was_training = model.training
    model.eval()
    try:
        fps = measure_fps(model, input_shape, warmup, iters, repeats)
        flops = count_flops(model, input_shape, convention=convention)
    finally:
        model.train(was_training)
    return ComplexityReport(
        param_count=count_params(model), flops=flops, fps=fps.mean, fps_std=fps.std,
        input_shape=list(input_shape), warmup=warmup, iters=iters, repeats=repeats,
        flops_convention=convention,
    )
