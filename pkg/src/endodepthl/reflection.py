"""Luminance-based confidence mask that down-weights specular highlights."""
from __future__ import annotations

import re

import torch

LUMA = (0.299, 0.587, 0.114)
DEFAULT_K = 50.0
DEFAULT_TAU_STRATEGY = "percentile(95)"


def luminance(image: torch.Tensor) -> torch.Tensor:
    """``(B, 3, H, W)`` RGB -> ``(B, 1, H, W)`` luminance."""
    if image.dim() < 3 or image.shape[-3] != 3:
        raise ValueError(f"luminance needs 3 channels, got shape {tuple(image.shape)}")
    r, g, b = image.unbind(-3)
    # integer weights over 1000 keep white at exactly 1.0
    return ((299 * r + 587 * g + 114 * b) / 1000).unsqueeze(-3)


def normalize_intensity(lum: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Min-max normalise each image of a batch to [0, 1].

    Constant images map to all zeros.
    """
    flat = lum.reshape(lum.shape[0], -1) if lum.dim() == 4 else lum.reshape(1, -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span < eps, torch.zeros_like(flat), (flat - lo) / span.clamp_min(eps))
    return out.reshape(lum.shape)


def parse_tau_strategy(strategy: str | float) -> tuple[str, float]:
    """``"percentile(q)"`` / ``"fixed(v)"`` / bare number -> (kind, value)."""
    if isinstance(strategy, (int, float)):
        kind, value = "fixed", float(strategy)
    else:
        m = re.fullmatch(r"\s*(percentile|fixed)\s*\(\s*([-+0-9.eE]+)\s*\)\s*", strategy)
        if m is None:
            raise ValueError(f"unknown tau strategy {strategy!r}; use percentile(q) or fixed(v)")
        kind, value = m.group(1), float(m.group(2))
    if kind == "percentile" and not 0 <= value <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {value}")
    if kind == "fixed" and not 0 <= value <= 1:
        raise ValueError(f"fixed tau must be in [0, 1], got {value}")
    return kind, value


def estimate_tau(norm_lum: torch.Tensor, strategy: str | float = DEFAULT_TAU_STRATEGY) -> torch.Tensor:
    """Per-image threshold, shape ``(B, 1, 1, 1)`` for batched input."""
    kind, value = parse_tau_strategy(strategy)
    batch = norm_lum.shape[0] if norm_lum.dim() == 4 else 1
    if norm_lum.numel() == 0:
        raise ValueError("cannot estimate tau on an empty map")
    if kind == "fixed":
        tau = torch.full((batch,), value, dtype=norm_lum.dtype, device=norm_lum.device)
    else:
        # linear interpolation between order statistics
        tau = torch.quantile(norm_lum.reshape(batch, -1), value / 100.0, dim=1)
    tau = tau.clamp(0.0, 1.0)
    return tau.view(batch, 1, 1, 1) if norm_lum.dim() == 4 else tau.reshape(())


def reflection_mask(norm_lum: torch.Tensor, tau, k: float = DEFAULT_K) -> torch.Tensor:
    """Logistic gate ``1 / (1 + exp(-k (tau - L_n)))``."""
    if k <= 0:
        raise ValueError(f"steepness k must be positive, got {k}")
    tau = torch.as_tensor(tau, dtype=norm_lum.dtype, device=norm_lum.device)
    return torch.sigmoid(k * (tau - norm_lum))


def apply_mask(err: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if err.shape != mask.shape:
        raise ValueError(f"error map {tuple(err.shape)} and mask {tuple(mask.shape)} differ")
    return err * mask


def confidence_mask(image: torch.Tensor, tau_strategy: str | float = DEFAULT_TAU_STRATEGY,
                    k: float = DEFAULT_K) -> torch.Tensor:
    """Full pipeline on a target batch; the result carries no gradient."""
    with torch.no_grad():
        ln = normalize_intensity(luminance(image))
        return reflection_mask(ln, estimate_tau(ln, tau_strategy), k)
