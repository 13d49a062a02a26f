"""Self-supervised photometric loss stack."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

SSIM_ALPHA = 0.85


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def ssim_dissimilarity(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``(1 - SSIM) / 2`` over 3x3 windows with reflection padding."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    y = F.pad(y, (1, 1, 1, 1), mode="reflect")
    mu_x = F.avg_pool2d(x, 3, 1)
    mu_y = F.avg_pool2d(y, 3, 1)
    sigma_x = F.avg_pool2d(x * x, 3, 1) - mu_x ** 2
    sigma_y = F.avg_pool2d(y * y, 3, 1) - mu_y ** 2
    sigma_xy = F.avg_pool2d(x * y, 3, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return torch.clamp((1 - num / den) / 2, 0, 1)


def photometric_error(target: torch.Tensor, warped: torch.Tensor, validity: torch.Tensor | None = None,
                      ssim_alpha: float | None = None) -> torch.Tensor:
    """Per-pixel error map ``(B, 1, H, W)``.

    Channel-mean absolute difference by default.  With ``ssim_alpha`` set the
    map is ``alpha * (1 - SSIM) / 2 + (1 - alpha) * L1``.  Invalid pixels are 0.
    """
    _check_same(target, warped, "photometric_error")
    err = (target - warped).abs().mean(dim=1, keepdim=True)
    if ssim_alpha is not None:
        ssim = ssim_dissimilarity(target, warped).mean(dim=1, keepdim=True)
        err = ssim_alpha * ssim + (1 - ssim_alpha) * err
    if validity is not None:
        err = err * validity.to(err.dtype)
    return err


def min_reprojection(err_prev: torch.Tensor, err_next: torch.Tensor,
                     valid_prev: torch.Tensor | None = None,
                     valid_next: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel minimum over the two source reconstructions.

    When validities are given, a source that is invalid at a pixel does not
    take part in the minimum there; pixels invalid in both get 0.
    """
    _check_same(err_prev, err_next, "min_reprojection")
    if valid_prev is None and valid_next is None:
        return torch.minimum(err_prev, err_next)
    if valid_prev is None:
        valid_prev = torch.ones_like(err_prev, dtype=torch.bool)
    if valid_next is None:
        valid_next = torch.ones_like(err_next, dtype=torch.bool)
    inf = torch.full_like(err_prev, float("inf"))
    both = torch.minimum(torch.where(valid_prev, err_prev, inf), torch.where(valid_next, err_next, inf))
    return torch.where(valid_prev | valid_next, both, torch.zeros_like(both))


def auto_mask(target: torch.Tensor, source_prev: torch.Tensor, source_next: torch.Tensor,
              warped_min_err: torch.Tensor, ssim_alpha: float | None = None,
              tie_noise: float = 0.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """1 where warping beats leaving the sources unwarped, else 0.

    With ``tie_noise > 0`` Gaussian noise of that scale is added to the
    unwarped error.  An exact identity warp otherwise ties everywhere, zeroing
    the mask and with it every photometric gradient.
    """
    _check_same(target, source_prev, "auto_mask")
    _check_same(target, source_next, "auto_mask")
    identity = torch.minimum(photometric_error(target, source_prev, ssim_alpha=ssim_alpha),
                             photometric_error(target, source_next, ssim_alpha=ssim_alpha))
    _check_same(identity, warped_min_err, "auto_mask")
    if tie_noise:
        noise = torch.randn(identity.shape, generator=generator, dtype=identity.dtype)
        identity = identity + tie_noise * noise.to(identity.device)
    return (warped_min_err < identity).to(warped_min_err.dtype)


def masked_photometric_loss(err: torch.Tensor, mu: torch.Tensor, confidence: torch.Tensor | None = None,
                            validity: torch.Tensor | None = None,
                            eps: float = 1e-7) -> tuple[torch.Tensor, bool]:
    """Weighted mean of ``err`` under ``mu * confidence * validity``.

    Returns ``(loss, degenerate)``; ``degenerate`` is True when the total
    weight is zero, in which case the loss is 0.
    """
    _check_same(err, mu, "masked_photometric_loss")
    weight = mu.to(err.dtype)
    if confidence is not None:
        _check_same(err, confidence, "masked_photometric_loss")
        weight = weight * confidence
    if validity is not None:
        weight = weight * validity.to(err.dtype)
    total = weight.sum()
    if float(total) <= 0:
        return (err * weight).sum(), True
    return (err * weight).sum() / total.clamp_min(eps), False


def smoothness_loss(disp: torch.Tensor, image: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Edge-aware first-order smoothness on mean-normalised disparity."""
    if disp.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"disparity {tuple(disp.shape[-2:])} and image {tuple(image.shape[-2:])} differ")
    mean = disp.mean(dim=(2, 3), keepdim=True)
    if float(mean.detach().min()) < eps:
        raise ValueError("degenerate disparity: mean is (near) zero")
    d = disp / mean
    grad_dx = (d[:, :, :, :-1] - d[:, :, :, 1:]).abs()
    grad_dy = (d[:, :, :-1, :] - d[:, :, 1:, :]).abs()
    img_dx = (image[:, :, :, :-1] - image[:, :, :, 1:]).abs().mean(1, keepdim=True)
    img_dy = (image[:, :, :-1, :] - image[:, :, 1:, :]).abs().mean(1, keepdim=True)
    # normalised by pixel count, not by the number of difference terms
    n = disp.shape[0] * disp.shape[1] * disp.shape[2] * disp.shape[3]
    return ((grad_dx * torch.exp(-img_dx)).sum() + (grad_dy * torch.exp(-img_dy)).sum()) / n


@dataclass
class LossBreakdown:
    total: torch.Tensor
    photometric: torch.Tensor
    smoothness: torch.Tensor
    smoothness_weight: float
    per_scale_photometric: list = field(default_factory=list)
    per_scale_smoothness: list = field(default_factory=list)


def total_loss(per_scale_photometric, per_scale_smoothness, smoothness_weight: float = 1e-3) -> LossBreakdown:
    if len(per_scale_photometric) == 0:
        raise ValueError("need at least one scale")
    if len(per_scale_photometric) != len(per_scale_smoothness):
        raise ValueError(f"{len(per_scale_photometric)} photometric terms vs "
                         f"{len(per_scale_smoothness)} smoothness terms")
    photometric = torch.stack([torch.as_tensor(p) for p in per_scale_photometric]).mean()
    smoothness = torch.stack([torch.as_tensor(s) for s in per_scale_smoothness]).mean()
    return LossBreakdown(
        total=photometric + smoothness_weight * smoothness,
        photometric=photometric,
        smoothness=smoothness,
        smoothness_weight=smoothness_weight,
        per_scale_photometric=list(per_scale_photometric),
        per_scale_smoothness=list(per_scale_smoothness),
    )
