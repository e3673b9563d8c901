"""Training objectives: DNMI, L1, content alignment, LSGAN terms and their totals."""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor

ENTROPY_FLOOR = 1e-10


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    gamma: float = 1.0
    lambda_adv: float = 0.01
    lambda_smooth: float = 0.2

    def __post_init__(self):
        for name in ("alpha", "gamma", "lambda_adv", "lambda_smooth"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0 or self.lambda_adv < 0 or self.lambda_smooth < 0:
            raise ValueError("gamma, lambda_adv and lambda_smooth must be >= 0")


@dataclass(frozen=True)
class DnmiConfig:
    """Soft-histogram settings. ``sigma`` is the Parzen kernel width in bins."""

    bins: int = 16
    sigma: float = 0.3
    value_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        lo, hi = self.value_range
        if not hi > lo:
            raise ValueError(f"degenerate value range {self.value_range}")


def _entropy(p: Tensor, axis) -> Tensor:
    return -(p * ad.log(p + ENTROPY_FLOOR)).sum(axis=axis)


def dnmi_per_image(a: Tensor, b: Tensor, cfg: DnmiConfig) -> Tensor:
    """(H(A) + H(B)) / H(A, B) from Parzen soft histograms, one value per batch item."""
    if a.shape != b.shape:
        raise ValueError(f"dnmi: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ValueError("dnmi: empty image")
    n = a.shape[0]
    pixels = a.size // n
    lo, hi = cfg.value_range
    scale = 1.0 / (hi - lo)

    def unit(t: Tensor) -> Tensor:
        return ad.clamp((t - lo) * scale, 0.0, 1.0).reshape(n, pixels)

    joint = ad.soft_joint_histogram(unit(a), unit(b), cfg.bins, cfg.sigma)
    h_a = _entropy(joint.sum(axis=2), axis=1)
    h_b = _entropy(joint.sum(axis=1), axis=1)
    h_ab = _entropy(joint, axis=(1, 2))
    return (h_a + h_b) / h_ab


def dnmi(a: Tensor, b: Tensor, cfg: DnmiConfig = DnmiConfig()) -> Tensor:
    """Batch mean of the per-image differentiable NMI."""
    return dnmi_per_image(a, b, cfg).mean()


def dnmi_loss(a: Tensor, b: Tensor, cfg: DnmiConfig = DnmiConfig()) -> Tensor:
    return -dnmi(a, b, cfg)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return (pred - target).abs().mean()


def content_alignment_loss(y_trans: Tensor, y_warp: Tensor, y: Tensor, w: LossWeights,
                           cfg_warp: DnmiConfig, cfg_cross: DnmiConfig) -> Tensor:
    return content_alignment_terms(y_trans, y_warp, y, w, cfg_warp, cfg_cross)["align"]


def content_alignment_terms(y_trans, y_warp, y, w: LossWeights, cfg_warp, cfg_cross) -> dict:
    """Constituents of the alignment loss plus their weighted sum under ``"align"``."""
    l1 = l1_loss(y_trans, y)
    warp_term = dnmi_loss(y_warp, y, cfg_warp)
    cross_term = dnmi_loss(y_trans, y_warp, cfg_cross)
    a = w.alpha
    align = l1 * a + warp_term * (1 - a) + cross_term * (min(a, 1 - a) * w.gamma)
    return {"l1_trans": l1, "dnmi_warp": warp_term, "dnmi_cross": cross_term, "align": align}


def adv_g_loss(d_out: Tensor) -> Tensor:
    return (d_out - 1.0).square().mean()


def adv_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    return ((d_real - 1.0).square().mean() + d_fake.square().mean()) * 0.5


def generator_coefficients(w: LossWeights) -> dict:
    """Weight of every generator-loss constituent in the total."""
    a = w.alpha
    return {
        "l1_trans": a,
        "dnmi_warp": 1 - a,
        "dnmi_cross": min(a, 1 - a) * w.gamma,
        "adv_g_trans": w.lambda_adv * a,
        "adv_g_warp": w.lambda_adv * (1 - a),
        "smooth": (1 - a) * w.lambda_smooth,
    }


def discriminator_coefficients(w: LossWeights) -> dict:
    return {"adv_d_trans": w.lambda_adv * w.alpha, "adv_d_warp": w.lambda_adv * (1 - w.alpha)}


def total_generator_loss(align: Tensor, adv_trans: Tensor, adv_warp: Tensor, smooth: Tensor,
                         w: LossWeights) -> Tensor:
    a = w.alpha
    return (align + (adv_trans * a + adv_warp * (1 - a)) * w.lambda_adv
            + smooth * ((1 - a) * w.lambda_smooth))


def total_discriminator_loss(adv_trans: Tensor, adv_warp: Tensor, w: LossWeights) -> Tensor:
    a = w.alpha
    return (adv_trans * a + adv_warp * (1 - a)) * w.lambda_adv
