"""Training objectives: latent MSE, class-masked InfoNCE, their weighted sum, and the noise-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2_start: float = 0.05
    lambda2_end: float = 1.0
    lambda2_ramp_epochs: int = 2

    def __post_init__(self):
        if min(self.lambda1, self.lambda2_start, self.lambda2_end) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda2_ramp_epochs <= 0:
            raise ValueError("lambda2_ramp_epochs must be positive")

    def lambda2(self, epoch: float) -> float:
        """Linear ramp from start to end over the ramp epochs, flat afterwards (fractional epochs allowed)."""
        if epoch >= self.lambda2_ramp_epochs:
            return self.lambda2_end
        frac = max(epoch, 0.0) / self.lambda2_ramp_epochs
        return self.lambda2_start + (self.lambda2_end - self.lambda2_start) * frac


def mse_loss(a, b) -> Tensor:
    a, b = tn.as_tensor(a), tn.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    return tn.mean(tn.square(tn.sub(a, b)))


def class_mask(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def similarity_logits(z_proj, e_text, temperature: float = 0.1) -> Tensor:
    """Cosine similarity between every (z_proj_i, e_text_j) pair divided by the temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = tn.l2_normalize(z_proj)
    b = tn.l2_normalize(e_text)
    return tn.scale(a @ tn.transpose(b), 1.0 / temperature)


def info_nce(s, mask) -> Tensor:
    """Mean over rows of -log(sum_j M_ij exp s_ij / sum_j exp s_ij)."""
    s = tn.as_tensor(s)
    mask = np.asarray(mask)
    positive = tn.logsumexp(s, axis=-1, mask=mask > 0)
    return tn.mean(tn.sub(tn.logsumexp(s, axis=-1), positive))


@dataclass
class FusionLossParts:
    total: Tensor
    infonce: Tensor
    mse: Tensor
    lambda2: float


def fusion_loss(z_img, labels, fusion, projector, table, weights: LossWeights, epoch: float,
                temperature: float = 0.1) -> FusionLossParts:
    """Weighted sum of InfoNCE (projected fused latent vs. class text) and latent MSE for one batch."""
    from .encoders import embed_batch
    from .fusion import fuse, project_latent

    z_img = tn.as_tensor(z_img)
    if z_img.shape[0] == 0:
        raise ValueError("fusion_loss: empty batch")
    e_text = embed_batch(labels, table)
    z_fused = fuse(z_img, e_text, fusion)
    z_proj = project_latent(z_fused, projector)
    logits = similarity_logits(z_proj, tn.mean(e_text, axis=1), temperature)
    nce = info_nce(logits, class_mask(labels))
    mse = mse_loss(z_fused, z_img)
    lam2 = weights.lambda2(epoch)
    total = tn.add(tn.scale(nce, weights.lambda1), tn.scale(mse, lam2))
    return FusionLossParts(total, nce, mse, lam2)


def diffusion_loss(denoiser, z0, e_text, t, eps, schedule) -> Tensor:
    """Mean squared error between predicted and true noise at timestep(s) ``t`` (1-based)."""
    from .diffusion import DenoiserParams, forward_noise, predict_noise

    z0 = tn.as_tensor(z0)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    z_t = forward_noise(z0, t, eps, schedule)
    if isinstance(denoiser, DenoiserParams):
        pred = predict_noise(denoiser, z_t, t, e_text)
    else:
        pred = tn.as_tensor(denoiser(z_t, t, e_text))
    return mse_loss(pred, eps)
