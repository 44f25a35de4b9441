"""Early vision-language fusion: image-query cross-attention over class tokens.

Shapes (batched): visual latent ``(B, H, W, C)``, text tokens ``(B, L, C_t)``.
Both are projected to width ``d``; image tokens attend to text tokens; a
residual + LayerNorm merges the result; a pre-norm FFN residual and a linear
``d -> C`` map restore the latent grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .params import ParamSet, gaussian, ones, zeros
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


class FusionConfigError(ValueError):
    pass


@dataclass
class FusionParams(ParamSet):
    phi_img_w: Tensor
    phi_img_b: Tensor
    phi_text_w: Tensor
    phi_text_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    psi_w: Tensor
    psi_b: Tensor
    num_heads: int = 4

    def __post_init__(self):
        if self.d % self.num_heads:
            raise FusionConfigError(f"d={self.d} not divisible by num_heads={self.num_heads}")

    @property
    def d(self) -> int:
        return self.phi_img_w.shape[1]

    @property
    def latent_c(self) -> int:
        return self.phi_img_w.shape[0]

    @property
    def text_dim(self) -> int:
        return self.phi_text_w.shape[0]


@dataclass
class ProjectorParams(ParamSet):
    w: Tensor
    b: Tensor


def init_fusion(latent_c: int, text_dim: int, d: int = 64, num_heads: int = 4, seed: int = 0,
                latent_scale: float = 1.0) -> FusionParams:
    """Seeded N(0, 0.02^2) weights, zero biases; the restore map uses std ``latent_scale / sqrt(d)``
    so that the initial fused latent has roughly the scale of the visual latent."""
    if d % num_heads:
        raise FusionConfigError(f"d={d} not divisible by num_heads={num_heads}")
    rng = np.random.default_rng([seed, 3])
    return FusionParams(
        phi_img_w=gaussian(rng, (latent_c, d), INIT_STD), phi_img_b=zeros(d),
        phi_text_w=gaussian(rng, (text_dim, d), INIT_STD), phi_text_b=zeros(d),
        w_q=gaussian(rng, (d, d), INIT_STD), w_k=gaussian(rng, (d, d), INIT_STD),
        w_v=gaussian(rng, (d, d), INIT_STD),
        ln_gamma=ones(d), ln_beta=zeros(d), ln2_gamma=ones(d), ln2_beta=zeros(d),
        ffn_w1=gaussian(rng, (d, 4 * d), INIT_STD), ffn_b1=zeros(4 * d),
        ffn_w2=gaussian(rng, (4 * d, d), INIT_STD), ffn_b2=zeros(d),
        psi_w=gaussian(rng, (d, latent_c), latent_scale / np.sqrt(d)), psi_b=zeros(latent_c),
        num_heads=num_heads,
    )


def init_projector(latent_c: int, text_dim: int, seed: int = 0) -> ProjectorParams:
    rng = np.random.default_rng([seed, 5])
    return ProjectorParams(gaussian(rng, (latent_c, text_dim), INIT_STD), zeros(text_dim))


def _batched(z_img, e_text) -> tuple[Tensor, Tensor, bool]:
    z_img, e_text = tn.as_tensor(z_img), tn.as_tensor(e_text)
    single = z_img.ndim == 3
    if single:
        z_img = z_img.reshape((1, *z_img.shape))
        e_text = e_text.reshape((1, *e_text.shape))
    if z_img.ndim != 4 or e_text.ndim != 3 or z_img.shape[0] != e_text.shape[0]:
        raise ShapeError(f"expected latents (B,H,W,C) and text (B,L,C_t), got {z_img.shape} and {e_text.shape}")
    return z_img, e_text, single


def project_tokens(z_img, e_text, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Flatten the grid to N = H*W tokens and map both modalities to width d."""
    z_img, e_text, single = _batched(z_img, e_text)
    b, h, w, c = z_img.shape
    if c != params.latent_c or e_text.shape[-1] != params.text_dim:
        raise ShapeError(f"channels C={c}, C_t={e_text.shape[-1]} do not match params "
                         f"({params.latent_c}, {params.text_dim})")
    z_tok = tn.linear(z_img.reshape(b, h * w, c), params.phi_img_w, params.phi_img_b)
    e_tok = tn.linear(e_text, params.phi_text_w, params.phi_text_b)
    if single:
        return z_tok.reshape(z_tok.shape[1:]), e_tok.reshape(e_tok.shape[1:])
    return z_tok, e_tok


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return tn.transpose(x.reshape(b, n, heads, d // heads), (0, 2, 1, 3))


def cross_attention(z_tok, e_tok, params: FusionParams) -> Tensor:
    """Multi-head attention with image tokens as queries and text tokens as keys/values."""
    z_tok, e_tok = tn.as_tensor(z_tok), tn.as_tensor(e_tok)
    single = z_tok.ndim == 2
    if single:
        z_tok, e_tok = z_tok.reshape((1, *z_tok.shape)), e_tok.reshape((1, *e_tok.shape))
    d = params.d
    if z_tok.shape[-1] != d or e_tok.shape[-1] != d:
        raise ShapeError(f"token widths {z_tok.shape[-1]}, {e_tok.shape[-1]} do not match d={d}")
    heads = params.num_heads
    q = _split_heads(z_tok @ params.w_q, heads)
    k = _split_heads(e_tok @ params.w_k, heads)
    v = _split_heads(e_tok @ params.w_v, heads)
    attn = tn.softmax_rows(tn.scale(q @ tn.transpose(k), 1.0 / np.sqrt(d // heads)))
    out = tn.transpose(attn @ v, (0, 2, 1, 3))
    b, n = z_tok.shape[:2]
    out = out.reshape(b, n, d)
    return out.reshape(n, d) if single else out


def fuse(z_img, e_text, params: FusionParams) -> Tensor:
    """Fused latent with the same (B, H, W, C) shape as ``z_img``."""
    z_img, e_text, single = _batched(z_img, e_text)
    b, h, w, c = z_img.shape
    z_tok, e_tok = project_tokens(z_img, e_text, params)
    u = tn.layer_norm(z_tok + cross_attention(z_tok, e_tok, params), params.ln_gamma, params.ln_beta)
    hidden = tn.relu(tn.linear(tn.layer_norm(u, params.ln2_gamma, params.ln2_beta), params.ffn_w1, params.ffn_b1))
    u = u + tn.linear(hidden, params.ffn_w2, params.ffn_b2)
    out = tn.linear(u, params.psi_w, params.psi_b).reshape(b, h, w, c)
    return out.reshape(h, w, c) if single else out


def project_latent(z_fused, proj: ProjectorParams) -> Tensor:
    """Mean-pool the grid, map C -> C_t and L2-normalize (eps-safe)."""
    z_fused = tn.as_tensor(z_fused)
    single = z_fused.ndim == 3
    if single:
        z_fused = z_fused.reshape((1, *z_fused.shape))
    if z_fused.shape[-1] != proj.w.shape[0]:
        raise ShapeError(f"fused channels {z_fused.shape[-1]} do not match projector input {proj.w.shape[0]}")
    pooled = tn.mean(z_fused, axis=(1, 2))
    out = tn.l2_normalize(tn.linear(pooled, proj.w, proj.b))
    return out.reshape(out.shape[1:]) if single else out
