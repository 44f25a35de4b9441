"""Patch-linear autoencoder and the per-class text embedding table.

The encoder splits an image into non-overlapping ``p x p`` patches, maps each
flattened patch linearly to ``C`` channels and applies ``tanh``; the result is
an ``H x W x C`` latent grid with ``H = h / p``. The decoder is the mirrored
linear map back to patch pixels. After training, latents are standardized per
channel (unit variance over the training set), in the manner of the latent
scale factor used by latent diffusion models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .optim import AdamW
from .params import ParamSet, gaussian, ones, zeros
from .tensor import Tensor


class DimensionError(ValueError):
    pass


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(n, h, w, c) -> (n, (h/p)*(w/p), p*p*c), patches in row-major grid order."""
    n, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch: int, channels: int) -> np.ndarray:
    n = patches.shape[0]
    gh, gw = grid
    x = patches.reshape(n, gh, gw, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gh * patch, gw * patch, channels)


@dataclass
class AutoencoderParams(ParamSet):
    enc_w: Tensor
    enc_b: Tensor
    dec_w: Tensor
    dec_b: Tensor
    lat_mean: Tensor
    lat_std: Tensor
    image_shape: tuple[int, int, int] = (32, 32, 3)
    patch: int = 4

    def trainable(self) -> list[Tensor]:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    @property
    def grid(self) -> tuple[int, int]:
        h, w, _ = self.image_shape
        return (h // self.patch, w // self.patch)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (*self.grid, self.enc_w.shape[1])


def init_autoencoder(image_shape, patch: int, latent_c: int, seed: int = 0, zero: bool = False) -> AutoencoderParams:
    h, w, c = image_shape
    if h % patch or w % patch:
        raise DimensionError(f"image {image_shape} is not tiled by {patch}x{patch} patches")
    pdim = patch * patch * c
    if zero:
        return AutoencoderParams(zeros((pdim, latent_c)), zeros(latent_c), zeros((latent_c, pdim)), zeros(pdim),
                                 zeros(latent_c, False), ones(latent_c, False), tuple(image_shape), patch)
    rng = np.random.default_rng(seed)
    return AutoencoderParams(
        gaussian(rng, (pdim, latent_c), 1.0 / np.sqrt(pdim)), zeros(latent_c),
        gaussian(rng, (latent_c, pdim), 1.0 / np.sqrt(latent_c)), zeros(pdim),
        zeros(latent_c, False), ones(latent_c, False), tuple(image_shape), patch)


def _check_images(images: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3:] != tuple(params.image_shape):
        raise DimensionError(f"image shape {images.shape[-3:]} does not match configured {params.image_shape}")
    return images


def _encode_patches(patches, params: AutoencoderParams) -> Tensor:
    return tn.tanh(tn.linear(patches, params.enc_w, params.enc_b))


def _decode_tokens(tokens, params: AutoencoderParams) -> Tensor:
    return tn.linear(tokens, params.dec_w, params.dec_b)


def encode(image: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Latent grid for one image (h, w, c) or a batch (n, h, w, c)."""
    image = _check_images(image, params)
    single = image.ndim == 3
    batch = image[None] if single else image
    tokens = np.tanh(patchify(batch, params.patch) @ params.enc_w.data + params.enc_b.data)
    tokens = (tokens - params.lat_mean.data) / params.lat_std.data
    latents = tokens.reshape(len(batch), *params.latent_shape)
    return latents[0] if single else latents


def decode(latent: np.ndarray, params: AutoencoderParams) -> np.ndarray:
    """Image-space tensor for one latent (H, W, C) or a batch; values are not clamped."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-3:] != params.latent_shape:
        raise DimensionError(f"latent shape {latent.shape[-3:]} does not match configured {params.latent_shape}")
    single = latent.ndim == 3
    batch = latent[None] if single else latent
    tokens = batch.reshape(len(batch), -1, params.latent_shape[-1]) * params.lat_std.data + params.lat_mean.data
    patches = tokens @ params.dec_w.data + params.dec_b.data
    images = unpatchify(patches, params.grid, params.patch, params.image_shape[-1])
    return images[0] if single else images


def reconstruction_mse(images: np.ndarray, params: AutoencoderParams) -> float:
    return float(np.mean((decode(encode(images, params), params) - images) ** 2))


def train_autoencoder(images: np.ndarray, epochs: int, lr: float, *, patch: int = 4, latent_c: int = 8,
                      batch: int = 64, seed: int = 0,
                      params: AutoencoderParams | None = None) -> tuple[AutoencoderParams, list[float]]:
    """Fit the patch autoencoder by minibatch AdamW on pixel MSE, then standardize its latents.

    Returns the frozen parameters and the per-epoch mean reconstruction loss.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("train_autoencoder: empty dataset")
    if params is None:
        params = init_autoencoder(images.shape[1:], patch, latent_c, seed=seed)
    else:
        params = params.copy()
    _check_images(images[:1], params)
    for t in params.trainable():
        t.requires_grad = True
    # training runs on the raw tanh codes; standardization is refit afterwards
    params.lat_mean, params.lat_std = zeros(params.latent_shape[-1], False), ones(params.latent_shape[-1], False)
    patches = patchify(images, params.patch)
    opt = AdamW.single(params.trainable(), lr=lr)
    rng = np.random.default_rng([seed, 11])
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(patches))
        total, count = 0.0, 0
        for start in range(0, len(order), batch):
            x = patches[order[start:start + batch]]
            recon = _decode_tokens(_encode_patches(x, params), params)
            loss = tn.mean(tn.square(tn.sub(recon, x)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        history.append(total / count)
    params.requires_grad_(False)
    codes = np.tanh(patches @ params.enc_w.data + params.enc_b.data).reshape(-1, params.latent_shape[-1])
    std = codes.std(axis=0)
    params.lat_mean = Tensor(codes.mean(axis=0))
    params.lat_std = Tensor(np.where(std > 1e-8, std, 1.0))
    return params, history


@dataclass
class EmbeddingTable(ParamSet):
    """Learnable class-token table of shape (num_classes, L, C_t)."""

    table: Tensor

    @property
    def num_classes(self) -> int:
        return self.table.shape[0]


def init_embedding_table(num_classes: int, tokens: int, dim: int, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng([seed, 7])
    raw = rng.standard_normal((num_classes, tokens, dim))
    raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
    return EmbeddingTable(Tensor(raw, requires_grad=True))


def embed_class(label: int, table: EmbeddingTable) -> np.ndarray:
    if not 0 <= int(label) < table.num_classes:
        raise IndexError(f"label {label} outside [0, {table.num_classes})")
    return table.table.data[int(label)].copy()


def embed_batch(labels, table: EmbeddingTable) -> Tensor:
    """Differentiable lookup of a (B, L, C_t) block of class embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= table.num_classes):
        raise IndexError(f"labels outside [0, {table.num_classes})")
    return tn.gather_rows(table.table, labels)
