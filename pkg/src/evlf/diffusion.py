"""DDPM over latent grids: linear-beta schedule, closed-form noising, MLP noise predictor, ancestral sampler.

Timesteps are 1-based (``1 <= t <= T``); ``alpha_bar[t - 1]`` is the cumulative
signal fraction at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .optim import AdamW
from .params import ParamSet, gaussian, zeros
from .tensor import ShapeError, Tensor


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ScheduleError(f"timestep outside [1, {self.T}]: {t.min()}..{t.max()}")
        return t


def make_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1 or not (0 < beta_min <= beta_max < 1):
        raise ScheduleError(f"invalid schedule T={T}, beta in [{beta_min}, {beta_max}]")
    beta = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    return NoiseSchedule(beta, np.cumprod(1.0 - beta))


def schedule_from_alpha_bar(alpha_bar) -> NoiseSchedule:
    """Schedule with prescribed cumulative products (betas recovered by ratios)."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(prev > 0, 1.0 - alpha_bar / np.where(prev > 0, prev, 1.0), 1.0)
    return NoiseSchedule(beta, alpha_bar)


def _coef(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    c = values[t - 1]
    return c if c.ndim == 0 else c.reshape(c.shape + (1,) * (ndim - c.ndim))


def forward_noise(z0, t, eps, schedule: NoiseSchedule):
    """sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; ``t`` may be a scalar or one step per sample."""
    t = schedule.check_t(t)
    eps = np.asarray(eps, dtype=np.float64)
    ndim = eps.ndim
    a = _coef(np.sqrt(schedule.alpha_bar), t, ndim)
    s = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, ndim)
    if isinstance(z0, Tensor):
        return tn.add(tn.mul(z0, a), s * eps)
    return a * np.asarray(z0, dtype=np.float64) + s * eps


@dataclass
class DenoiserParams(ParamSet):
    time_emb: Tensor
    cond_w: Tensor
    cond_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    latent_shape: tuple[int, ...] = (8, 8, 8)

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape))


def _sinusoid_table(T: int, dim: int) -> np.ndarray:
    pos = np.arange(1, T + 1)[:, None] / T
    freqs = np.exp(np.linspace(0.0, np.log(100.0), dim // 2))[None, :]
    table = np.zeros((T, dim))
    table[:, 0:2 * (dim // 2):2] = np.sin(pos * freqs)
    table[:, 1:2 * (dim // 2):2] = np.cos(pos * freqs)
    return table


def init_denoiser(latent_shape, T: int, text_dim: int, width: int = 256, time_dim: int = 32,
                  cond_dim: int = 32, seed: int = 0, zero: bool = False) -> DenoiserParams:
    latent_shape = tuple(int(s) for s in latent_shape)
    D = int(np.prod(latent_shape))
    fan_in = D + time_dim + cond_dim
    if zero:
        return DenoiserParams(zeros((T, time_dim)), zeros((text_dim, cond_dim)), zeros(cond_dim),
                              zeros((fan_in, width)), zeros(width), zeros((width, width)), zeros(width),
                              zeros((width, D)), zeros(D), latent_shape)
    rng = np.random.default_rng([seed, 13])
    return DenoiserParams(
        time_emb=Tensor(_sinusoid_table(T, time_dim), requires_grad=True),
        cond_w=gaussian(rng, (text_dim, cond_dim), 1.0 / np.sqrt(text_dim)), cond_b=zeros(cond_dim),
        w1=gaussian(rng, (fan_in, width), np.sqrt(2.0 / fan_in)), b1=zeros(width),
        w2=gaussian(rng, (width, width), np.sqrt(2.0 / width)), b2=zeros(width),
        w3=gaussian(rng, (width, D), 0.1 / np.sqrt(width)), b3=zeros(D),
        latent_shape=latent_shape,
    )


def predict_noise(params: DenoiserParams, z_t, t, e_text=None) -> Tensor:
    """Noise estimate with the shape of ``z_t`` (batched ``(B, *latent_shape)`` or a single latent)."""
    z_t = tn.as_tensor(z_t)
    single = z_t.shape == params.latent_shape
    if single:
        z_t = z_t.reshape((1, *z_t.shape))
    if z_t.shape[1:] != params.latent_shape:
        raise ShapeError(f"latent shape {z_t.shape[1:]} does not match denoiser {params.latent_shape}")
    b = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if t.min() < 1 or t.max() > params.time_emb.shape[0]:
        raise ShapeError(f"timestep outside [1, {params.time_emb.shape[0]}]")
    temb = tn.gather_rows(params.time_emb, t - 1)
    if e_text is None:
        cond = Tensor(np.zeros((b, params.cond_w.shape[1])))
    else:
        e_text = tn.as_tensor(e_text)
        if e_text.ndim == 2:
            e_text = Tensor(np.broadcast_to(e_text.data, (b, *e_text.shape)).copy())
        if e_text.shape[0] != b:
            raise ShapeError(f"{e_text.shape[0]} text blocks for a batch of {b} latents")
        cond = tn.linear(tn.mean(e_text, axis=1), params.cond_w, params.cond_b)
    x = tn.concat([z_t.reshape(b, params.latent_dim), temb, cond], axis=-1)
    h = tn.relu(tn.linear(x, params.w1, params.b1))
    h = tn.relu(tn.linear(h, params.w2, params.b2))
    out = tn.linear(h, params.w3, params.b3).reshape((b, *params.latent_shape))
    return out.reshape(params.latent_shape) if single else out


def train_denoiser(latents: np.ndarray, cond: np.ndarray | None, steps: int, lr: float, seed: int,
                   schedule: NoiseSchedule, *, batch: int = 64, params: DenoiserParams | None = None,
                   text_dim: int | None = None, width: int = 256, time_dim: int = 32, cond_dim: int = 32,
                   weight_decay: float = 0.0) -> tuple[DenoiserParams, list[float]]:
    """Minimize the noise-prediction loss on ``latents`` (optionally starting from ``params``, i.e. fine-tuning).

    ``cond`` holds one (L, C_t) text block per latent, or is None for unconditional training.
    Returns the trained parameters and the per-step loss.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) == 0:
        raise ValueError("train_denoiser: empty latent set")
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if len(cond) != len(latents):
            raise ShapeError("one conditioning block per latent is required")
    if params is None:
        tdim = text_dim if text_dim is not None else (cond.shape[-1] if cond is not None else 1)
        params = init_denoiser(latents.shape[1:], schedule.T, tdim, width, time_dim, cond_dim, seed=seed)
    else:
        params = params.copy()
    params.requires_grad_(True)
    opt = AdamW.single(params.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 17])
    from .losses import diffusion_loss

    history = []
    for _ in range(steps):
        idx = rng.integers(0, len(latents), size=min(batch, len(latents)))
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal((len(idx), *latents.shape[1:]))
        e = None if cond is None else cond[idx]
        loss = diffusion_loss(params, latents[idx], e, t, eps, schedule)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return params.requires_grad_(False), history


def _predict(denoiser, z, t, e_text) -> np.ndarray:
    if isinstance(denoiser, DenoiserParams):
        return predict_noise(denoiser, z, t, e_text).data
    return np.asarray(tn.as_tensor(denoiser(z, t, e_text)).data)


def sample(denoiser, e_text, schedule: NoiseSchedule, num_steps: int, seed, init: np.ndarray | None = None,
           *, shape: tuple[int, ...] | None = None, deterministic: bool = False) -> np.ndarray:
    """Ancestral DDPM reverse chain from step ``num_steps`` down to 1.

    With ``init`` the chain starts from ``init`` noised to ``num_steps``; otherwise from
    standard normal noise of ``shape``. ``deterministic`` drops the noise injected by each reverse step.
    """
    if num_steps > schedule.T or num_steps < 0:
        raise ScheduleError(f"num_steps={num_steps} outside [0, T={schedule.T}]")
    rng = np.random.default_rng(seed)
    if init is not None:
        z = np.array(init, dtype=np.float64)
        if num_steps == 0:
            return z
        z = forward_noise(z, num_steps, rng.standard_normal(z.shape), schedule)
    else:
        if shape is None:
            raise ValueError("sample needs either init or shape")
        z = rng.standard_normal(shape)
    batch = z.shape[0] if z.ndim > 1 else 1
    for t in range(num_steps, 0, -1):
        beta = schedule.beta[t - 1]
        eps_hat = _predict(denoiser, z, np.full(batch, t), e_text)
        z = (z - beta / np.sqrt(1.0 - schedule.alpha_bar[t - 1]) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1 and not deterministic:
            z = z + np.sqrt(beta) * rng.standard_normal(z.shape)
    return z
