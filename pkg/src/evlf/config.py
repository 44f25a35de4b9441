"""Run configuration and its flat ``key=value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "blobs"
    data_dir: str = ""
    classes: str = ""
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 200
    blob_contrast: float = 0.05
    image_h: int = 32
    image_w: int = 32
    image_c: int = 3
    ipc: int = 10
    patch: int = 4
    latent_h: int = 8
    latent_w: int = 8
    latent_c: int = 8
    # fusion
    d: int = 64
    heads: int = 4
    text_tokens: int = 4
    text_dim: int = 32
    use_ca: bool = True
    freeze_text: bool = False
    # fusion training
    lambda1: float = 0.1
    lambda2_start: float = 0.05
    lambda2_end: float = 1.0
    lambda2_ramp_epochs: int = 2
    lr_ca: float = 3e-4
    lr_proj: float = 1e-4
    weight_decay: float = 1e-2
    batch: int = 16
    epochs_ca: int = 4
    temperature: float = 0.1
    # autoencoder
    ae_epochs: int = 20
    ae_lr: float = 1e-2
    ae_batch: int = 64
    # diffusion
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    t_start: int = 50
    den_width: int = 256
    den_time_dim: int = 32
    den_cond_dim: int = 32
    den_pretrain_steps: int = 3000
    den_finetune_steps: int = 1000
    den_lr: float = 1e-3
    den_batch: int = 64
    synthesis_mode: str = "diffuse"
    finetune_denoiser: bool = True
    # clustering
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    kmeans_n_init: int = 10
    # evaluation
    clf_epochs: int = 100
    clf_lr: float = 1e-3
    clf_width: int = 128
    clf_batch: int = 32
    num_seeds: int = 3
    coverage_k: int = 20
    coverage_space: str = "pixel"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1")
        for name in ("num_classes", "train_per_class", "test_per_class", "image_h", "image_w", "image_c",
                     "patch", "latent_h", "latent_w", "latent_c", "d", "heads", "text_tokens", "text_dim",
                     "batch", "epochs_ca", "T", "lambda2_ramp_epochs", "num_seeds", "kmeans_n_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.latent_h * self.patch != self.image_h or self.latent_w * self.patch != self.image_w:
            raise ConfigError("latent grid times patch size must equal the image size")
        if not 0 <= self.t_start <= self.T:
            raise ConfigError(f"t_start must lie in [0, T={self.T}]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.synthesis_mode not in ("decode", "diffuse"):
            raise ConfigError(f"unknown synthesis_mode {self.synthesis_mode!r}")
        if self.coverage_space not in ("pixel", "latent"):
            raise ConfigError(f"unknown coverage_space {self.coverage_space!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2_start, self.lambda2_end, self.lambda2_ramp_epochs)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.image_c)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_h, self.latent_w, self.latent_c)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).with_overrides(parse_pairs(text))

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, types[key])
        return dataclasses.replace(self, **changes)


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw
