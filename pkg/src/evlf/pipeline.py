"""End-to-end distillation: fusion training, denoiser fine-tuning, per-class prototypes, synthesis, ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import encoders
from .config import RunConfig
from .diffusion import DenoiserParams, make_schedule, sample, train_denoiser
from .encoders import AutoencoderParams, EmbeddingTable, embed_batch, init_embedding_table
from .evaluation import evaluate, train_classifier
from .fusion import FusionParams, ProjectorParams, fuse, init_fusion, init_projector
from .io import LabeledDataset
from .losses import fusion_loss
from .optim import AdamW, ParamGroup

log = logging.getLogger(__name__)

VARIANTS = (("-CA-FT", False, False), ("-CA+FT", False, True), ("+CA-FT", True, False), ("+CA+FT", True, True))


class MissingStageError(RuntimeError):
    pass


@dataclass
class FusionModules:
    fusion: FusionParams
    projector: ProjectorParams
    table: EmbeddingTable

    def checksum(self) -> tuple[int, int, int]:
        return (self.fusion.checksum(), self.projector.checksum(), self.table.checksum())

    def copy(self) -> "FusionModules":
        return FusionModules(self.fusion.copy(), self.projector.copy(), self.table.copy())


@dataclass
class FusionTrainResult:
    modules: FusionModules
    steps: list[dict] = field(default_factory=list)

    def epoch_means(self, key: str = "total") -> list[float]:
        epochs = sorted({row["epoch_index"] for row in self.steps})
        return [float(np.mean([r[key] for r in self.steps if r["epoch_index"] == e])) for e in epochs]


def init_fusion_modules(config: RunConfig, latent_scale: float = 1.0) -> FusionModules:
    return FusionModules(
        init_fusion(config.latent_c, config.text_dim, config.d, config.heads, config.seed, latent_scale),
        init_projector(config.latent_c, config.text_dim, config.seed),
        init_embedding_table(config.num_classes, config.text_tokens, config.text_dim, config.seed),
    )


def make_fusion_optimizer(modules: FusionModules, config: RunConfig) -> AdamW:
    ca = modules.fusion.parameters() + ([] if config.freeze_text else modules.table.parameters())
    return AdamW([ParamGroup(ca, config.lr_ca, config.weight_decay),
                  ParamGroup(modules.projector.parameters(), config.lr_proj, config.weight_decay)])


def fusion_step(modules: FusionModules, opt: AdamW, z_img: np.ndarray, labels: np.ndarray,
                config: RunConfig, epoch: float):
    """One fusion-training update on a batch of visual latents; returns the loss parts."""
    parts = fusion_loss(z_img, labels, modules.fusion, modules.projector, modules.table,
                        config.loss_weights, epoch, config.temperature)
    opt.zero_grad()
    parts.total.backward()
    opt.step()
    return parts


def train_fusion(latents: np.ndarray, labels: np.ndarray, config: RunConfig,
                 modules: FusionModules | None = None) -> FusionTrainResult:
    """Train the cross-attention module, projector and text table on frozen visual latents."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(latents) == 0:
        raise ValueError("train_fusion: empty dataset")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ValueError(f"labels must lie in [0, {config.num_classes})")
    if modules is None:
        modules = init_fusion_modules(config, latent_scale=float(latents.std()))
    modules.fusion.requires_grad_(True)
    modules.projector.requires_grad_(True)
    modules.table.requires_grad_(not config.freeze_text)
    opt = make_fusion_optimizer(modules, config)
    shuffle = np.random.default_rng([config.seed, 1])
    result = FusionTrainResult(modules)
    n_batches = -(-len(latents) // config.batch)
    step = 0
    for epoch in range(config.epochs_ca):
        order = shuffle.permutation(len(latents))
        for b in range(n_batches):
            idx = order[b * config.batch:(b + 1) * config.batch]
            frac_epoch = epoch + b / n_batches
            parts = fusion_step(modules, opt, latents[idx], labels[idx], config, frac_epoch)
            result.steps.append({"step": step, "epoch": frac_epoch, "epoch_index": epoch,
                                 "total": parts.total.item(), "infonce": parts.infonce.item(),
                                 "mse": parts.mse.item(), "lambda2": parts.lambda2})
            step += 1
        log.info("fusion epoch %d: mean total %.5f", epoch, result.epoch_means()[-1])
    modules.fusion.requires_grad_(False)
    modules.projector.requires_grad_(False)
    modules.table.requires_grad_(False)
    return result


def fuse_latents(latents: np.ndarray, labels: np.ndarray, modules: FusionModules, batch: int = 256) -> np.ndarray:
    out = np.empty_like(np.asarray(latents, dtype=np.float64))
    for start in range(0, len(latents), batch):
        sl = slice(start, start + batch)
        out[sl] = fuse(latents[sl], embed_batch(labels[sl], modules.table), modules.fusion).data
    return out


def build_fused_bank(latents: np.ndarray, labels: np.ndarray, modules: FusionModules | None,
                     num_classes: int) -> dict[int, np.ndarray]:
    """Per-class fused latents (or the raw latents when ``modules`` is None)."""
    labels = np.asarray(labels)
    source = latents if modules is None else fuse_latents(latents, labels, modules)
    return {c: source[labels == c] for c in range(num_classes)}


# -- clustering ---------------------------------------------------------------------------
@dataclass
class KMeansResult:
    centers: np.ndarray
    assignment: np.ndarray
    inertia_history: list[float]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def cluster_prototypes(latents: np.ndarray, k: int, seed, max_iter: int = 100, tol: float = 1e-6,
                       n_init: int = 10) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations on flattened latents; centers keep the latent shape.

    ``n_init`` seeded restarts share one RNG stream; the run with the lowest final inertia wins.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n = len(latents)
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} samples")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    x = latents.reshape(n, -1)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, assign, history = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (centers, assign, history)
    centers, assign, history = best
    return KMeansResult(centers.reshape(k, *latents.shape[1:]), assign, history)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        pick = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centers[j] = x[pick]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float):
    n, k = len(x), len(centers)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), assign].sum()))
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        taken: set[int] = set()
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its current center
                far = d2[np.arange(n), assign].copy()
                far[list(taken)] = -1.0
                idx = int(far.argmax())
                taken.add(idx)
                new[j] = x[idx]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    assign = d2.argmin(axis=1)
    history.append(float(d2[np.arange(n), assign].sum()))
    return centers, assign, history


# -- synthesis ------------------------------------------------------------------------------
@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def check(self, num_classes: int, ipc: int) -> None:
        counts = np.bincount(self.labels, minlength=num_classes)
        if len(self.labels) != num_classes * ipc or not np.all(counts == ipc):
            raise AssertionError(f"expected {ipc} images for each of {num_classes} classes, got {counts}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise AssertionError("pixel values outside [0, 1]")


def synthesize(config: RunConfig, ae: AutoencoderParams | None, bank: dict[int, np.ndarray] | None,
               table: EmbeddingTable | None = None, denoiser: DenoiserParams | None = None,
               *, mode: str | None = None) -> SyntheticDataset:
    """Cluster each class bank into IPC centers, optionally diffuse them from ``t_start``, decode and clamp."""
    mode = mode or config.synthesis_mode
    if ae is None:
        raise MissingStageError("autoencoder")
    if bank is None:
        raise MissingStageError("fused latent bank")
    if mode == "diffuse" and config.t_start > 0:
        if denoiser is None:
            raise MissingStageError("denoiser")
        if table is None:
            raise MissingStageError("text embedding table")
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    images, labels = [], []
    for c in range(config.num_classes):
        result = cluster_prototypes(bank[c], config.ipc, [config.seed, 19, c],
                                    config.kmeans_max_iter, config.kmeans_tol, config.kmeans_n_init)
        latents = result.centers
        if mode == "diffuse":
            cond = None if table is None else np.repeat(table.table.data[c][None], len(latents), axis=0)
            latents = sample(denoiser, cond, schedule, config.t_start, [config.seed, 31, c], init=latents)
        images.append(np.clip(encoders.decode(latents, ae), 0.0, 1.0))
        labels.append(np.full(len(latents), c, dtype=np.int64))
    return SyntheticDataset(np.concatenate(images), np.concatenate(labels), config.hash())


def random_selection(dataset: LabeledDataset, ipc: int, seed, num_classes: int | None = None) -> SyntheticDataset:
    """Baseline: ``ipc`` real images drawn uniformly without replacement per class."""
    rng = np.random.default_rng(seed)
    num_classes = num_classes or dataset.num_classes
    idx = np.concatenate([rng.choice(np.flatnonzero(dataset.labels == c), ipc, replace=False)
                          for c in range(num_classes)])
    return SyntheticDataset(dataset.images[idx], dataset.labels[idx], "random")


# -- full run -------------------------------------------------------------------------------
@dataclass
class DistillationStages:
    config: RunConfig
    ae: AutoencoderParams
    latents: np.ndarray
    labels: np.ndarray
    table_init: EmbeddingTable
    fusion: FusionTrainResult | None = None
    denoiser_pretrained: DenoiserParams | None = None
    denoiser_ft_raw: DenoiserParams | None = None
    denoiser_ft_fused: DenoiserParams | None = None
    ae_history: list[float] = field(default_factory=list)

    def bank(self, use_ca: bool) -> dict[int, np.ndarray]:
        if use_ca:
            if self.fusion is None:
                raise MissingStageError("fusion")
            return build_fused_bank(self.latents, self.labels, self.fusion.modules, self.config.num_classes)
        return build_fused_bank(self.latents, self.labels, None, self.config.num_classes)

    def table(self, use_ca: bool) -> EmbeddingTable:
        return self.fusion.modules.table if use_ca else self.table_init

    def denoiser(self, use_ca: bool, finetune: bool) -> DenoiserParams | None:
        if not finetune:
            return self.denoiser_pretrained
        return self.denoiser_ft_fused if use_ca else self.denoiser_ft_raw


def _class_cond(table: EmbeddingTable, labels: np.ndarray) -> np.ndarray:
    return table.table.data[labels]


def pretrain_denoiser(config: RunConfig, latents, labels, table: EmbeddingTable):
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    return train_denoiser(latents, _class_cond(table, labels), config.den_pretrain_steps, config.den_lr,
                          config.seed, schedule, batch=config.den_batch, width=config.den_width,
                          time_dim=config.den_time_dim, cond_dim=config.den_cond_dim)


def finetune_denoiser(config: RunConfig, params: DenoiserParams, latents, labels, table: EmbeddingTable):
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    return train_denoiser(latents, _class_cond(table, labels), config.den_finetune_steps, config.den_lr,
                          config.seed + 1000, schedule, batch=config.den_batch, params=params)


def run_stages(config: RunConfig, train: LabeledDataset, *, ae: AutoencoderParams | None = None,
               need_raw_ft: bool = True) -> DistillationStages:
    """Train every stage needed by synthesis and the ablation grid."""
    ae_history: list[float] = []
    if ae is None:
        ae, ae_history = encoders.train_autoencoder(train.images, config.ae_epochs, config.ae_lr, patch=config.patch,
                                                    latent_c=config.latent_c, batch=config.ae_batch, seed=config.seed)
    latents = encoders.encode(train.images, ae)
    table_init = init_embedding_table(config.num_classes, config.text_tokens, config.text_dim, config.seed)
    table_init.requires_grad_(False)
    stages = DistillationStages(config, ae, latents, train.labels, table_init, ae_history=ae_history)
    if config.use_ca:
        stages.fusion = train_fusion(latents, train.labels, config)
    if config.synthesis_mode == "diffuse":
        stages.denoiser_pretrained, _ = pretrain_denoiser(config, latents, train.labels, table_init)
        if config.finetune_denoiser:
            if config.use_ca:
                fused = fuse_latents(latents, train.labels, stages.fusion.modules)
                stages.denoiser_ft_fused, _ = finetune_denoiser(config, stages.denoiser_pretrained, fused,
                                                                train.labels, stages.fusion.modules.table)
            if need_raw_ft:
                stages.denoiser_ft_raw, _ = finetune_denoiser(config, stages.denoiser_pretrained, latents,
                                                              train.labels, table_init)
    return stages


def synthesize_variant(stages: DistillationStages, use_ca: bool, finetune: bool, ipc: int | None = None,
                       mode: str | None = None) -> SyntheticDataset:
    config = stages.config if ipc is None else stages.config.replace(ipc=ipc)
    return synthesize(config, stages.ae, stages.bank(use_ca), stages.table(use_ca),
                      stages.denoiser(use_ca, finetune), mode=mode)


def classifier_accuracy(config: RunConfig, synthetic: SyntheticDataset, test: LabeledDataset, seed: int) -> float:
    params, _ = train_classifier(synthetic.images, synthetic.labels, config.num_classes, epochs=config.clf_epochs,
                                 lr=config.clf_lr, seed=seed, batch=config.clf_batch, width=config.clf_width)
    return evaluate(params, test.images, test.labels)


def run_ablation(config: RunConfig, train: LabeledDataset, test: LabeledDataset,
                 ipcs: tuple[int, ...] | None = None, include_random: bool = True) -> list[tuple]:
    """Rows of (variant, ipc, seed, accuracy) for the {+-CA} x {+-FT} grid plus a random-selection baseline."""
    ipcs = ipcs or (config.ipc,)
    full = config.replace(use_ca=True, finetune_denoiser=True, synthesis_mode="diffuse")
    stages = run_stages(full, train)
    rows = []
    for ipc in ipcs:
        for name, use_ca, ft in VARIANTS:
            synthetic = synthesize_variant(stages, use_ca, ft, ipc=ipc)
            rows.append((name, ipc, config.seed, classifier_accuracy(config, synthetic, test, config.seed)))
        if include_random:
            synthetic = random_selection(train, ipc, [config.seed, 41], config.num_classes)
            rows.append(("random", ipc, config.seed, classifier_accuracy(config, synthetic, test, config.seed)))
    return rows
