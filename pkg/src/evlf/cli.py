"""Command-line entry point.

Each subcommand reads the config, trains (or reloads from ``--out-dir``) whatever upstream
stages it needs, writes ``resolved_config`` plus a metrics CSV, and exits with
0 on success, 1 on a usage error, 2 on a data or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders
from . import pipeline as pl
from .config import ConfigError, RunConfig, parse_pairs
from .diffusion import DenoiserParams
from .encoders import AutoencoderParams, EmbeddingTable
from .evaluation import coverage, export_embeddings_2d
from .fusion import FusionParams, ProjectorParams
from .io import (CIFAR10_CLASSES, FormatError, LabeledDataset, atomic_write_text, gen_blobs, load_checkpoint,
                 load_cifar10, load_tensor, save_checkpoint, save_tensor, write_csv)

log = logging.getLogger("evlf")

COMMANDS = ("train-ae", "train-fusion", "finetune-denoiser", "distill", "eval", "coverage", "ablate",
            "export-embeddings")
AE_FILE = "ae.evlc"
FUSION_FILE = "fusion.evlc"
DENOISER_FILE = "denoiser.evlc"
SYNTHETIC_DIR = "synthetic"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- datasets -------------------------------------------------------------------------------
def _class_ids(text: str) -> list[int]:
    ids = []
    for token in (t.strip() for t in text.split(",") if t.strip()):
        ids.append(int(token) if token.isdigit() else CIFAR10_CLASSES.index(token))
    return ids


def load_datasets(config: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits named by the config."""
    if config.dataset == "blobs":
        kw = dict(contrast=config.blob_contrast, template_seed=config.seed)
        train = gen_blobs(config.num_classes, config.train_per_class, config.image_shape, [config.seed, 1], **kw)
        test = gen_blobs(config.num_classes, config.test_per_class, config.image_shape, [config.seed, 2], **kw)
        return train, test
    if config.dataset == "cifar10":
        if not config.data_dir:
            raise ConfigError("dataset=cifar10 requires data_dir")
        try:
            classes = _class_ids(config.classes) if config.classes else list(range(config.num_classes))
        except ValueError as exc:
            raise ConfigError(f"bad classes list {config.classes!r}") from exc
        if len(classes) != config.num_classes:
            raise ConfigError(f"classes lists {len(classes)} ids but num_classes={config.num_classes}")
        train = load_cifar10(config.data_dir, classes, config.train_per_class, "train")
        test = load_cifar10(config.data_dir, classes, config.test_per_class, "test")
        return train, test
    raise ConfigError(f"unknown dataset {config.dataset!r}")


# -- stage persistence --------------------------------------------------------------------
@dataclass
class Context:
    config: RunConfig
    out_dir: Path
    train: LabeledDataset | None = None
    test: LabeledDataset | None = None
    cache: dict = field(default_factory=dict)

    def datasets(self) -> tuple[LabeledDataset, LabeledDataset]:
        if self.train is None:
            self.train, self.test = load_datasets(self.config)
        return self.train, self.test

    def save(self, name: str, blocks: dict[str, np.ndarray]) -> None:
        save_checkpoint(self.out_dir / name, blocks, self.config.to_text(), self.config.hash())

    def load(self, name: str) -> dict[str, np.ndarray] | None:
        path = self.out_dir / name
        if not path.exists():
            return None
        ckpt = load_checkpoint(path)
        if ckpt.config_hash != self.config.hash():
            log.warning("%s was written under a different config (hash %s)", path, ckpt.config_hash[:12])
        return ckpt.tensors


def ensure_ae(ctx: Context, retrain: bool = False) -> AutoencoderParams:
    if "ae" in ctx.cache:
        return ctx.cache["ae"]
    cfg = ctx.config
    blocks = None if retrain else ctx.load(AE_FILE)
    if blocks is None:
        train, _ = ctx.datasets()
        ae, history = encoders.train_autoencoder(train.images, cfg.ae_epochs, cfg.ae_lr, patch=cfg.patch,
                                                 latent_c=cfg.latent_c, batch=cfg.ae_batch, seed=cfg.seed)
        ctx.save(AE_FILE, ae.to_blocks("ae"))
        ctx.cache["ae_history"] = history
    else:
        ae = AutoencoderParams.from_blocks(blocks, "ae", image_shape=cfg.image_shape, patch=cfg.patch)
    ctx.cache["ae"] = ae
    return ae


def ensure_latents(ctx: Context) -> np.ndarray:
    if "latents" not in ctx.cache:
        train, _ = ctx.datasets()
        ctx.cache["latents"] = encoders.encode(train.images, ensure_ae(ctx))
    return ctx.cache["latents"]


def ensure_fusion(ctx: Context, retrain: bool = False) -> pl.FusionModules:
    if "fusion" in ctx.cache:
        return ctx.cache["fusion"]
    cfg = ctx.config
    blocks = None if retrain else ctx.load(FUSION_FILE)
    if blocks is None:
        train, _ = ctx.datasets()
        result = pl.train_fusion(ensure_latents(ctx), train.labels, cfg)
        modules = result.modules
        ctx.save(FUSION_FILE, {**modules.fusion.to_blocks("fusion"), **modules.projector.to_blocks("projector"),
                               **modules.table.to_blocks("table")})
        ctx.cache["fusion_steps"] = result.steps
    else:
        modules = pl.FusionModules(FusionParams.from_blocks(blocks, "fusion", num_heads=cfg.heads),
                                   ProjectorParams.from_blocks(blocks, "projector"),
                                   EmbeddingTable.from_blocks(blocks, "table"))
    ctx.cache["fusion"] = modules
    return modules


def initial_table(config: RunConfig) -> EmbeddingTable:
    table = encoders.init_embedding_table(config.num_classes, config.text_tokens, config.text_dim, config.seed)
    return table.requires_grad_(False)


def ensure_denoiser(ctx: Context, retrain: bool = False) -> tuple[DenoiserParams, DenoiserParams | None]:
    """(pretrained, fine-tuned) denoisers; fine-tuning targets fused latents when CA is on, raw otherwise."""
    if "denoiser" in ctx.cache:
        return ctx.cache["denoiser"]
    cfg = ctx.config
    blocks = None if retrain else ctx.load(DENOISER_FILE)
    static = dict(latent_shape=cfg.latent_shape)
    if blocks is None:
        train, _ = ctx.datasets()
        latents = ensure_latents(ctx)
        pre, pre_hist = pl.pretrain_denoiser(cfg, latents, train.labels, initial_table(cfg))
        tuned, ft_hist = None, []
        if cfg.finetune_denoiser:
            if cfg.use_ca:
                modules = ensure_fusion(ctx)
                target, table = pl.fuse_latents(latents, train.labels, modules), modules.table
            else:
                target, table = latents, initial_table(cfg)
            tuned, ft_hist = pl.finetune_denoiser(cfg, pre, target, train.labels, table)
        out = pre.to_blocks("pretrained")
        if tuned is not None:
            out.update(tuned.to_blocks("finetuned"))
        ctx.save(DENOISER_FILE, out)
        ctx.cache["denoiser_history"] = [("pretrain", i, v) for i, v in enumerate(pre_hist)] + \
                                        [("finetune", i, v) for i, v in enumerate(ft_hist)]
    else:
        pre = DenoiserParams.from_blocks(blocks, "pretrained", **static)
        tuned = DenoiserParams.from_blocks(blocks, "finetuned", **static) if "finetuned.w1" in blocks else None
    ctx.cache["denoiser"] = (pre, tuned)
    return pre, tuned


# -- synthetic set directory --------------------------------------------------------------
def save_synthetic(directory: Path, synthetic: pl.SyntheticDataset, config: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    counts = np.bincount(synthetic.labels, minlength=config.num_classes)
    rows = []
    seen = np.zeros(config.num_classes, dtype=np.int64)
    for image, label in zip(synthetic.images, synthetic.labels):
        name = f"class{label}_proto{seen[label]}.evlt"
        seen[label] += 1
        save_tensor(directory / name, image)
        rows.append((name, int(label)))
    write_csv(directory / "labels.csv", ["file", "label"], rows)
    manifest = [f"config_hash={config.hash()}", f"provenance={synthetic.provenance}",
                f"num_classes={config.num_classes}", f"ipc={config.ipc}", f"count={len(synthetic)}"]
    manifest += [f"class{c}_count={n}" for c, n in enumerate(counts)]
    atomic_write_text(directory / "manifest", "\n".join(manifest) + "\n")


def load_synthetic(directory: Path) -> pl.SyntheticDataset:
    directory = Path(directory)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"no synthetic set at {directory} (run distill first)")
    lines = labels_path.read_text().splitlines()
    if not lines or lines[0] != "file,label":
        raise FormatError(f"{labels_path}: bad header")
    images, labels = [], []
    for line in lines[1:]:
        name, label = line.split(",")
        images.append(load_tensor(directory / name))
        labels.append(int(label))
    provenance = parse_pairs((directory / "manifest").read_text()).get("provenance", "")
    return pl.SyntheticDataset(np.stack(images), np.array(labels, dtype=np.int64), provenance)


def variant_name(config: RunConfig) -> str:
    return f"{'+' if config.use_ca else '-'}CA{'+' if config.finetune_denoiser else '-'}FT"


# -- subcommands -----------------------------------------------------------------------------
def cmd_train_ae(ctx: Context, args) -> None:
    ensure_ae(ctx, retrain=True)
    history = ctx.cache["ae_history"]
    write_csv(ctx.out_dir / "ae_loss.csv", ["epoch", "mse"], enumerate(history))
    print(f"autoencoder: recon mse {history[0]:.5f} -> {history[-1]:.5f}")


def cmd_train_fusion(ctx: Context, args) -> None:
    ensure_fusion(ctx, retrain=True)
    keys = ["step", "epoch", "total", "infonce", "mse", "lambda2"]
    write_csv(ctx.out_dir / "fusion_loss.csv", keys, ([r[k] for k in keys] for r in ctx.cache["fusion_steps"]))
    print(f"fusion: {len(ctx.cache['fusion_steps'])} steps, final total {ctx.cache['fusion_steps'][-1]['total']:.5f}")


def cmd_finetune_denoiser(ctx: Context, args) -> None:
    ensure_denoiser(ctx, retrain=True)
    rows = ctx.cache["denoiser_history"]
    write_csv(ctx.out_dir / "denoiser_loss.csv", ["phase", "step", "loss"], rows)
    print(f"denoiser: {len(rows)} steps, final loss {rows[-1][2]:.5f}")


def build_synthetic(ctx: Context) -> pl.SyntheticDataset:
    cfg = ctx.config
    train, _ = ctx.datasets()
    ae = ensure_ae(ctx)
    latents = ensure_latents(ctx)
    modules = ensure_fusion(ctx) if cfg.use_ca else None
    bank = pl.build_fused_bank(latents, train.labels, modules, cfg.num_classes)
    table = modules.table if modules is not None else initial_table(cfg)
    denoiser = None
    if cfg.synthesis_mode == "diffuse" and cfg.t_start > 0:
        pre, tuned = ensure_denoiser(ctx)
        denoiser = tuned if cfg.finetune_denoiser and tuned is not None else pre
    synthetic = pl.synthesize(cfg, ae, bank, table, denoiser)
    synthetic.check(cfg.num_classes, cfg.ipc)
    return synthetic


def cmd_distill(ctx: Context, args) -> None:
    synthetic = build_synthetic(ctx)
    save_synthetic(ctx.out_dir / SYNTHETIC_DIR, synthetic, ctx.config)
    counts = np.bincount(synthetic.labels, minlength=ctx.config.num_classes)
    write_csv(ctx.out_dir / "synthesis.csv", ["class", "count"], enumerate(counts))
    print(f"distill: wrote {len(synthetic)} images to {ctx.out_dir / SYNTHETIC_DIR}")


def _synthetic_for(ctx: Context, args) -> pl.SyntheticDataset:
    return load_synthetic(Path(args.synthetic) if args.synthetic else ctx.out_dir / SYNTHETIC_DIR)


def cmd_eval(ctx: Context, args) -> None:
    cfg = ctx.config
    train, test = ctx.datasets()
    synthetic = _synthetic_for(ctx, args)
    sets = [(variant_name(cfg), synthetic)]
    if args.baseline:
        sets.append(("random", pl.random_selection(train, cfg.ipc, [cfg.seed, 41], cfg.num_classes)))
    rows = []
    for name, data in sets:
        for i in range(cfg.num_seeds):
            seed = cfg.seed + i
            rows.append((name, cfg.ipc, seed, pl.classifier_accuracy(cfg, data, test, seed)))
    write_csv(ctx.out_dir / "accuracy.csv", ["variant", "ipc", "seed", "accuracy"], rows)
    for name, _ in sets:
        accs = [r[3] for r in rows if r[0] == name]
        print(f"eval {name}: mean accuracy {np.mean(accs):.4f} over {len(accs)} seeds")


def _coverage_vectors(ctx: Context, real: LabeledDataset, synthetic: pl.SyntheticDataset):
    if ctx.config.coverage_space == "pixel":
        return real.images, synthetic.images
    ae = ensure_ae(ctx)
    zr, zg = encoders.encode(real.images, ae), encoders.encode(synthetic.images, ae)
    if ctx.config.use_ca:
        modules = ensure_fusion(ctx)
        zr = pl.fuse_latents(zr, real.labels, modules)
        zg = pl.fuse_latents(zg, synthetic.labels, modules)
    return zr, zg


def cmd_coverage(ctx: Context, args) -> None:
    cfg = ctx.config
    train, _ = ctx.datasets()
    synthetic = _synthetic_for(ctx, args)
    real, gen = _coverage_vectors(ctx, train, synthetic)
    report = coverage(real, gen, cfg.coverage_k)
    write_csv(ctx.out_dir / "coverage.csv", ["space", "k", "n_real", "n_generated", "score"],
              [(cfg.coverage_space, cfg.coverage_k, len(real), len(gen), report.score)])
    print(f"coverage ({cfg.coverage_space}, k={cfg.coverage_k}): {report.score:.4f}")


def cmd_ablate(ctx: Context, args) -> None:
    cfg = ctx.config
    ipcs = tuple(int(v) for v in args.ipcs.split(",")) if args.ipcs else (cfg.ipc,)
    rows = []
    for i in range(cfg.num_seeds):
        seed_cfg = cfg.replace(seed=cfg.seed + i)
        train, test = load_datasets(seed_cfg)
        rows.extend(pl.run_ablation(seed_cfg, train, test, ipcs))
    write_csv(ctx.out_dir / "accuracy.csv", ["variant", "ipc", "seed", "accuracy"], rows)
    for ipc in ipcs:
        for name in [v[0] for v in pl.VARIANTS] + ["random"]:
            accs = [r[3] for r in rows if r[0] == name and r[1] == ipc]
            print(f"ablate ipc={ipc} {name}: {np.mean(accs):.4f}")


def cmd_export_embeddings(ctx: Context, args) -> None:
    train, _ = ctx.datasets()
    synthetic = _synthetic_for(ctx, args)
    rng = np.random.default_rng([ctx.config.seed, 43])
    per_class = args.real_per_class
    idx = np.concatenate([rng.choice(np.flatnonzero(train.labels == c), min(per_class, int((train.labels == c).sum())),
                                     replace=False) for c in range(ctx.config.num_classes)])
    real = train.subset(np.sort(idx))
    vectors = np.concatenate([real.images.reshape(len(real), -1), synthetic.images.reshape(len(synthetic), -1)])
    labels = np.concatenate([real.labels, synthetic.labels])
    sources = ["real"] * len(real) + ["synthetic"] * len(synthetic)
    rows, emb = export_embeddings_2d(vectors, labels, sources)
    write_csv(ctx.out_dir / "embedding2d.csv", ["x", "y", "label", "source"], rows)
    print(f"export-embeddings: {len(rows)} points, variances {emb.variances[0]:.4f} {emb.variances[1]:.4f}")


HANDLERS = {
    "train-ae": cmd_train_ae,
    "train-fusion": cmd_train_fusion,
    "finetune-denoiser": cmd_finetune_denoiser,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "coverage": cmd_coverage,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


# -- argument parsing ----------------------------------------------------------------------
def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = _Parser(add_help=False)
    p.add_argument("--config", default=default, help="key=value config file")
    p.add_argument("--seed", type=int, default=default, help="override the config seed")
    p.add_argument("--out-dir", default=default, help="directory for checkpoints and reports (default: out)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evlf", description="Dataset distillation with early vision-language fusion.",
                     parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    helps = {
        "train-ae": "train the patch autoencoder",
        "train-fusion": "train the cross-attention fusion module and projector",
        "finetune-denoiser": "pretrain the latent denoiser and fine-tune it on (fused) latents",
        "distill": "synthesize IPC images per class",
        "eval": "train classifiers on the synthetic set and report test accuracy",
        "coverage": "k-NN coverage of the synthetic set against real data",
        "ablate": "run the CA x FT ablation grid with a random-selection baseline",
        "export-embeddings": "2-D PCA projection of real and synthetic images",
    }
    parents = [_global_flags(True)]
    cmds = {name: sub.add_parser(name, help=helps[name], parents=parents) for name in COMMANDS}
    for name in ("eval", "coverage", "export-embeddings"):
        cmds[name].add_argument("--synthetic", help="synthetic set directory (default: OUT_DIR/synthetic)")
    cmds["eval"].add_argument("--baseline", action="store_true", help="also score a random-selection set")
    cmds["ablate"].add_argument("--ipcs", help="comma-separated IPC values (default: config ipc)")
    cmds["export-embeddings"].add_argument("--real-per-class", type=int, default=100)
    return parser


def resolve_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config = RunConfig.from_text(Path(args.config).read_text())
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return config.with_overrides(overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        config = resolve_config(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"evlf: {exc}", file=sys.stderr)
        return 2
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(getattr(args, "out_dir", None) or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "resolved_config", config.to_text())
    ctx = Context(config, out_dir)
    try:
        HANDLERS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"evlf: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError, pl.MissingStageError) as exc:
        print(f"evlf: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
