"""Adversarial + pixel-wise objective and the alternating D/G training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import EmptyDataset, InvalidConfig, MissingPatch, NonFiniteLoss, ShapeMismatch
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)
from .slide_io import Role, SourceMode
from .tiling import PatchManifest, decompose, filter_empty, normalize, read_patch

log = logging.getLogger(__name__)

EPS = 1e-7
LOSS_LOG_HEADER = ("step", "epoch", "d_loss", "g_adv", "g_pix", "g_total")


class PixelLossMode(str, Enum):
    L2_NORM = "L2_NORM"
    MSE = "MSE"


class AdversarialMode(str, Enum):
    NON_SATURATING = "NON_SATURATING"
    SATURATING = "SATURATING"


@dataclass
class TrainConfig:
    alpha: float = 10.0
    beta: float = 10.0
    learning_rate: float = 2e-4
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    pixel_loss_mode: PixelLossMode = PixelLossMode.L2_NORM
    generator_adv_mode: AdversarialMode = AdversarialMode.NON_SATURATING
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    deterministic: bool = True

    def __post_init__(self):
        self.pixel_loss_mode = PixelLossMode(str(getattr(self.pixel_loss_mode, "value",
                                                         self.pixel_loss_mode)).upper())
        self.generator_adv_mode = AdversarialMode(
            str(getattr(self.generator_adv_mode, "value", self.generator_adv_mode)).upper())
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfig("alpha and beta must be >= 0")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pixel_loss_mode"] = self.pixel_loss_mode.value
        d["generator_adv_mode"] = self.generator_adv_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossRecord:
    step: int
    epoch: int
    d_loss: float
    g_adv_loss: float
    g_pix_loss: float
    g_total_loss: float

    def row(self):
        return [self.step, self.epoch, repr(self.d_loss), repr(self.g_adv_loss),
                repr(self.g_pix_loss), repr(self.g_total_loss)]


# ---------------------------------------------------------------- losses

def _prob(p):
    p = p if torch.is_tensor(p) else torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not p.is_floating_point():
        p = p.double()
    return p.clamp(EPS, 1.0 - EPS)


def discriminator_loss(d_real, d_fake):
    """-mean(log D(z)) - mean(log(1 - D(G(x)))), the negated D objective."""
    d_real, d_fake = _prob(d_real), _prob(d_fake)
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def generator_adversarial_loss(d_fake, mode=AdversarialMode.NON_SATURATING):
    d_fake = _prob(d_fake)
    if AdversarialMode(getattr(mode, "value", mode)) is AdversarialMode.NON_SATURATING:
        return -torch.log(d_fake).mean()
    return torch.log1p(-d_fake).mean()


def pixel_loss(generated, real, mode=PixelLossMode.L2_NORM):
    """L2_NORM: batch mean of per-patch Euclidean norms; MSE: mean squared error."""
    generated = torch.as_tensor(generated) if not torch.is_tensor(generated) else generated
    real = torch.as_tensor(real) if not torch.is_tensor(real) else real
    if generated.shape != real.shape:
        raise ShapeMismatch(f"{tuple(generated.shape)} vs {tuple(real.shape)}")
    diff = generated - real.to(generated.dtype)
    if PixelLossMode(getattr(mode, "value", mode)) is PixelLossMode.MSE:
        return (diff ** 2).mean()
    if diff.ndim < 2:
        diff = diff.unsqueeze(0)
    return torch.linalg.vector_norm(diff.flatten(1), dim=1).mean()


def total_generator_loss(g_adv, g_pix, cfg: TrainConfig):
    return cfg.alpha * g_adv + cfg.beta * g_pix


# ---------------------------------------------------------------- data

class PatchDataset:
    """Included tiles only: uint8 sources (N, H, W, 2) in NUCLEI, VESSEL order and NP targets (N, H, W)."""

    def __init__(self, sources: np.ndarray, targets: np.ndarray, names=None):
        sources = np.asarray(sources, dtype=np.uint8)
        targets = np.asarray(targets, dtype=np.uint8)
        if sources.ndim != 4 or sources.shape[-1] != 2 or targets.shape != sources.shape[:3]:
            raise ShapeMismatch(f"bad dataset shapes {sources.shape} / {targets.shape}")
        self.sources = sources
        self.targets = targets
        self.names = list(names) if names is not None else [str(i) for i in range(len(sources))]

    def __len__(self):
        return len(self.sources)

    @property
    def patch_size(self) -> int:
        return int(self.sources.shape[1])

    @classmethod
    def from_slides(cls, slides, patch_size_px: int) -> "PatchDataset":
        src, tgt, names = [], [], []
        for slide in slides:
            manifest, patches = decompose(slide, patch_size_px)
            manifest = filter_empty(manifest, patches)
            roles = manifest.roles
            ni, vi, pi = (roles.index(r) for r in (Role.NUCLEI, Role.VESSEL, Role.NP))
            for rec, patch in zip(manifest.records, patches):
                if rec.included:
                    src.append(patch[..., [ni, vi]])
                    tgt.append(patch[..., pi])
                    names.append(rec.name)
        if not src:
            return cls(np.zeros((0, patch_size_px, patch_size_px, 2), np.uint8),
                       np.zeros((0, patch_size_px, patch_size_px), np.uint8))
        return cls(np.stack(src), np.stack(tgt), names)

    @classmethod
    def from_store(cls, store_dir) -> "PatchDataset":
        """Read every ``*_manifest.csv`` in a patch store written by ``write_patch_store``."""
        store_dir = Path(store_dir)
        src, tgt, names = [], [], []
        size = None
        for mpath in sorted(store_dir.glob("*_manifest.csv")):
            manifest = PatchManifest.read_csv(mpath)
            size = manifest.patch_size_px
            for rec in manifest.included:
                tile = read_patch(store_dir, rec)
                if tile.shape != (size, size, 3):
                    raise MissingPatch(f"{rec.name}: unexpected tile shape {tile.shape}")
                src.append(tile[..., :2])
                tgt.append(tile[..., 2])
                names.append(rec.name)
        if not src:
            raise EmptyDataset(f"no included patches under {store_dir}")
        return cls(np.stack(src), np.stack(tgt), names)

    def tensors(self, source_mode, dtype=torch.float32):
        """Normalized (x, z) as NCHW tensors for the given source mode."""
        mode = SourceMode.parse(source_mode)
        idx = [{Role.NUCLEI: 0, Role.VESSEL: 1}[r] for r in mode.roles]
        x = torch.from_numpy(normalize(self.sources[..., idx])).permute(0, 3, 1, 2)
        z = torch.from_numpy(normalize(self.targets)).unsqueeze(1)
        return x.to(dtype).contiguous(), z.to(dtype).contiguous()


# ---------------------------------------------------------------- loop

def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def make_optimizers(g, d, cfg: TrainConfig):
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, betas=betas)
    return opt_g, opt_d


def _disc_input(d, z, x):
    return torch.cat([z, x], dim=1) if d.spec.conditional else z


def train_step(g, d, x, z, cfg: TrainConfig, opt_g, opt_d, step: int = 0,
               epoch: int = 0) -> LossRecord:
    """One discriminator update on real z vs detached G(x), then one generator update."""
    g.train()
    d.train()

    fake = g(x)
    opt_d.zero_grad(set_to_none=True)
    d_real = d(_disc_input(d, z, x))
    d_fake = d(_disc_input(d, fake.detach(), x))
    loss_d = discriminator_loss(d_real, d_fake)
    if not torch.isfinite(loss_d):
        raise NonFiniteLoss(f"discriminator loss is {loss_d.item()} at step {step}",
                            {"step": step, "epoch": epoch, "d_loss": loss_d.item()})
    loss_d.backward()
    opt_d.step()

    opt_g.zero_grad(set_to_none=True)
    g_adv = generator_adversarial_loss(d(_disc_input(d, fake, x)), cfg.generator_adv_mode)
    g_pix = pixel_loss(fake, z, cfg.pixel_loss_mode)
    g_total = total_generator_loss(g_adv, g_pix, cfg)
    if not torch.isfinite(g_total):
        raise NonFiniteLoss(
            f"generator loss is {g_total.item()} at step {step}",
            {"step": step, "epoch": epoch, "d_loss": loss_d.item(),
             "g_adv": g_adv.item(), "g_pix": g_pix.item()},
        )
    g_total.backward()
    opt_g.step()
    # zero D grads accumulated by the generator pass
    opt_d.zero_grad(set_to_none=True)

    adv, pix = float(g_adv.item()), float(g_pix.item())
    return LossRecord(step, epoch, float(loss_d.item()), adv, pix,
                      float(total_generator_loss(adv, pix, cfg)))


def default_discriminator_spec(patch_size: int, source_channels: int = 0,
                               conditional: bool = False) -> DiscriminatorSpec:
    """Six-layer discriminator for 512 px patches, a 3-layer one for smaller patches."""
    filters = (16, 32, 64, 128, 256, 512) if patch_size >= 512 else (8, 16, 32)
    return DiscriminatorSpec(
        input_channels=1 + (source_channels if conditional else 0),
        conv_filters=filters, input_size_px=patch_size, conditional=conditional,
    )


def _epoch_checkpoints(out_dir: Path):
    return sorted(out_dir.glob("epoch_*.ckpt"))


def write_loss_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_LOG_HEADER)
        for r in records:
            w.writerow(r.row())


def read_loss_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), int(r["epoch"]), float(r["d_loss"]), float(r["g_adv"]),
                       float(r["g_pix"]), float(r["g_total"])) for r in rows]


def train(dataset: PatchDataset, source_mode, cfg: TrainConfig,
          generator_spec: GeneratorSpec | None = None,
          discriminator_spec: DiscriminatorSpec | None = None,
          out_dir=None, resume: bool = True, progress=None):
    """Train for ``cfg.epochs`` epochs and return one checkpoint per epoch.

    The first element is the untrained initial state (epoch 0). With
    ``out_dir`` set, every epoch is saved as ``epoch_XXX.ckpt`` with a
    ``loss_log.csv``; an existing run there is resumed from its last epoch.
    """
    mode = SourceMode.parse(source_mode)
    if len(dataset) == 0:
        raise EmptyDataset("no included patches to train on")
    gspec = generator_spec or GeneratorSpec(input_channels=mode.channels)
    if gspec.input_channels != mode.channels:
        raise InvalidConfig(
            f"source mode {mode.value} gives {mode.channels} channels, "
            f"generator expects {gspec.input_channels}"
        )
    dspec = discriminator_spec or default_discriminator_spec(dataset.patch_size)

    set_deterministic(cfg.seed, cfg.deterministic)
    g = build_generator(gspec, cfg.seed)
    d = build_discriminator(dspec, cfg.seed + 1)
    opt_g, opt_d = make_optimizers(g, d, cfg)
    x_all, z_all = dataset.tensors(mode)

    base_meta = {"seed": cfg.seed, "source_mode": mode.value, "train_config": cfg.to_dict(),
                 "n_patches": len(dataset), "patch_size_px": dataset.patch_size}
    history = []
    start_epoch = 1
    step = 0
    checkpoints = []

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        existing = _epoch_checkpoints(out_dir) if resume else []
        if existing:
            last = load_checkpoint(existing[-1])
            if last.training_meta.get("train_config") != cfg.to_dict():
                raise InvalidConfig(f"{out_dir} holds a run with a different training config")
            last.load_into(g, d)
            last.load_optimizer("opt_g", opt_g)
            last.load_optimizer("opt_d", opt_d)
            checkpoints = [load_checkpoint(p) for p in existing]
            start_epoch = int(last.training_meta["epoch"]) + 1
            step = int(last.training_meta["step"])
            log_path = out_dir / "loss_log.csv"
            history = [r for r in read_loss_log(log_path) if r.step <= step] \
                if log_path.exists() else []
            log.info("resuming %s from epoch %d", out_dir, start_epoch - 1)

    def snapshot(epoch):
        meta = dict(base_meta, epoch=epoch, step=step, final=epoch == cfg.epochs,
                    loss_history=[asdict(r) for r in history])
        ck = Checkpoint.from_models(g, d, meta, opt_g, opt_d)
        if out_dir is not None:
            save_checkpoint(ck, out_dir / f"epoch_{epoch:03d}.ckpt")
            write_loss_log(history, out_dir / "loss_log.csv")
        return ck

    if not checkpoints:
        checkpoints.append(snapshot(0))

    n = len(dataset)
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[lo:lo + cfg.batch_size])
            step += 1
            rec = train_step(g, d, x_all[idx], z_all[idx], cfg, opt_g, opt_d, step, epoch)
            history.append(rec)
            if progress is not None:
                progress(rec)
        last = history[-1] if history else None
        if last is not None:
            log.info("epoch %d/%d step %d d=%.4f adv=%.4f pix=%.5f", epoch, cfg.epochs,
                     step, last.d_loss, last.g_adv_loss, last.g_pix_loss)
        checkpoints.append(snapshot(epoch))
    return checkpoints


def evaluate_pixel_loss(ckpt: Checkpoint, dataset: PatchDataset, source_mode,
                        mode=PixelLossMode.MSE, batch_size: int = 64) -> float:
    """Mean pixel loss of a checkpoint's generator over a dataset, in inference mode."""
    g = ckpt.generator()
    x_all, z_all = dataset.tensors(source_mode)
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(dataset), batch_size):
            x, z = x_all[lo:lo + batch_size], z_all[lo:lo + batch_size]
            total += float(pixel_loss(g(x), z, mode)) * len(x)
            count += len(x)
    if count == 0:
        raise EmptyDataset("nothing to evaluate")
    return total / count


def losses_finite(records) -> bool:
    return all(math.isfinite(v) for r in records
               for v in (r.d_loss, r.g_adv_loss, r.g_pix_loss, r.g_total_loss))
