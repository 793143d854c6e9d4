"""Two-phase training loop: random domain-pair sampling, the bidirectional
translation pass, per-domain Adam stepping, learning-rate / feature-weight
schedules, and atomic checkpointing.

Only the sampled pair's networks are touched in a step; every other domain's
parameters (and optimizer state) stay bit-identical.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .bank import DomainId, NetworkConfig, init_bank
from .data import DatasetManifest, ImageRecord, load_image
from .errors import (CheckpointError, ConfigError, ScheduleRangeError,
                     TrainingDivergedError)
from .losses import (LossBreakdown, LossWeights, cycle_loss,
                     feature_consistency_loss, gan_loss_discriminator,
                     gan_loss_generator, total_loss)

LOG_COLUMNS = ["epoch", "iter", "pair", "gan_ab", "gan_ba", "cycle",
               "feature", "total", "lr", "lambda2"]


@dataclass(frozen=True)
class TrainConfig:
    n_domains: int = 2
    epochs_constant: int = 300
    epochs_decay: int = 300
    base_lr: float = 2e-4
    weights: LossWeights = LossWeights(lambda1=10.0, lambda2=0.0)
    lambda2_start: float = 0.05
    lambda2_end: float = 0.1
    fcl_start_epoch: int | None = None
    fcl_metric: str = "l2"
    batch_size: int = 1
    crop_size: int = 256
    scale_size: int = 286
    seed: int = 0
    pool_size: int = 50
    network: NetworkConfig = NetworkConfig()
    adam_betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.n_domains < 2:
            raise ConfigError("n_domains must be >= 2")
        if self.scale_size < self.crop_size:
            raise ConfigError("scale_size must be >= crop_size")
        if self.epochs_constant < 0 or self.epochs_decay < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.lambda2_end < self.lambda2_start:
            raise ConfigError("lambda2_end must be >= lambda2_start")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.fcl_metric not in ("l2", "cosine"):
            raise ConfigError(f"unknown fcl_metric {self.fcl_metric!r}")

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


@dataclass
class TrainState:
    epoch: int = 0
    current_lr: float = 0.0
    current_lambda2: float = 0.0
    loss_history: list[tuple[int, LossBreakdown]] = field(default_factory=list)


def sample_domain_pair(n_domains: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform ordered pair of distinct 1-based domain indices."""
    if n_domains < 2:
        raise ConfigError("need at least 2 domains to sample a pair")
    a = int(rng.integers(1, n_domains + 1))
    b = int(rng.integers(1, n_domains))
    if b >= a:
        b += 1
    return a, b


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant at base_lr, then linear decay hitting zero on the last epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ScheduleRangeError(
            f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.epochs_constant:
        return cfg.base_lr
    frac = (epoch - cfg.epochs_constant + 1) / cfg.epochs_decay
    return max(0.0, cfg.base_lr * (1.0 - frac))


def lambda2_schedule(epoch: int, cfg: TrainConfig) -> float:
    """0 before the feature-loss start epoch, then a linear ramp from
    lambda2_start toward lambda2_end across the remaining epochs."""
    start = cfg.fcl_start_epoch
    if start is None or epoch < start:
        return 0.0
    span = cfg.total_epochs - start
    if span <= 0:
        return cfg.lambda2_end
    frac = min(1.0, (epoch - start) / span)
    return cfg.lambda2_start + (cfg.lambda2_end - cfg.lambda2_start) * frac


def effective_lambda2(epoch: int, cfg: TrainConfig) -> float:
    """Scheduled value when a ramp is configured, else the static weight."""
    if cfg.fcl_start_epoch is None:
        return cfg.weights.lambda2
    return lambda2_schedule(epoch, cfg)


def preprocess(image, cfg: TrainConfig | None = None,
               rng: np.random.Generator | None = None, training: bool = True,
               eval_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Decode/resize/crop to a (3,H,W) float tensor in [-1, 1].

    Training: square-resize to ``scale_size`` then take a random
    ``crop_size`` crop. Inference: resize to ``eval_size`` (h, w), no crop.
    """
    if isinstance(image, (str, Path)):
        image = load_image(image)
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")

    if training:
        if cfg is None or rng is None:
            raise ConfigError("training preprocess needs cfg and rng")
        image = image.resize((cfg.scale_size, cfg.scale_size), Image.BICUBIC)
        span = cfg.scale_size - cfg.crop_size
        left = int(rng.integers(0, span + 1))
        top = int(rng.integers(0, span + 1))
        image = image.crop((left, top, left + cfg.crop_size, top + cfg.crop_size))
    else:
        if eval_size is None:
            raise ConfigError("inference preprocess needs eval_size")
        h, w = eval_size
        if image.size != (w, h):
            image = image.resize((w, h), Image.BICUBIC)

    arr = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


class ImagePool:
    """History buffer of past fakes; discriminators train on a 50/50 mix of
    fresh and replayed fakes once the pool is full."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for image in batch:
            if len(self.images) < self.size:
                self.images.append(image)
                out.append(image)
            elif self.rng.random() < 0.5:
                slot = int(self.rng.integers(0, self.size))
                out.append(self.images[slot])
                self.images[slot] = image
            else:
                out.append(image)
        return torch.stack(out)


class _DomainCycler:
    """Endless shuffled stream over one domain's records."""

    def __init__(self, records: list[ImageRecord], rng: np.random.Generator):
        self.records = sorted(records, key=lambda r: r.id)
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def reshuffle(self):
        self.order = list(self.rng.permutation(len(self.records)))
        self.pos = 0

    def take(self, k: int) -> list[ImageRecord]:
        out = []
        for _ in range(k):
            if self.pos >= len(self.order):
                self.reshuffle()
            out.append(self.records[self.order[self.pos]])
            self.pos += 1
        return out


class Trainer:
    """Owns the banks, per-domain optimizers, fake pools and the RNG stream.

    Inference users should snapshot parameters; the trainer mutates them.
    """

    def __init__(self, cfg: TrainConfig, manifest: DatasetManifest,
                 log_path: str | Path | None = None):
        if cfg.n_domains != len(manifest.domains):
            raise ConfigError(
                f"config says {cfg.n_domains} domains, manifest has "
                f"{len(manifest.domains)}")
        by_domain = manifest.by_domain()
        for name, records in by_domain.items():
            if not records:
                raise ConfigError(f"domain {name} has no images")

        self.cfg = cfg
        self.manifest = manifest
        self.domains = sorted(manifest.domains, key=lambda d: d.index)
        self.gen_bank, self.disc_bank = init_bank(cfg.network, self.domains,
                                                  cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.state = TrainState()
        self.log_path = Path(log_path) if log_path else None
        self._image_cache: dict[Path, np.ndarray] = {}

        self.gen_optimizers = {
            d.name: torch.optim.Adam(
                list(self.gen_bank.encoders[d.name].parameters())
                + list(self.gen_bank.decoders[d.name].parameters()),
                lr=cfg.base_lr, betas=cfg.adam_betas)
            for d in self.domains}
        self.disc_optimizers = {
            d.name: torch.optim.Adam(
                self.disc_bank.discriminators[d.name].parameters(),
                lr=cfg.base_lr, betas=cfg.adam_betas)
            for d in self.domains}
        self.pools = {d.name: ImagePool(cfg.pool_size, self.rng)
                      for d in self.domains}
        self._cyclers = {name: _DomainCycler(records, self.rng)
                         for name, records in by_domain.items()}

    # -- data ---------------------------------------------------------------

    def _load(self, record: ImageRecord) -> np.ndarray:
        if record.path not in self._image_cache:
            self._image_cache[record.path] = load_image(record.path)
        return self._image_cache[record.path]

    def _batch(self, records: list[ImageRecord]) -> torch.Tensor:
        return torch.stack([
            preprocess(self._load(r), self.cfg, self.rng, training=True)
            for r in records])

    # -- stepping -----------------------------------------------------------

    def _set_lr(self, lr: float) -> None:
        for opt in (*self.gen_optimizers.values(), *self.disc_optimizers.values()):
            for group in opt.param_groups:
                group["lr"] = lr

    def forward_pair(self, a_dom: DomainId, b_dom: DomainId,
                     batch_a: torch.Tensor, batch_b: torch.Tensor):
        """The bidirectional translation pass; returns every intermediate
        tensor needed by the losses, gradients attached."""
        enc_a = self.gen_bank.encoders[a_dom.name]
        enc_b = self.gen_bank.encoders[b_dom.name]
        dec_a = self.gen_bank.decoders[a_dom.name]
        dec_b = self.gen_bank.decoders[b_dom.name]

        f_a = enc_a(batch_a)
        f_b = enc_b(batch_b)
        fake_b = dec_b(f_a)          # a rendered in domain B
        fake_a = dec_a(f_b)
        f_ab = enc_b(fake_b)         # re-encoding of the translation
        f_ba = enc_a(fake_a)
        rec_a = dec_a(f_ab)          # round trip back to A
        rec_b = dec_b(f_ba)
        return f_a, f_b, fake_a, fake_b, f_ab, f_ba, rec_a, rec_b

    def train_step(self, pair: tuple[DomainId, DomainId],
                   batch_a: torch.Tensor, batch_b: torch.Tensor) -> LossBreakdown:
        cfg = self.cfg
        a_dom, b_dom = pair
        if a_dom.name == b_dom.name:
            raise ConfigError("train_step needs two distinct domains")
        weights = LossWeights(lambda1=cfg.weights.lambda1,
                              lambda2=self.state.current_lambda2)

        (f_a, f_b, fake_a, fake_b, f_ab, f_ba,
         rec_a, rec_b) = self.forward_pair(a_dom, b_dom, batch_a, batch_b)

        disc_a = self.disc_bank.discriminators[a_dom.name]
        disc_b = self.disc_bank.discriminators[b_dom.name]
        gan_ab = gan_loss_generator(disc_b(fake_b))
        gan_ba = gan_loss_generator(disc_a(fake_a))
        cyc = cycle_loss(batch_a, rec_a, batch_b, rec_b)
        fcl = feature_consistency_loss(f_a, f_ab, f_b, f_ba,
                                       metric=cfg.fcl_metric)
        breakdown = total_loss(gan_ab, gan_ba, cyc, fcl, weights)

        self.gen_optimizers[a_dom.name].zero_grad(set_to_none=True)
        self.gen_optimizers[b_dom.name].zero_grad(set_to_none=True)
        breakdown.total.backward()
        self.gen_optimizers[a_dom.name].step()
        self.gen_optimizers[b_dom.name].step()

        pooled_b = self.pools[b_dom.name].query(fake_b.detach())
        pooled_a = self.pools[a_dom.name].query(fake_a.detach())
        loss_disc_b = gan_loss_discriminator(disc_b(batch_b), disc_b(pooled_b))
        loss_disc_a = gan_loss_discriminator(disc_a(batch_a), disc_a(pooled_a))
        self.disc_optimizers[a_dom.name].zero_grad(set_to_none=True)
        self.disc_optimizers[b_dom.name].zero_grad(set_to_none=True)
        loss_disc_b.backward()
        loss_disc_a.backward()
        self.disc_optimizers[a_dom.name].step()
        self.disc_optimizers[b_dom.name].step()

        floats = breakdown.as_floats()
        disc_a_val = float(loss_disc_a.detach())
        disc_b_val = float(loss_disc_b.detach())
        if not all(math.isfinite(v) for v in
                   (floats.total, disc_a_val, disc_b_val)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {self.state.epoch} "
                f"(pair {a_dom.name}->{b_dom.name}): {floats}, "
                f"disc=({disc_a_val}, {disc_b_val})")
        self.state.loss_history.append((self.state.epoch, floats))
        return floats

    # -- epoch loop ----------------------------------------------------------

    def _iters_per_epoch(self) -> int:
        largest = max(len(c.records) for c in self._cyclers.values())
        return math.ceil(largest / self.cfg.batch_size)

    def _log_row(self, epoch: int, it: int, pair_label: str,
                 bd: LossBreakdown) -> None:
        if self.log_path is None:
            return
        new = not self.log_path.exists()
        with open(self.log_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_COLUMNS)
            writer.writerow([epoch, it, pair_label,
                             repr(bd.gan_ab), repr(bd.gan_ba), repr(bd.cycle),
                             repr(bd.feature), repr(bd.total),
                             repr(self.state.current_lr),
                             repr(self.state.current_lambda2)])

    def fit(self, out_dir: str | Path | None = None,
            checkpoint_every: int = 0) -> TrainState:
        """Run epochs from the current state to the configured total.

        Writes ``epoch_<n>.ckpt`` into ``out_dir`` every ``checkpoint_every``
        epochs (0 = final only) plus always at the end.
        """
        cfg = self.cfg
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        iters = self._iters_per_epoch()

        for epoch in range(self.state.epoch, cfg.total_epochs):
            self.state.epoch = epoch
            self.state.current_lr = lr_schedule(epoch, cfg)
            self.state.current_lambda2 = effective_lambda2(epoch, cfg)
            self._set_lr(self.state.current_lr)
            for cycler in self._cyclers.values():
                cycler.reshuffle()
            for it in range(iters):
                ia, ib = sample_domain_pair(cfg.n_domains, self.rng)
                a_dom, b_dom = self.domains[ia - 1], self.domains[ib - 1]
                batch_a = self._batch(self._cyclers[a_dom.name].take(cfg.batch_size))
                batch_b = self._batch(self._cyclers[b_dom.name].take(cfg.batch_size))
                bd = self.train_step((a_dom, b_dom), batch_a, batch_b)
                self._log_row(epoch, it, f"{a_dom.name}>{b_dom.name}", bd)
            self.state.epoch = epoch + 1
            if out_dir:
                last = self.state.epoch == cfg.total_epochs
                periodic = checkpoint_every and self.state.epoch % checkpoint_every == 0
                if last or periodic:
                    save_checkpoint(self, out_dir / f"epoch_{self.state.epoch:04d}.ckpt")
        return self.state


# --------------------------------------------------------------------------
# Checkpointing
# --------------------------------------------------------------------------

def _config_dict(cfg: TrainConfig) -> dict:
    return {
        "n_domains": cfg.n_domains,
        "network": {
            "input_size": list(cfg.network.input_size),
            "base_channels": cfg.network.base_channels,
            "downsample_stages": cfg.network.downsample_stages,
            "encoder_res_blocks": cfg.network.encoder_res_blocks,
            "decoder_res_blocks": cfg.network.decoder_res_blocks,
            "discriminator_layers": cfg.network.discriminator_layers,
        },
    }


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    """Atomic single-file archive of parameters, optimizers and RNG."""
    path = Path(path)
    payload = {
        "format": 1,
        "epoch": trainer.state.epoch,
        "config": _config_dict(trainer.cfg),
        "domains": [(d.index, d.name) for d in trainer.domains],
        "arrays": {**trainer.gen_bank.state_arrays(),
                   **trainer.disc_bank.state_arrays()},
        "optim": {
            **{f"gen/{n}": opt.state_dict()
               for n, opt in trainer.gen_optimizers.items()},
            **{f"dis/{n}": opt.state_dict()
               for n, opt in trainer.disc_optimizers.items()},
        },
        "rng": trainer.rng.bit_generator.state,
        "history": [(e, vars(bd)) for e, bd in trainer.state.loss_history],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != 1:
        raise CheckpointError(f"unrecognized checkpoint format in {path}")
    return payload


def restore_trainer(payload: dict, cfg: TrainConfig,
                    manifest: DatasetManifest,
                    log_path: str | Path | None = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint, enforcing structural compatibility
    (domain set and network shape); schedules and weights may differ."""
    want = _config_dict(cfg)
    have = payload["config"]
    if have != want:
        raise CheckpointError(
            f"checkpoint structure {have} incompatible with config {want}")
    domains = [(d.index, d.name) for d in
               sorted(manifest.domains, key=lambda d: d.index)]
    if [tuple(d) for d in payload["domains"]] != domains:
        raise CheckpointError(
            f"checkpoint domains {payload['domains']} do not match manifest "
            f"domains {domains}")

    trainer = Trainer(cfg, manifest, log_path=log_path)
    trainer.gen_bank.load_state_arrays(payload["arrays"])
    trainer.disc_bank.load_state_arrays(payload["arrays"])
    for name, opt in trainer.gen_optimizers.items():
        opt.load_state_dict(payload["optim"][f"gen/{name}"])
    for name, opt in trainer.disc_optimizers.items():
        opt.load_state_dict(payload["optim"][f"dis/{name}"])
    trainer.rng.bit_generator.state = payload["rng"]
    trainer.state.epoch = payload["epoch"]
    trainer.state.loss_history = [
        (e, LossBreakdown(**bd)) for e, bd in payload["history"]]
    return trainer


def fit(manifest: DatasetManifest, cfg: TrainConfig,
        resume_from: str | Path | None = None,
        out_dir: str | Path | None = None, checkpoint_every: int = 0,
        log_path: str | Path | None = None) -> Trainer:
    """Train from scratch or resume a checkpoint; returns the trainer with
    its banks and state."""
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if payload["epoch"] > cfg.total_epochs:
            raise CheckpointError(
                f"checkpoint is at epoch {payload['epoch']}, beyond the "
                f"configured total {cfg.total_epochs}")
        trainer = restore_trainer(payload, cfg, manifest, log_path)
    else:
        trainer = Trainer(cfg, manifest, log_path=log_path)
    trainer.fit(out_dir=out_dir, checkpoint_every=checkpoint_every)
    return trainer
