"""ELBO assembly, KL annealing, cross-modal gating and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import kl_divergence
from .errors import ConfigError, ContractViolation, TrainingDivergence
from .model import CMLF, MODALITIES, Batch, ModelConfig, Variant, save_checkpoint, stack_over_time

log = logging.getLogger(__name__)

LOSS_TERMS = ("recon_V", "recon_T", "kl_zV", "kl_zT", "kl_yV", "kl_yT", "total")
LOG_FIELDS = ("epoch", "split") + LOSS_TERMS + ("beta", "cm_active")


@dataclass
class TrainConfig:
    variant: str = "w_cm"
    learning_rate: float = 1e-5
    epochs: int = 200
    batch_size: int = 24
    anneal_fraction: float = 0.3
    cm_activation_fraction: float = 0.25
    beta_max: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0
    n_z: int = 32
    n_y: int = 16
    hidden: int = 64
    lstm_hidden: int = 64
    conv_channels: int = 8

    def __post_init__(self):
        self.variant = Variant(self.variant).value

    def validate(self):
        positive = ("learning_rate", "epochs", "batch_size", "beta_max", "grad_clip",
                    "n_z", "n_y", "hidden", "lstm_hidden", "conv_channels")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.anneal_fraction <= 1:
            raise ConfigError(f"anneal_fraction must be in (0, 1], got {self.anneal_fraction}")
        if not 0 <= self.cm_activation_fraction < 1:
            raise ConfigError(f"cm_activation_fraction must be in [0, 1), got {self.cm_activation_fraction}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self, obs_config, prior_objects) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, n_z=self.n_z, n_y=self.n_y, hidden=self.hidden,
            lstm_hidden=self.lstm_hidden, conv_channels=self.conv_channels,
            visual_shape=obs_config.visual_shape, tactile_shape=obs_config.tactile_shape,
            prior_objects=list(prior_objects),
        )


@dataclass
class LossBreakdown:
    recon_V: torch.Tensor
    recon_T: torch.Tensor
    kl_zV: torch.Tensor
    kl_zT: torch.Tensor
    kl_yV: torch.Tensor
    kl_yT: torch.Tensor
    total: torch.Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in LOSS_TERMS}

    def check_finite(self, epoch=None):
        for k in LOSS_TERMS:
            if not torch.isfinite(getattr(self, k)).all():
                raise TrainingDivergence(f"non-finite loss term '{k}' at epoch {epoch}", term=k, epoch=epoch)


def anneal_weight(epoch: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to ``beta_max`` over ``anneal_fraction * epochs`` epochs."""
    ramp = config.anneal_fraction * config.epochs
    return config.beta_max * min(1.0, epoch / ramp)


def cm_activation_epoch(config: TrainConfig) -> int:
    return int(math.floor(config.cm_activation_fraction * config.epochs))


def cm_gate(epoch: int, config: TrainConfig) -> bool:
    if Variant(config.variant) != Variant.W_CM:
        return False
    return epoch >= cm_activation_epoch(config)


def elbo_loss(model: CMLF, batch: Batch, beta: float, cm_active: bool,
              generator: torch.Generator | None = None) -> LossBreakdown:
    """Negative ELBO averaged over the batch.

    Reconstruction uses a unit-variance Gaussian likelihood with the constant
    dropped, summed over present frames. KL sums start at the second step since
    the first beliefs come from the fixed ``N(0, I)`` initial state.
    """
    states = model.filter_rollout(batch, cm_active=cm_active, generator=generator)
    B, H = batch.B, len(states)
    zero = batch.obs_V.new_zeros(())
    z = torch.stack([s.z_sample for s in states], dim=2)  # (G, B, H, n_z)
    recon = {}
    for g, (m, obs, present) in zip((0, -1), (("V", batch.obs_V, batch.present_V),
                                              ("T", batch.obs_T, batch.present_T))):
        rec = model.decode(z[g].reshape(B * H, -1), m).reshape(B, H, -1)
        err = rec - obs[:, :H].reshape(B, H, -1)
        ll = -0.5 * (err * err).sum(-1)
        recon[m] = (ll * present[:, :H].to(ll.dtype)).sum() / B

    kl = {k: zero for k in ("kl_zV", "kl_zT", "kl_yV", "kl_yT")}
    if H > 1:
        kl_z = kl_divergence(stack_over_time(states, "z", 1), stack_over_time(states, "z_trans", 1))
        kl["kl_zV"] = kl_z[0].sum() / B
        if model.G == 2:
            kl["kl_zT"] = kl_z[1].sum() / B
        if model.variant != Variant.BASELINE:
            y = stack_over_time(states, "y", 1)
            rows = batch.rows.unsqueeze(1).expand(B, H - 1)
            for g, m in enumerate(MODALITIES[:model.G]):
                prior = model.hierarchical_prior(rows, batch.actions[:, 1:H], m)
                kl[f"kl_y{m}"] = kl_divergence(y[g], prior).sum() / B
    total = -(recon["V"] + recon["T"]) + beta * (kl["kl_zV"] + kl["kl_zT"] + kl["kl_yV"] + kl["kl_yT"])
    return LossBreakdown(recon["V"], recon["T"], kl["kl_zV"], kl["kl_zT"], kl["kl_yV"], kl["kl_yT"], total)


@dataclass
class TrainResult:
    model: CMLF
    log: list  # rows as dicts, LOG_FIELDS order
    best_epoch: int
    best_val: float
    out_dir: Path | None = None

    def rows(self, split: str) -> list:
        return [r for r in self.log if r["split"] == split]

    def series(self, term: str, split: str = "train") -> np.ndarray:
        return np.array([r[term] for r in self.rows(split)])


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, stream]).generate_state(1)[0])


def _format(row: dict) -> dict:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def build_model(config: TrainConfig, dataset) -> CMLF:
    train_objects = sorted({t.object.object_index for t in dataset.split("train")})
    torch.manual_seed(config.seed)
    return CMLF(config.model_config(dataset.config.observation, train_objects))


def train(config: TrainConfig, dataset, out_dir=None, progress: bool = False) -> TrainResult:
    """Train one model on ``dataset``'s train split, validating every epoch.

    With ``out_dir`` the per-epoch metric log (``metrics.csv``) and the
    ``best.pt`` / ``final.pt`` checkpoints are written there. A non-finite loss
    raises :class:`TrainingDivergence`; checkpoints already on disk are kept.
    """
    config.validate()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    splits = dataset.splits
    train_ids, val_ids, test_ids = set(splits["train"]), set(splits["val"]), set(splits["test"])
    if (train_ids & val_ids) or (train_ids & test_ids) or (val_ids & test_ids):
        raise ContractViolation("train/val/test splits overlap")
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if not train_set:
        raise ContractViolation("empty training split")

    model = build_model(config, dataset)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    val_batch = model.make_batch(val_set) if val_set else None
    if val_batch is not None:
        assert not (set(val_batch.traj_ids) & test_ids), "validation batch touches test trajectories"

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()

    rows, best_val, best_epoch = [], math.inf, -1
    meta = dict(seed=config.seed, train_config=config.to_dict(), dataset_config=dataset.config.to_dict())
    try:
        for epoch in range(config.epochs):
            beta = anneal_weight(epoch, config)
            cm_on = cm_gate(epoch, config)
            model.train()
            order = np.random.default_rng(_epoch_seed(config.seed, epoch, 0)).permutation(len(train_set))
            gen = torch.Generator().manual_seed(_epoch_seed(config.seed, epoch, 1))
            sums = dict.fromkeys(LOSS_TERMS, 0.0)
            for start in range(0, len(order), config.batch_size):
                batch = model.make_batch([train_set[i] for i in order[start:start + config.batch_size]])
                loss = elbo_loss(model, batch, beta, cm_on, generator=gen)
                loss.check_finite(epoch)
                opt.zero_grad()
                loss.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                for k, v in loss.values().items():
                    sums[k] += v * batch.B
            row = {"epoch": epoch, "split": "train", **{k: v / len(train_set) for k, v in sums.items()},
                   "beta": beta, "cm_active": int(cm_on)}
            rows.append(row)
            if writer:
                writer.writerow(_format(row))

            if val_batch is not None:
                model.eval()
                with torch.no_grad():
                    vgen = torch.Generator().manual_seed(_epoch_seed(config.seed, 0, 2))
                    vloss = elbo_loss(model, val_batch, beta, cm_on, generator=vgen)
                vloss.check_finite(epoch)
                vrow = {"epoch": epoch, "split": "val", **vloss.values(), "beta": beta, "cm_active": int(cm_on)}
                rows.append(vrow)
                if writer:
                    writer.writerow(_format(vrow))
                # best-validation selection only once the KL weight and gate are final
                settled = beta >= config.beta_max and (cm_on or Variant(config.variant) != Variant.W_CM)
                if settled and vrow["total"] < best_val:
                    best_val, best_epoch = vrow["total"], epoch
                    if out is not None:
                        save_checkpoint(out / "best.pt", model, epoch, **meta)
            if progress and (epoch % 10 == 0 or epoch == config.epochs - 1):
                log.info("epoch %d train %.3f beta %.2f cm %d", epoch, row["total"], beta, cm_on)
    finally:
        if fh:
            fh.close()
    if out is not None:
        save_checkpoint(out / "final.pt", model, config.epochs - 1, **meta)
    model.eval()
    return TrainResult(model, rows, best_epoch, best_val, out)
