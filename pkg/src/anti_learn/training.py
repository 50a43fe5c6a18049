"""Standard and adversarial (Madry-style) training of a predictor on a dataset.

Deliberately independent of the generators: the trainer only sees images
and labels, never how they were produced.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import torch

from .data import PerturbBudget, ImageDataset
from .errors import ConfigInvalid, NonFiniteLoss
from .pgd import MAXIMIZE, PgdConfig, pgd_batch
from .predictor import MOMENTUM, Predictor, param_step_t

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdvConfig:
    """Inner maximization used by adversarial training; ``pgd.budget`` is eps_a."""

    pgd: PgdConfig

    def __post_init__(self):
        if self.pgd.direction != MAXIMIZE:
            raise ConfigInvalid("adversarial training needs a maximizing PGD")

    @property
    def budget(self) -> PerturbBudget:
        return self.pgd.budget

    @classmethod
    def from_budget(cls, eps_a: PerturbBudget, steps: int = 3, random_start: bool = False,
                    seed: int = 0) -> "AdvConfig":
        return cls(PgdConfig(steps=steps, direction=MAXIMIZE, budget=eps_a,
                             random_start=random_start, seed=seed))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    lr_decay_milestones: tuple[int, ...] = ()
    momentum: float = MOMENTUM
    seed: int = 0
    adv: AdvConfig | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigInvalid("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigInvalid("lr must be positive")
        object.__setattr__(self, "lr_decay_milestones", tuple(sorted(self.lr_decay_milestones)))

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.lr_decay_milestones if epoch >= m)
        return self.lr * 0.1 ** drops

    def describe(self) -> dict:
        out = asdict(self)
        if self.adv is not None:
            pgd = self.adv.pgd
            out["adv"] = {"eps_a": pgd.budget.label, "steps": pgd.steps, "step_size": pgd.step_size,
                          "random_start": pgd.random_start, "seed": pgd.seed}
        out["lr_decay_milestones"] = list(self.lr_decay_milestones)
        return out


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    steps: int
    train_loss: float
    train_accuracy: float
    adv_loss: float | None = None
    clean_loss: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return sum(r.steps for r in self.records)

    def to_csv(self, path) -> None:
        cols = list(EpochRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.records:
                writer.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) for c in cols])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for one epoch from a stream derived from ``(seed, epoch)`` alone."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch), int(batch)]).generate_state(1, np.uint64)[0])


def _correct(logits: torch.Tensor, y: torch.Tensor) -> tuple[int, int]:
    pred = logits.argmax(dim=1)
    return int((pred == y).sum()), y.numel()


def _train(p: Predictor, ds: ImageDataset, cfg: TrainConfig) -> tuple[Predictor, History]:
    if len(ds) == 0:
        raise ConfigInvalid("cannot train on an empty dataset")
    if p.task_kind != ds.task_kind:
        raise ConfigInvalid(f"{p.arch} cannot train on a {ds.task_kind} dataset")
    x_all = torch.from_numpy(ds.images)
    y_all = torch.from_numpy(ds.labels).long()
    history = History()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = epoch_order(cfg.seed, epoch, len(ds))
        loss_sum = correct = total = steps = 0
        adv_sum = clean_sum = 0.0
        for b, start in enumerate(range(0, len(ds), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if cfg.adv is not None:
                pgd = cfg.adv.pgd.replace(seed=_batch_seed(cfg.adv.pgd.seed, epoch, b))
                out = pgd_batch(p, x, y, pgd, sample_ids=idx)
                if not bool((out.best_losses >= out.start_losses).all()):
                    raise AssertionError("adversarial batch loss fell below its starting loss")
                adv_sum += float(out.best_losses.sum())
                clean_sum += float(out.start_losses.sum())
                x = torch.clamp(x + out.delta, 0.0, 1.0)
            try:
                batch_loss, logits = param_step_t(p, x.permute(0, 3, 1, 2), y, lr, cfg.momentum)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"{exc} (epoch {epoch}, batch {b})") from None
            loss_sum += batch_loss * len(idx)
            c, t = _correct(logits, y)
            correct += c
            total += t
            steps += 1
        n = len(ds)
        rec = EpochRecord(epoch, lr, steps, loss_sum / n, correct / total)
        if cfg.adv is not None:
            rec.adv_loss, rec.clean_loss = adv_sum / n, clean_sum / n
        history.records.append(rec)
        logger.debug("epoch %d loss %.4f acc %.3f", epoch, rec.train_loss, rec.train_accuracy)
    return p, history


def train_standard(p: Predictor, train_ds: ImageDataset, cfg: TrainConfig) -> tuple[Predictor, History]:
    if cfg.adv is not None:
        raise ConfigInvalid("train_standard got an adversarial config; use train_adversarial")
    return _train(p, train_ds, cfg)


def train_adversarial(p: Predictor, train_ds: ImageDataset, cfg: TrainConfig) -> tuple[Predictor, History]:
    if cfg.adv is None:
        raise ConfigInvalid("train_adversarial needs cfg.adv")
    return _train(p, train_ds, cfg)


def half_budget(eps_u: PerturbBudget) -> PerturbBudget:
    return eps_u.scaled(Fraction(1, 2))
