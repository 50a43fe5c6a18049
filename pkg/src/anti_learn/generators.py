"""Synthetic, adversarial-targeted and error-minimizing anti-learning noise."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import (
    CLASS_WISE,
    CLASSIFICATION,
    SAMPLE_WISE,
    SEGMENTATION,
    ImageDataset,
    PerturbBudget,
    PerturbationSet,
    config_digest,
    validate_budget,
)
from .errors import ConfigInvalid, NoConvergence, NonFiniteLoss, SegmentationUnsupported, WeakSurrogate
from .evaluation import accuracy
from .pgd import MINIMIZE, PgdConfig, clip_valid, pgd_batch, project_linf
from .predictor import Predictor, build_predictor, param_step_t
from .training import epoch_order

logger = logging.getLogger(__name__)

SWEEP_BATCH = 128


def _require_classification(ds: ImageDataset, method: str) -> None:
    if ds.task_kind != CLASSIFICATION:
        raise SegmentationUnsupported(f"{method} noise is defined for classification datasets only")


def _emit(pset: PerturbationSet) -> PerturbationSet:
    report = validate_budget(pset)
    if not report.ok:
        raise AssertionError(f"{pset.method} generator exceeded its budget by {report.max_violation:.3g}")
    return pset


# -- synthetic ------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticGenConfig:
    block_size: int = 4
    seed: int = 0


def synthetic_patterns(shape, num_classes: int, eps: float, block_size: int, seed: int) -> np.ndarray:
    """One ``+-eps`` block pattern per class, drawn from a stream seeded by ``seed ^ c``."""
    h, w, ch = shape
    if not 1 <= block_size <= min(h, w):
        raise ConfigInvalid(f"block_size must lie in [1, {min(h, w)}]")
    grid = (math.ceil(h / block_size), math.ceil(w / block_size), ch)
    n_bits = int(np.prod(grid))
    if n_bits < 63 and 2 ** n_bits < num_classes:
        raise ConfigInvalid(f"{n_bits} blocks cannot give {num_classes} distinct patterns")
    seen = set()
    patterns = np.empty((num_classes, h, w, ch), np.float32)
    for c in range(num_classes):
        rng = np.random.default_rng(seed ^ c)
        while True:
            signs = rng.integers(0, 2, size=grid, dtype=np.int8) * 2 - 1
            if signs.tobytes() not in seen:
                seen.add(signs.tobytes())
                break
        tiled = np.repeat(np.repeat(signs, block_size, axis=0), block_size, axis=1)[:h, :w]
        patterns[c] = tiled.astype(np.float32) * np.float32(eps)
    return patterns


def gen_synthetic(ds: ImageDataset, budget: PerturbBudget, cfg: SyntheticGenConfig) -> PerturbationSet:
    _require_classification(ds, "synthetic")
    if budget.scope != CLASS_WISE:
        raise ConfigInvalid("synthetic noise is class-wise; pass a class_wise budget")
    deltas = synthetic_patterns(ds.image_shape, ds.num_classes, budget.eps, cfg.block_size, cfg.seed)
    digest = config_digest({"method": "synthetic", "eps": budget.label, "scope": budget.scope,
                            "block_size": cfg.block_size, "seed": cfg.seed})
    return _emit(PerturbationSet(deltas, budget, "synthetic", cfg.seed, ds.checksum, digest))


# -- adversarial targeted -------------------------------------------------------


def next_class(labels, num_classes: int):
    return (labels + 1) % num_classes


@dataclass(frozen=True)
class AdvTGenConfig:
    surrogate: Predictor
    pgd: PgdConfig | None = None
    target_rule: str = "next_class"
    batch_size: int = SWEEP_BATCH

    def resolved_pgd(self, budget: PerturbBudget) -> PgdConfig:
        base = self.pgd or PgdConfig(steps=20)
        return base.replace(budget=budget, direction=MINIMIZE)


def gen_advt(ds: ImageDataset, budget: PerturbBudget, cfg: AdvTGenConfig) -> PerturbationSet:
    """Targeted PGD on a frozen clean surrogate, pushing each sample toward ``(y + 1) mod C``."""
    _require_classification(ds, "advt")
    if cfg.target_rule != "next_class":
        raise ConfigInvalid(f"unknown target rule {cfg.target_rule!r}")
    if budget.scope != SAMPLE_WISE:
        raise ConfigInvalid("advt noise is sample-wise")
    surrogate = cfg.surrogate
    if surrogate.num_classes != ds.num_classes:
        raise ConfigInvalid(f"surrogate has {surrogate.num_classes} classes, dataset {ds.num_classes}")
    clean_acc = accuracy(surrogate, ds)
    floor = 1.5 / ds.num_classes
    if clean_acc < floor:
        raise WeakSurrogate(f"surrogate clean accuracy {clean_acc:.3f} below floor {floor:.3f}")

    pgd = cfg.resolved_pgd(budget)
    x_all = torch.from_numpy(ds.images)
    targets = next_class(torch.from_numpy(ds.labels), ds.num_classes)
    deltas = np.zeros_like(ds.images)
    for start in range(0, len(ds), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        ids = np.arange(start, min(start + cfg.batch_size, len(ds)))
        out = pgd_batch(surrogate, x_all[sl], targets[sl], pgd, sample_ids=ids)
        deltas[sl] = out.delta.numpy()

    digest = config_digest({"method": "advt", "eps": budget.label, "target_rule": cfg.target_rule,
                            "steps": pgd.steps, "step_size": pgd.step_size,
                            "random_start": pgd.random_start, "seed": pgd.seed,
                            "surrogate": surrogate.digest()})
    extra = {"surrogate_digest": surrogate.digest(), "surrogate_clean_accuracy": clean_acc,
             "target_rule": cfg.target_rule}
    return _emit(PerturbationSet(deltas, budget, "advt", pgd.seed, ds.checksum, digest, extra))


# -- error-minimizing -----------------------------------------------------------


@dataclass(frozen=True)
class EmGenConfig:
    model_steps_per_round: int = 10
    inner_pgd: PgdConfig | None = None
    stop_train_accuracy: float = 0.99
    max_rounds: int = 50
    scope: str = SAMPLE_WISE
    seed: int = 0
    arch: str | None = None
    lr: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 < self.stop_train_accuracy <= 1.0:
            raise ConfigInvalid("stop_train_accuracy must lie in (0, 1]")
        if self.model_steps_per_round < 1 or self.max_rounds < 1:
            raise ConfigInvalid("model_steps_per_round and max_rounds must be at least 1")

    def resolved_pgd(self, budget: PerturbBudget) -> PgdConfig:
        base = self.inner_pgd or PgdConfig(steps=10)
        return base.replace(budget=budget, direction=MINIMIZE)

    def describe(self, budget: PerturbBudget) -> dict:
        pgd = self.resolved_pgd(budget)
        return {"method": "em", "eps": budget.label, "scope": self.scope, "seed": self.seed,
                "M": self.model_steps_per_round, "stop": self.stop_train_accuracy,
                "max_rounds": self.max_rounds, "arch": self.arch, "lr": self.lr,
                "batch_size": self.batch_size, "pgd_steps": pgd.steps,
                "pgd_step_size": pgd.step_size, "pgd_random_start": pgd.random_start}


@dataclass
class EmRound:
    round: int
    train_loss: float
    train_accuracy: float
    clean_loss: float


@dataclass
class EmTrace:
    rounds: list[EmRound] = field(default_factory=list)
    converged: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "train_loss", "train_accuracy"])
            for r in self.rounds:
                writer.writerow([r.round, repr(r.train_loss), repr(r.train_accuracy)])


def _batch_stream(n: int, batch_size: int, seed: int):
    epoch = 0
    while True:
        order = epoch_order(seed, epoch, n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def _sample_sweep(model, x_all, y_all, deltas, pgd, batch_size):
    """Refresh every sample-wise delta in place; returns per-sample (best, clean) losses."""
    best, clean = [], []
    for start in range(0, x_all.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        ids = np.arange(start, min(start + batch_size, x_all.shape[0]))
        out = pgd_batch(model, x_all[sl], y_all[sl], pgd, init_delta=deltas[sl], sample_ids=ids)
        deltas[sl] = out.delta
        best.append(out.best_losses)
        with torch.no_grad():
            clean.append(model.per_sample_loss_t(x_all[sl].permute(0, 3, 1, 2), y_all[sl]))
    return torch.cat(best), torch.cat(clean)


def _class_losses_and_grads(model, x_all, y_all, class_deltas, num_classes, batch_size, need_grad=True):
    loss_sum = torch.zeros(num_classes, dtype=torch.float64)
    grad_sum = torch.zeros_like(class_deltas)
    for start in range(0, x_all.shape[0], batch_size):
        x, y = x_all[start:start + batch_size], y_all[start:start + batch_size]
        xd = clip_valid(x + class_deltas[y])
        xd.requires_grad_(need_grad)
        with torch.set_grad_enabled(need_grad):
            losses = model.per_sample_loss_t(xd.permute(0, 3, 1, 2), y)
        if not torch.isfinite(losses).all():
            raise NonFiniteLoss("non-finite loss during class-wise EM sweep")
        loss_sum.index_add_(0, y, losses.detach().double())
        if need_grad:
            (grad,) = torch.autograd.grad(losses.sum(), xd)
            grad_sum.index_add_(0, y, grad)
    return loss_sum, grad_sum


def _class_sweep(model, x_all, y_all, class_deltas, pgd, num_classes, batch_size):
    """Class-wise inner minimization: sign step on the class-averaged gradient."""
    model.net.eval()
    counts = torch.bincount(y_all, minlength=num_classes).clamp(min=1)
    delta = class_deltas.clone()
    best_delta = delta.clone()
    best = start_loss = None
    for t in range(pgd.steps + 1):
        last = t == pgd.steps
        loss_sum, grad_sum = _class_losses_and_grads(model, x_all, y_all, delta, num_classes,
                                                     batch_size, need_grad=not last)
        losses = loss_sum / counts
        if best is None:
            best, start_loss = losses.clone(), losses.clone()
        else:
            better = losses < best
            best = torch.where(better, losses, best)
            best_delta[better] = delta[better]
        if last:
            break
        mean_grad = grad_sum / counts.view(-1, 1, 1, 1).float()
        delta = project_linf(delta - pgd.step_size * mean_grad.sign(), pgd.eps)
    class_deltas.copy_(best_delta)
    # per-sample losses at the chosen deltas and at zero noise, for the trace
    with torch.no_grad():
        poisoned = torch.cat([
            model.per_sample_loss_t(clip_valid(x_all[s:s + batch_size] + class_deltas[y_all[s:s + batch_size]])
                                    .permute(0, 3, 1, 2), y_all[s:s + batch_size])
            for s in range(0, x_all.shape[0], batch_size)])
        clean = torch.cat([
            model.per_sample_loss_t(x_all[s:s + batch_size].permute(0, 3, 1, 2), y_all[s:s + batch_size])
            for s in range(0, x_all.shape[0], batch_size)])
    return poisoned, clean


def _poisoned_accuracy(model, x_all, y_all, deltas, class_wise, batch_size) -> float:
    model.net.eval()
    correct = total = 0
    with torch.no_grad():
        for start in range(0, x_all.shape[0], batch_size):
            x, y = x_all[start:start + batch_size], y_all[start:start + batch_size]
            d = deltas[y] if class_wise else deltas[start:start + batch_size]
            pred = model.logits_t(clip_valid(x + d).permute(0, 3, 1, 2)).argmax(dim=1)
            correct += int((pred == y).sum())
            total += y.numel()
    return correct / max(total, 1)


def gen_em(ds: ImageDataset, budget: PerturbBudget, cfg: EmGenConfig) -> tuple[PerturbationSet, EmTrace]:
    """Alternating min-min: train a scratch model on the poisoned data, then re-minimize the noise.

    Stops once the scratch model reaches ``stop_train_accuracy`` on the poisoned
    training set; if ``max_rounds`` is hit first a ``NoConvergence`` warning is
    issued and the artifact is flagged ``converged: false``.
    """
    if budget.scope != cfg.scope:
        raise ConfigInvalid(f"budget scope {budget.scope} != generator scope {cfg.scope}")
    if ds.task_kind == SEGMENTATION and cfg.scope != SAMPLE_WISE:
        raise ConfigInvalid("segmentation EM noise is sample-wise only")
    if len(ds) == 0:
        raise ConfigInvalid("cannot generate noise for an empty dataset")
    class_wise = cfg.scope == CLASS_WISE
    arch = cfg.arch or ("small_unet" if ds.task_kind == SEGMENTATION else "small_cnn")
    model = build_predictor(arch, ds.image_shape, ds.num_classes, cfg.seed)
    pgd = cfg.resolved_pgd(budget)

    x_all = torch.from_numpy(ds.images)
    y_all = torch.from_numpy(ds.labels).long()
    shape = (ds.num_classes,) + ds.image_shape if class_wise else ds.images.shape
    deltas = torch.zeros(shape, dtype=torch.float32)
    stream = _batch_stream(len(ds), cfg.batch_size, cfg.seed)
    trace = EmTrace()

    for rnd in range(1, cfg.max_rounds + 1):
        for _ in range(cfg.model_steps_per_round):
            idx = next(stream)
            x, y = x_all[idx], y_all[idx]
            d = deltas[y] if class_wise else deltas[idx]
            param_step_t(model, clip_valid(x + d).permute(0, 3, 1, 2), y, cfg.lr)
        model.net.eval()
        if class_wise:
            poisoned, clean = _class_sweep(model, x_all, y_all, deltas, pgd, ds.num_classes, SWEEP_BATCH)
        else:
            poisoned, clean = _sample_sweep(model, x_all, y_all, deltas, pgd, SWEEP_BATCH)
        acc = _poisoned_accuracy(model, x_all, y_all, deltas, class_wise, SWEEP_BATCH)
        trace.rounds.append(EmRound(rnd, float(poisoned.mean()), acc, float(clean.mean())))
        logger.info("em round %d: poisoned loss %.4f, clean loss %.4f, acc %.3f",
                    rnd, trace.rounds[-1].train_loss, trace.rounds[-1].clean_loss, acc)
        if acc >= cfg.stop_train_accuracy:
            trace.converged = True
            break

    if not trace.converged:
        warnings.warn(f"EM noise did not reach train accuracy {cfg.stop_train_accuracy} "
                      f"within {cfg.max_rounds} rounds", NoConvergence, stacklevel=2)
    extra = {"converged": trace.converged, "rounds": len(trace.rounds),
             "final_train_accuracy": trace.rounds[-1].train_accuracy}
    pset = PerturbationSet(deltas.numpy(), budget, "em", cfg.seed, ds.checksum,
                           config_digest(cfg.describe(budget)), extra)
    return _emit(pset), trace
