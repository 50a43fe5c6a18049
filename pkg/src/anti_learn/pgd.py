"""L-infinity projection and best-iterate sign-gradient PGD.

Used for adversarial-targeted noise, the inner step of error-minimizing
noise, and the inner maximization of adversarial training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import PerturbBudget
from .errors import ConfigInvalid, NonFiniteLoss
from .predictor import Predictor, label_tensor

MINIMIZE = "minimize"
MAXIMIZE = "maximize"
MAX_STEPS = 10000


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 10
    step_size: float | None = None
    direction: str = MINIMIZE
    budget: PerturbBudget = field(default_factory=lambda: PerturbBudget(8))
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.direction not in (MINIMIZE, MAXIMIZE):
            raise ConfigInvalid(f"direction must be minimize or maximize, got {self.direction!r}")
        if not 0 <= self.steps <= MAX_STEPS:
            raise ConfigInvalid(f"steps must lie in [0, {MAX_STEPS}]")
        eps = self.budget.eps
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * eps / self.steps if self.steps else 0.0)
        # a zero step is meaningful only when no step is taken or the ball is a point
        if self.step_size < 0 or (eps > 0 and self.steps > 0 and self.step_size == 0):
            raise ConfigInvalid("step_size must be positive")
        if eps > 0 and self.step_size > 2 * eps * (1 + 1e-9):
            raise ConfigInvalid(f"step_size {self.step_size:.5g} exceeds 2*eps ({2 * eps:.5g})")

    @property
    def eps(self) -> float:
        return self.budget.eps

    def replace(self, **changes) -> "PgdConfig":
        fields = dict(steps=self.steps, step_size=self.step_size, direction=self.direction,
                      budget=self.budget, random_start=self.random_start, seed=self.seed)
        # the default step scales with eps/steps, so re-derive it when either really changes
        if any(k in changes and changes[k] != fields[k] for k in ("budget", "steps")):
            fields["step_size"] = None
        fields.update(changes)
        return PgdConfig(**fields)


def project_linf(delta, eps: float):
    """Elementwise clamp to ``[-eps, eps]`` (numpy arrays or torch tensors)."""
    if eps < 0:
        raise ConfigInvalid("eps must be non-negative")
    if torch.is_tensor(delta):
        return torch.clamp(delta, -eps, eps)
    return np.clip(delta, -eps, eps).astype(np.asarray(delta).dtype, copy=False)


def clip_valid(x):
    if torch.is_tensor(x):
        return torch.clamp(x, 0.0, 1.0)
    return np.clip(x, 0.0, 1.0).astype(np.asarray(x).dtype, copy=False)


def _keep_valid(delta: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    # clamp delta to [-x, 1-x]: leaves delta bit-exact wherever x + delta is already in range
    return torch.maximum(torch.minimum(delta, 1.0 - x), -x)


def random_start(shape, eps: float, seed: int, sample_ids) -> torch.Tensor:
    """Uniform start in the eps-ball, one stream per ``(seed, sample id)``."""
    out = np.empty((len(sample_ids),) + tuple(shape), np.float32)
    for row, sid in enumerate(sample_ids):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(sid)])
        out[row] = rng.uniform(-eps, eps, size=shape)
    return torch.from_numpy(out)


@dataclass
class PgdOutcome:
    delta: torch.Tensor  # NHWC
    best_losses: torch.Tensor  # per sample
    start_losses: torch.Tensor  # per sample, at delta_0

    @property
    def best_loss(self) -> float:
        return float(self.best_losses.mean())

    @property
    def start_loss(self) -> float:
        return float(self.start_losses.mean())


def pgd_batch(p: Predictor, x: torch.Tensor, y: torch.Tensor, cfg: PgdConfig,
              init_delta: torch.Tensor | None = None, sample_ids=None) -> PgdOutcome:
    """Tensor-level PGD on an NHWC batch. Samples never interact."""
    p.net.eval()
    eps = cfg.eps
    sign = -1.0 if cfg.direction == MINIMIZE else 1.0
    if init_delta is not None:
        delta = init_delta.detach().to(torch.float32).clone()
    elif cfg.random_start and eps > 0:
        ids = np.arange(x.shape[0]) if sample_ids is None else sample_ids
        delta = random_start(x.shape[1:], eps, cfg.seed, ids)
    else:
        delta = torch.zeros_like(x)
    delta = _keep_valid(project_linf(delta, eps), x)

    best_delta = delta.clone()
    best = start = None
    for t in range(cfg.steps + 1):
        last = t == cfg.steps
        xd = (x + delta).requires_grad_(not last)
        with torch.set_grad_enabled(not last):
            losses = p.per_sample_loss_t(xd.permute(0, 3, 1, 2), y)
        if not torch.isfinite(losses).all():
            raise NonFiniteLoss(
                f"non-finite loss at PGD step {t}",
                delta=best_delta if best is not None else delta,
                best_loss=float(best.mean()) if best is not None else None)
        current = losses.detach()
        if best is None:
            best, start = current.clone(), current.clone()
        else:
            better = current < best if sign < 0 else current > best
            best = torch.where(better, current, best)
            best_delta[better] = delta[better]
        if last:
            break
        (grad,) = torch.autograd.grad(losses.sum(), xd)
        delta = delta + sign * cfg.step_size * grad.sign()
        delta = _keep_valid(project_linf(delta, eps), x)
    return PgdOutcome(best_delta, best, start)


def pgd_run(p: Predictor, images, labels, cfg: PgdConfig, init_delta=None, sample_ids=None):
    """Best-iterate PGD; returns ``(delta, best_loss)`` with ``delta`` in the layout of ``images``.

    ``best_loss`` is the batch mean of each sample's best per-sample loss.
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    init = None if init_delta is None else torch.as_tensor(np.asarray(init_delta), dtype=torch.float32)
    try:
        out = pgd_batch(p, x, label_tensor(labels), cfg, init, sample_ids)
    except NonFiniteLoss as exc:
        if torch.is_tensor(exc.delta):
            exc.delta = exc.delta.numpy()
        raise
    return out.delta.numpy(), out.best_loss
