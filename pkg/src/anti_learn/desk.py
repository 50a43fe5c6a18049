"""Desk-scale reproduction matrix.

Classification on ``blobs16`` (synthetic, advt and em noise at each radius)
and segmentation on ``shapes_seg`` (em noise), each poisoned set trained under
standard training and under adversarial training with ``eps_a = eps_u / 2``.
The clean column of every row is the standard-trained clean model.

Independent cells may run in worker processes (``ANTI_LEARN_WORKERS``); every
cell is seeded on its own, so the report does not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import torch

from .data import (
    CLASS_WISE,
    CLASSIFICATION,
    ImageDataset,
    PerturbationSet,
    PerturbBudget,
    apply_perturbation,
    config_digest,
    ensure_dir,
    save_perturbation,
)
from .errors import NoConvergence
from .evaluation import EvalReport, build_report, macro_iou, metric, predict, render_table
from .generators import (
    AdvTGenConfig,
    EmGenConfig,
    EmTrace,
    SyntheticGenConfig,
    gen_advt,
    gen_em,
    gen_synthetic,
)
from .ingestion import SyntheticSpec, make_synthetic
from .predictor import Predictor, build_predictor
from .training import AdvConfig, History, TrainConfig, half_budget, train_adversarial, train_standard

logger = logging.getLogger(__name__)

WORKERS_ENV = "ANTI_LEARN_WORKERS"


@dataclass(frozen=True)
class DeskSettings:
    seed: int = 0
    blobs: SyntheticSpec = field(default_factory=lambda: SyntheticSpec("blobs16", n_train=300, n_test=150))
    seg: SyntheticSpec = field(default_factory=lambda: SyntheticSpec("shapes_seg", n_train=160, n_test=100))
    cls_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, batch_size=32, lr=0.05))
    seg_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, batch_size=16, lr=0.05, lr_decay_milestones=(14,)))
    adv_steps: int = 3
    eps_values: tuple[int, ...] = (8, 16)
    cls_methods: tuple[str, ...] = ("synthetic", "advt", "em")

    def describe(self) -> dict:
        out = asdict(self)
        out["cls_train"] = self.cls_train.describe()
        out["seg_train"] = self.seg_train.describe()
        out["eps_values"] = list(self.eps_values)
        out["cls_methods"] = list(self.cls_methods)
        return out

    def digest(self) -> str:
        return config_digest(self.describe())


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _init_worker() -> None:
    torch.set_num_threads(1)
    warnings.simplefilter("ignore", NoConvergence)


def _map(fn, jobs: list, workers: int) -> list:
    """Run ``fn`` over ``jobs`` and return results in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=get_context("spawn"),
                             initializer=_init_worker) as pool:
        return list(pool.map(fn, jobs))


# -- cells ----------------------------------------------------------------------------


@dataclass
class TrainJob:
    key: str
    train: ImageDataset
    test: ImageDataset
    cfg: TrainConfig
    model_seed: int


@dataclass
class TrainResult:
    key: str
    metric: float
    macro: float | None
    history: History
    model: Predictor
    seconds: float


def _arch_for(ds: ImageDataset) -> str:
    return "small_cnn" if ds.task_kind == CLASSIFICATION else "small_unet"


def run_train_job(job: TrainJob) -> TrainResult:
    start = time.perf_counter()
    p = build_predictor(_arch_for(job.train), job.train.image_shape, job.train.num_classes, job.model_seed)
    trainer = train_standard if job.cfg.adv is None else train_adversarial
    p, history = trainer(p, job.train, job.cfg)
    value = metric(p, job.test)
    macro = None
    if job.test.task_kind != CLASSIFICATION:
        macro = macro_iou(predict(p, job.test.images), job.test.labels)
    return TrainResult(job.key, value, macro, history, p, time.perf_counter() - start)


@dataclass
class GenJob:
    key: str
    method: str
    train: ImageDataset
    budget: PerturbBudget
    seed: int
    surrogate: Predictor | None = None


@dataclass
class GenResult:
    key: str
    pset: PerturbationSet
    trace: EmTrace | None
    seconds: float


def run_gen_job(job: GenJob) -> GenResult:
    start = time.perf_counter()
    trace = None
    with warnings.catch_warnings():
        # non-convergence is recorded in the artifact metadata; the suite carries on
        warnings.simplefilter("ignore", NoConvergence)
        if job.method == "synthetic":
            pset = gen_synthetic(job.train, job.budget, SyntheticGenConfig(seed=job.seed))
        elif job.method == "advt":
            pset = gen_advt(job.train, job.budget, AdvTGenConfig(job.surrogate))
        else:
            pset, trace = gen_em(job.train, job.budget, EmGenConfig(seed=job.seed))
    return GenResult(job.key, pset, trace, time.perf_counter() - start)


# -- suite ------------------------------------------------------------------------------


@dataclass
class DeskResult:
    reports: list[EvalReport]
    out_dir: Path
    timings: dict


def _budget(method: str, num: int) -> PerturbBudget:
    return PerturbBudget(num, scope=CLASS_WISE if method == "synthetic" else "sample_wise")


def run_desk(out_dir, settings: DeskSettings | None = None, workers: int | None = None,
             run_config: dict | None = None) -> DeskResult:
    """Run the whole matrix and write the report bundle into ``out_dir``.

    Bundle: ``report.csv``, ``table.txt``, ``config.json``, per-run history and
    EM trace CSVs, and the perturbation artifacts. Wall-clock timings go to
    ``timings.json`` only, so every CSV is reproducible byte for byte.
    """
    settings = settings or DeskSettings()
    workers = workers_from_env() if workers is None else workers
    out = ensure_dir(out_dir)
    seed = settings.seed
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    cls_cfg = replace(settings.cls_train, seed=seed)
    seg_cfg = replace(settings.seg_train, seed=seed)
    data = {
        "blobs16": (make_synthetic(replace(settings.blobs, seed=seed)), cls_cfg, settings.cls_methods),
        "shapes_seg": (make_synthetic(replace(settings.seg, seed=seed)), seg_cfg, ("em",)),
    }

    # 1. clean standard-trained baselines (the blobs16 one doubles as the advt surrogate)
    clean_jobs = [TrainJob(f"{name}_clean_std", tr, te, cfg, seed)
                  for name, ((tr, te), cfg, _) in data.items()]
    clean = {r.key: r for r in _map(run_train_job, clean_jobs, workers)}

    # 2. perturbation generation
    gen_jobs = []
    for name, ((tr, _), _, methods) in data.items():
        for method in methods:
            for num in settings.eps_values:
                surrogate = clean["blobs16_clean_std"].model if method == "advt" else None
                gen_jobs.append(GenJob(f"{name}_{method}_{num}", method, tr, _budget(method, num), seed,
                                       surrogate))
    generated = {r.key: r for r in _map(run_gen_job, gen_jobs, workers)}

    # 3. training on every poisoned set, standard and adversarial
    train_jobs = []
    for name, ((tr, te), cfg, methods) in data.items():
        for method in methods:
            for num in settings.eps_values:
                poisoned = apply_perturbation(tr, generated[f"{name}_{method}_{num}"].pset)
                eps_a = half_budget(PerturbBudget(num))
                adv_cfg = replace(cfg, adv=AdvConfig.from_budget(eps_a, steps=settings.adv_steps, seed=seed))
                train_jobs.append(TrainJob(f"{name}_{method}_{num}_std", poisoned, te, cfg, seed))
                train_jobs.append(TrainJob(f"{name}_{method}_{num}_adv", poisoned, te, adv_cfg, seed))
    trained = {r.key: r for r in _map(run_train_job, train_jobs, workers)}

    # 4. reports and bundle
    reports = []
    for name, ((tr, _), _, methods) in data.items():
        base = clean[f"{name}_clean_std"]
        reports.append(build_report(name, tr.task_kind, "none", (0, 255), "std", (0, 255), base.metric,
                                    base.metric, seed, clean_macro=base.macro, poisoned_macro=base.macro))
        for method in methods:
            for num in settings.eps_values:
                eps_a = half_budget(PerturbBudget(num))
                for regime in ("std", "adv"):
                    res = trained[f"{name}_{method}_{num}_{regime}"]
                    a = (eps_a.eps_numerator, eps_a.eps_denominator) if regime == "adv" else (0, 255)
                    reports.append(build_report(
                        name, tr.task_kind, method, (num, 255), regime, a, base.metric, res.metric, seed,
                        clean_seed=seed, clean_dataset=name, clean_macro=base.macro,
                        poisoned_macro=res.macro))

    for sub in ("histories", "traces", "perturbations"):
        ensure_dir(out / sub)
    for res in list(clean.values()) + list(trained.values()):
        res.history.to_csv(out / "histories" / f"{res.key}.csv")
        timings[f"train:{res.key}"] = res.seconds
    for res in generated.values():
        save_perturbation(res.pset, out / "perturbations" / f"{res.key}.zip")
        if res.trace is not None:
            res.trace.to_csv(out / "traces" / f"{res.key}.csv")
        timings[f"generate:{res.key}"] = res.seconds

    text, csv_text = render_table(reports)
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    (out / "table.txt").write_text(text, encoding="utf-8")
    config = {"suite": "desk", "settings": settings.describe(), "settings_digest": settings.digest()}
    if run_config is not None:
        config["run"] = run_config
    (out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    timings["total"] = time.perf_counter() - t0
    (out / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return DeskResult(reports, out, timings)
