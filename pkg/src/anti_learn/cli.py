"""``anti-learn`` command line: generate, apply, train, eval and reproduce.

Every command takes ``--config FILE`` (flat ``key = value`` text) plus one flag
per config key; flags override file values. The merged config and its digest
are archived next to every output. Errors end the process with the exit code
of the error class and a one-line JSON description on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

from .config import SCHEMA, RunConfig, load_config_file, merge
from .data import (
    CLASS_WISE,
    CLASSIFICATION,
    SAMPLE_WISE,
    ImageDataset,
    PerturbBudget,
    apply_perturbation,
    load_perturbation,
    save_dataset_pair,
    save_perturbation,
    validate_budget,
)
from .desk import DeskSettings, run_desk
from .errors import AntiLearnError, ChecksumMismatch, ConfigInvalid, NoConvergence
from .evaluation import build_report, macro_iou, metric, predict, render_table
from .generators import AdvTGenConfig, EmGenConfig, SyntheticGenConfig, gen_advt, gen_em, gen_synthetic
from .ingestion import SyntheticSpec, load_medmnist_archive, load_segmentation_folder, make_synthetic
from .pgd import PgdConfig
from .predictor import build_predictor, load_checkpoint, save_checkpoint
from .training import AdvConfig, TrainConfig, train_adversarial, train_standard

logger = logging.getLogger("anti_learn")

NO_CONVERGENCE_EXIT = 4

DATA_KEYS = ("dataset", "n_train", "n_test", "noise_std", "data_seed")
COMMAND_KEYS = {
    "generate": DATA_KEYS + ("method", "eps", "scope", "seed", "block_size", "pgd_steps", "pgd_step_size",
                             "em_model_steps", "em_stop", "em_max_rounds", "em_lr", "surrogate",
                             "epochs", "batch_size", "lr", "out"),
    "apply": DATA_KEYS + ("perturbation", "quantize", "out"),
    "train": DATA_KEYS + ("perturbation", "seed", "epochs", "batch_size", "lr", "lr_milestones",
                          "momentum", "adv_eps", "adv_steps", "out"),
    "eval": DATA_KEYS + ("checkpoint", "clean_checkpoint", "out"),
    "reproduce": ("suite", "seed", "out"),
}
DEFAULT_OUT = {
    "generate": "perturbation.zip",
    "apply": "poisoned.npz",
    "train": "model.zip",
    "eval": "eval_report",
    "reproduce": "desk_report",
}
HELP = {
    "generate": "generate a perturbation artifact for a training set",
    "apply": "apply a perturbation artifact and write the poisoned train/test pair",
    "train": "train a predictor on a clean or poisoned training set",
    "eval": "evaluate a checkpoint against its clean baseline and write the report",
    "reproduce": "run the desk reproduction matrix and write the report bundle",
}


# -- helpers --------------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    name = cfg["dataset"]
    if name in ("blobs16", "shapes_seg"):
        sizes = {k: cfg[k] for k in ("n_train", "n_test", "noise_std") if cfg.get(k) is not None}
        return make_synthetic(SyntheticSpec(name, seed=cfg["data_seed"], **sizes))
    path = Path(name)
    if path.is_dir():
        return load_segmentation_folder(path)
    if path.suffix == ".npz" and path.is_file():
        return load_medmnist_archive(path)
    raise ConfigInvalid(f"dataset {name!r} is neither a synthetic name, an .npz archive nor a folder")


def archive_config(cfg: RunConfig, output: Path) -> Path:
    """Write the merged config next to ``output`` (inside it, for directories)."""
    side = output / "config.json" if output.is_dir() else output.with_name(output.name + ".config.json")
    side.write_text(cfg.canonical_json(), encoding="utf-8")
    return side


def _out(cfg: RunConfig, command: str) -> Path:
    path = Path(cfg["out"] or DEFAULT_OUT[command])
    if path.parent != Path("."):
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _arch_for(ds: ImageDataset) -> str:
    return "small_cnn" if ds.task_kind == CLASSIFICATION else "small_unet"


def _train_config(cfg: RunConfig, adv: AdvConfig | None = None) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       lr_decay_milestones=tuple(cfg.get("lr_milestones", ())),
                       momentum=cfg.get("momentum", 0.9), seed=cfg["seed"], adv=adv)


def _pgd(cfg: RunConfig, budget: PerturbBudget) -> PgdConfig | None:
    if cfg["pgd_steps"] is None and cfg["pgd_step_size"] is None:
        return None
    steps = cfg["pgd_steps"] if cfg["pgd_steps"] is not None else 10
    return PgdConfig(steps=steps, step_size=cfg["pgd_step_size"], budget=budget, seed=cfg["seed"])


# -- commands -------------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    method = cfg["method"]
    if method == "none":
        raise ConfigInvalid("generate needs --method synthetic, advt or em")
    scope = cfg["scope"]
    if scope == "auto":
        scope = CLASS_WISE if method == "synthetic" else SAMPLE_WISE
    budget = PerturbBudget.parse(cfg["eps"], scope=scope)
    train, _ = load_dataset(cfg)
    out = _out(cfg, "generate")
    start = time.perf_counter()
    trace = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoConvergence)
        if method == "synthetic":
            pset = gen_synthetic(train, budget, SyntheticGenConfig(cfg["block_size"], cfg["seed"]))
        elif method == "advt":
            if cfg["surrogate"]:
                surrogate, _ = load_checkpoint(cfg["surrogate"])
            else:
                surrogate = build_predictor("small_cnn", train.image_shape, train.num_classes, cfg["seed"])
                surrogate, _ = train_standard(surrogate, train, _train_config(cfg))
            pgd = _pgd(cfg, budget)
            pset = gen_advt(train, budget, AdvTGenConfig(surrogate, pgd=pgd) if pgd else AdvTGenConfig(surrogate))
        else:
            em_cfg = EmGenConfig(model_steps_per_round=cfg["em_model_steps"], inner_pgd=_pgd(cfg, budget),
                                 stop_train_accuracy=cfg["em_stop"], max_rounds=cfg["em_max_rounds"],
                                 scope=scope, seed=cfg["seed"], lr=cfg["em_lr"])
            pset, trace = gen_em(train, budget, em_cfg)
    wall = time.perf_counter() - start
    pset.extra = {**pset.extra, "run_config_digest": cfg.digest}
    save_perturbation(pset, out)
    archive_config(cfg, out)
    if trace is not None:
        trace.to_csv(out.with_name(out.stem + ".trace.csv"))
    report = validate_budget(pset)
    print(f"generate method={method} eps={budget.label} scope={scope} wall={wall:.1f}s "
          f"budget={'OK' if report.ok else 'VIOLATED'} max_abs={report.max_abs:.6f} "
          f"digest={pset.digest()} out={out}")
    stalled = [w for w in caught if issubclass(w.category, NoConvergence)]
    if stalled:
        _emit_error("NoConvergence", NO_CONVERGENCE_EXIT, str(stalled[0].message))
        return NO_CONVERGENCE_EXIT
    return 0


def cmd_apply(cfg: RunConfig) -> int:
    if not cfg["perturbation"]:
        raise ConfigInvalid("apply needs --perturbation")
    train, test = load_dataset(cfg)
    pset = load_perturbation(cfg["perturbation"])
    poisoned = apply_perturbation(train, pset)
    out = _out(cfg, "apply")
    save_dataset_pair(poisoned, test, out, quantize=cfg["quantize"])
    archive_config(cfg, out)
    print(f"apply method={pset.method} eps={pset.budget.label} train={len(poisoned)} "
          f"checksum={poisoned.checksum} out={out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    train, test = load_dataset(cfg)
    meta = {"dataset": train.name, "task": train.task_kind, "dataset_checksum": train.checksum,
            "test_checksum": test.checksum, "method": "none", "eps_num": 0, "eps_den": 255,
            "perturbation_digest": "", "seed": cfg["seed"], "config_digest": cfg.digest}
    if cfg["perturbation"]:
        pset = load_perturbation(cfg["perturbation"])
        train = apply_perturbation(train, pset)
        meta.update(method=pset.method, eps_num=pset.budget.eps_numerator,
                    eps_den=pset.budget.eps_denominator, perturbation_digest=pset.digest())
    eps_a = PerturbBudget.parse(cfg["adv_eps"])
    adv = AdvConfig.from_budget(eps_a, steps=cfg["adv_steps"], seed=cfg["seed"]) if eps_a.eps_numerator else None
    meta.update(regime="adv" if adv else "std", eps_a_num=eps_a.eps_numerator if adv else 0,
                eps_a_den=eps_a.eps_denominator if adv else 255)
    p = build_predictor(_arch_for(train), train.image_shape, train.num_classes, cfg["seed"])
    trainer = train_adversarial if adv else train_standard
    p, history = trainer(p, train, _train_config(cfg, adv))
    out = _out(cfg, "train")
    save_checkpoint(p, out, meta)
    history.to_csv(out.with_name(out.stem + ".history.csv"))
    archive_config(cfg, out)
    last = history.records[-1]
    print(f"train method={meta['method']} regime={meta['regime']} epochs={len(history.records)} "
          f"train_loss={last.train_loss:.4f} train_accuracy={last.train_accuracy:.4f} out={out}")
    return 0


def _check_provenance(meta: dict, train: ImageDataset, test: ImageDataset, label: str) -> None:
    if meta.get("dataset_checksum") != train.checksum or meta.get("test_checksum") != test.checksum:
        raise ChecksumMismatch(f"{label} was trained on a different dataset than the one being evaluated")


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg["checkpoint"]:
        raise ConfigInvalid("eval needs --checkpoint")
    train, test = load_dataset(cfg)
    model, meta = load_checkpoint(cfg["checkpoint"])
    _check_provenance(meta, train, test, "checkpoint")
    if cfg["clean_checkpoint"]:
        clean_model, clean_meta = load_checkpoint(cfg["clean_checkpoint"])
        _check_provenance(clean_meta, train, test, "clean checkpoint")
        if clean_meta.get("method") != "none":
            raise ConfigInvalid("clean checkpoint was trained on a perturbed set")
    elif meta.get("method") == "none":
        clean_model, clean_meta = model, meta
    else:
        raise ConfigInvalid("evaluating a poisoned checkpoint needs --clean-checkpoint")

    def score(p):
        value = metric(p, test)
        macro = macro_iou(predict(p, test.images), test.labels) if test.task_kind != CLASSIFICATION else None
        return value, macro

    poisoned, poisoned_macro = score(model)
    clean, clean_macro = (poisoned, poisoned_macro) if clean_model is model else score(clean_model)
    report = build_report(meta["dataset"], test.task_kind, meta["method"], (meta["eps_num"], meta["eps_den"]),
                          meta["regime"], (meta["eps_a_num"], meta["eps_a_den"]), clean, poisoned,
                          meta["seed"], clean_seed=clean_meta["seed"], clean_dataset=clean_meta["dataset"],
                          clean_macro=clean_macro, poisoned_macro=poisoned_macro)
    out = _out(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    text, csv_text = render_table([report])
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    (out / "table.txt").write_text(text, encoding="utf-8")
    archive_config(cfg, out)
    print(text)
    return 0


def cmd_reproduce(cfg: RunConfig) -> int:
    out = _out(cfg, "reproduce")
    # the bundle's own location is left out so reruns into other directories stay byte-identical
    run_config = {"config": {k: v for k, v in cfg.values.items() if k != "out"}, "digest": cfg.digest}
    result = run_desk(out, DeskSettings(seed=cfg["seed"]), run_config=run_config)
    print((out / "table.txt").read_text(encoding="utf-8"))
    print(f"reproduce suite={cfg['suite']} cells={len(result.reports)} "
          f"wall={result.timings['total']:.1f}s out={out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "apply": cmd_apply,
    "train": cmd_train,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
}


# -- entry point ------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigInvalid(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anti-learn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        cmd = sub.add_parser(name, help=HELP[name], description=HELP[name])
        cmd.add_argument("--config", help="flat key = value config file")
        for key in keys:
            _, default, text = SCHEMA[key]
            extra = {"nargs": "?", "const": "true"} if key == "quantize" else {}
            cmd.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                             help=f"{text} (default: {default})", **extra)
    return parser


def _emit_error(code: str, exit_code: int, message: str) -> None:
    print(json.dumps({"error": code, "exit_code": exit_code, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        keys = COMMAND_KEYS[args.command]
        file_values = load_config_file(args.config) if args.config else None
        cfg = merge(keys, file_values, {k: getattr(args, k) for k in keys})
        return COMMANDS[args.command](cfg)
    except AntiLearnError as exc:
        _emit_error(exc.code, exc.exit_code, str(exc))
        return exc.exit_code
    except OSError as exc:
        _emit_error(type(exc).__name__, 1, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
