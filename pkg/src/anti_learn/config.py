"""Run configuration: a flat ``key = value`` text file merged with CLI flags.

Example::

    # poison blobs16 with EM noise
    dataset = blobs16
    method = em
    eps = 16/255
    seed = 7

Blank lines and ``#`` comments are ignored. Values are typed by ``SCHEMA``;
unknown keys are rejected before any computation starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .data import config_digest
from .errors import ConfigInvalid


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _eps(text: str) -> str:
    text = str(text).strip()
    num, _, den = text.partition("/")
    num_i, den_i = int(num), int(den or 255)
    if den_i <= 0 or not 0 <= num_i <= den_i:
        raise ValueError(f"eps {text!r} outside [0, 1]")
    return f"{num_i}/{den_i}"


def _choice(*options):
    def parse(text):
        text = str(text).strip()
        if text not in options:
            raise ValueError(f"{text!r} not one of {', '.join(options)}")
        return text
    return parse


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "dataset": (str, "blobs16", "blobs16, shapes_seg, a .npz archive or a segmentation folder"),
    "n_train": (int, None, "training samples for synthetic datasets"),
    "n_test": (int, None, "test samples for synthetic datasets"),
    "noise_std": (float, None, "pixel noise for synthetic datasets"),
    "data_seed": (int, 0, "seed of the synthetic dataset"),
    "method": (_choice("none", "synthetic", "advt", "em"), "none", "perturbation method"),
    "eps": (_eps, "8/255", "perturbation radius as num/den"),
    "scope": (_choice("auto", "sample_wise", "class_wise"), "auto", "perturbation scope"),
    "seed": (int, 0, "seed for generation and training"),
    "block_size": (int, 4, "synthetic block size in pixels"),
    "pgd_steps": (int, None, "PGD steps for advt / em inner loop"),
    "pgd_step_size": (float, None, "PGD step size; default 2.5*eps/steps"),
    "em_model_steps": (int, 10, "EM model steps per round"),
    "em_stop": (float, 0.99, "EM stop train accuracy"),
    "em_max_rounds": (int, 50, "EM round limit"),
    "em_lr": (float, 0.1, "EM scratch-model learning rate"),
    "surrogate": (str, "", "checkpoint of a clean surrogate for advt (trained if empty)"),
    "epochs": (int, 20, "training epochs"),
    "batch_size": (int, 32, "training batch size"),
    "lr": (float, 0.05, "learning rate"),
    "lr_milestones": (_int_list, (), "comma-separated epochs at which lr drops 10x"),
    "momentum": (float, 0.9, "SGD momentum"),
    "adv_eps": (_eps, "0/255", "adversarial training radius; 0 means standard training"),
    "adv_steps": (int, 3, "adversarial training PGD steps"),
    "perturbation": (str, "", "perturbation artifact to apply"),
    "checkpoint": (str, "", "trained checkpoint to evaluate"),
    "clean_checkpoint": (str, "", "clean-trained checkpoint for the baseline column"),
    "quantize": (_bool, False, "store poisoned images as 8-bit (lossy)"),
    "out": (str, "", "output path"),
    "suite": (_choice("desk"), "desk", "reproduction suite"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigInvalid(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip().replace("-", "_")
        if key in raw:
            raise ConfigInvalid(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def coerce(raw: dict, allowed=None) -> dict:
    allowed = set(SCHEMA) if allowed is None else set(allowed)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, value in raw.items():
        parser = SCHEMA[key][0]
        try:
            out[key] = value if value is None else parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bad value for {key}: {exc}") from None
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict
    digest: str

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def canonical_json(self) -> str:
        return json.dumps({"config": self.values, "digest": self.digest}, sort_keys=True, indent=2) + "\n"


def merge(keys, file_values: dict | None, flag_values: dict) -> RunConfig:
    """Defaults < config file < flags, restricted to ``keys`` and schema-checked."""
    file_values = coerce(file_values or {}, keys)
    flags = coerce({k: v for k, v in flag_values.items() if v is not None}, keys)
    merged = {k: SCHEMA[k][1] for k in keys}
    merged.update(file_values)
    merged.update(flags)
    merged = {k: list(v) if isinstance(v, tuple) else v for k, v in merged.items()}
    # the output location is not part of what was computed
    return RunConfig(merged, config_digest({k: v for k, v in merged.items() if k != "out"}))
