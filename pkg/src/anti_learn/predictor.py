"""Differentiable model contract and the two reference architectures.

All public functions take channel-last numpy arrays (``B x H x W x C``) or
torch tensors of the same layout; conversion to NCHW happens here.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CLASSIFICATION, SEGMENTATION, decode_tensor, encode_tensor, read_zip, write_zip
from .errors import ConfigInvalid, CorruptArtifact, IncompatibleDims, MetadataMissing, NonFiniteLoss

ARCHS = ("small_cnn", "small_unet")
MOMENTUM = 0.9


def _block(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class SmallCNN(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.features = nn.Sequential(
            *_block(in_channels, 32), nn.MaxPool2d(2),
            *_block(32, 64), nn.MaxPool2d(2),
            *_block(64, 128),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(128, num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(self.features(x), 1))


class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(*_block(cin, cout), *_block(cout, cout))


class SmallUNet(nn.Module):
    """Two-level encoder/decoder with skip connections, 2-way per-pixel logits."""

    def __init__(self, in_channels: int, num_classes: int = 2, width: int = 20):
        super().__init__()
        w = width
        self.enc1 = _DoubleConv(in_channels, w)
        self.enc2 = _DoubleConv(w, 2 * w)
        self.bottleneck = _DoubleConv(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _DoubleConv(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _DoubleConv(2 * w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        b = self.bottleneck(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


class Predictor:
    """A network plus its identity (architecture, dims, init seed) and SGD state."""

    def __init__(self, arch: str, input_dims, num_classes: int, seed: int, net: nn.Module):
        self.arch = arch
        self.input_dims = tuple(int(d) for d in input_dims)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.net = net
        params = list(net.parameters())
        # fixed-function networks (no parameters) can be evaluated but not trained
        self.optimizer = torch.optim.SGD(params, lr=0.0, momentum=MOMENTUM) if params else None

    @property
    def task_kind(self) -> str:
        return SEGMENTATION if self.arch == "small_unet" else CLASSIFICATION

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def state(self) -> dict[str, torch.Tensor]:
        """Parameters and batch-norm buffers, keyed by name."""
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def digest(self) -> str:
        h = hashlib.sha256(self.arch.encode())
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(encode_tensor(tensor.detach().cpu().numpy()))
        return h.hexdigest()

    # -- tensor-level helpers shared with the PGD engine and training loops --

    def logits_t(self, x_nchw: torch.Tensor) -> torch.Tensor:
        return self.net(x_nchw)

    def per_sample_loss_t(self, x_nchw: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Cross-entropy per sample (pixel-averaged for segmentation)."""
        logits = self.net(x_nchw)
        losses = F.cross_entropy(logits, y, reduction="none")
        if losses.dim() > 1:
            losses = losses.flatten(1).mean(dim=1)
        return losses


def to_nchw(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images,
                        dtype=torch.float32)
    return x.permute(0, 3, 1, 2).contiguous()


def to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1).contiguous()


def label_tensor(labels) -> torch.Tensor:
    if torch.is_tensor(labels):
        return labels.long()
    return torch.as_tensor(np.asarray(labels), dtype=torch.long)


def build_predictor(arch: str, input_dims, num_classes: int, seed: int) -> Predictor:
    """Build a freshly initialized predictor; ``input_dims`` is ``(H, W, C)``."""
    if arch not in ARCHS:
        raise ConfigInvalid(f"unknown architecture {arch!r}; choose from {ARCHS}")
    h, w, c = (int(d) for d in input_dims)
    if arch == "small_cnn":
        if h < 16 or w < 16:
            raise IncompatibleDims(f"small_cnn needs H, W >= 16, got {h}x{w}")
        factory = lambda: SmallCNN(c, num_classes)
    else:
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise IncompatibleDims(f"small_unet needs H, W divisible by 4, got {h}x{w}")
        if num_classes != 2:
            raise IncompatibleDims("small_unet produces binary (2-way) masks only")
        factory = lambda: SmallUNet(c, 2)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = factory()
    net.eval()
    return Predictor(arch, (h, w, c), num_classes, seed, net)


def forward(p: Predictor, images) -> np.ndarray:
    """Evaluation-mode logits: ``B x classes`` or ``B x H x W x 2``."""
    p.net.eval()
    with torch.no_grad():
        out = p.logits_t(to_nchw(images))
    if out.dim() == 4:
        out = to_nhwc(out)
    return out.numpy()


def _check_finite(value: torch.Tensor, where: str) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLoss(f"non-finite loss ({v}) in {where}")
    return v


def loss(p: Predictor, images, labels) -> float:
    """Mean cross-entropy in evaluation mode."""
    p.net.eval()
    with torch.no_grad():
        value = p.per_sample_loss_t(to_nchw(images), label_tensor(labels)).mean()
    return _check_finite(value, "loss")


def input_gradient(p: Predictor, images, labels) -> np.ndarray:
    """Gradient of :func:`loss` with respect to the input pixels (same layout as ``images``)."""
    p.net.eval()
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32).clone().requires_grad_(True)
    value = p.per_sample_loss_t(x.permute(0, 3, 1, 2), label_tensor(labels)).mean()
    _check_finite(value, "input_gradient")
    (grad,) = torch.autograd.grad(value, x)
    return grad.numpy()


def param_step(p: Predictor, images, labels, lr: float) -> tuple[Predictor, float]:
    """One SGD-with-momentum step in training mode; returns the pre-step loss."""
    if lr < 0:
        raise ConfigInvalid("learning rate must be non-negative")
    pre, _ = param_step_t(p, to_nchw(images), label_tensor(labels), lr)
    return p, pre


def param_step_t(p: Predictor, x_nchw: torch.Tensor, y: torch.Tensor, lr: float,
                 momentum: float = MOMENTUM) -> tuple[float, torch.Tensor]:
    """Tensor-level step; returns the pre-step loss and the training-mode logits."""
    if p.optimizer is None:
        raise ConfigInvalid(f"{p.arch} network has no trainable parameters")
    p.net.train()
    for group in p.optimizer.param_groups:
        group["lr"] = lr
        group["momentum"] = momentum
    p.optimizer.zero_grad(set_to_none=True)
    logits = p.logits_t(x_nchw)
    value = F.cross_entropy(logits, y)
    pre = _check_finite(value, "param_step")
    value.backward()
    p.optimizer.step()
    p.net.eval()
    return pre, logits.detach()


def save_checkpoint(p: Predictor, path, meta: dict | None = None) -> None:
    """Zip of ``arch.json`` plus framed float32 tensors (parameters, buffers, momentum)."""
    entries = {}
    shapes = {}
    for name, tensor in p.net.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        shapes[name] = list(arr.shape)
        entries[f"tensors/{name}.bin"] = encode_tensor(arr)
    momentum = {}
    for name, param in p.net.named_parameters():
        buf = p.optimizer.state.get(param, {}).get("momentum_buffer")
        if buf is not None:
            momentum[name] = list(buf.shape)
            entries[f"momentum/{name}.bin"] = encode_tensor(buf.numpy())
    arch = {
        "arch": p.arch,
        "input_dims": list(p.input_dims),
        "num_classes": p.num_classes,
        "seed": p.seed,
        "tensors": shapes,
        "momentum": momentum,
        "meta": meta or {},
    }
    entries["arch.json"] = json.dumps(arch, sort_keys=True, indent=2).encode("utf-8")
    write_zip(path, entries)


def load_checkpoint(path) -> tuple[Predictor, dict]:
    entries = read_zip(path)
    if "arch.json" not in entries:
        raise MetadataMissing(f"{path}: arch.json missing")
    spec = json.loads(entries["arch.json"].decode("utf-8"))
    p = build_predictor(spec["arch"], spec["input_dims"], spec["num_classes"], spec["seed"])
    reference = p.net.state_dict()
    state = {}
    for name, shape in spec["tensors"].items():
        key = f"tensors/{name}.bin"
        if key not in entries or name not in reference:
            raise CorruptArtifact(f"{path}: tensor {name} missing or unexpected")
        arr = decode_tensor(entries[key]).reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(reference[name].dtype)
    p.net.load_state_dict(state)
    params = dict(p.net.named_parameters())
    for name, shape in spec.get("momentum", {}).items():
        arr = decode_tensor(entries[f"momentum/{name}.bin"]).reshape(shape)
        p.optimizer.state[params[name]]["momentum_buffer"] = torch.from_numpy(arr.copy())
    return p, spec.get("meta", {})
