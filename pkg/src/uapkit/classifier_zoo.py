"""Frozen target classifiers and their layer taps.

A handle wraps a trained torch module together with its normalization
convention. All taps take and return raw pixel-space batches (N, H, W, C);
normalization happens inside, so attack code never sees model-specific
preprocessing and max-norm budgets stay in pixel units.

Taps preserve the input container: torch tensors stay torch (keeping the
autograd graph alive for input gradients), numpy arrays come back numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io_utils
from .data import PIXEL_RANGE, ArrayDataset, load_dataset
from .errors import (ConfigurationError, ContractViolation, DependencyError,
                     TrainingError)
from .seeding import rng_for, substream_seed


class _BodyHeadNet(nn.Module):
    """Shared layout: feature body followed by a linear head."""

    def __init__(self, body: nn.Module, head: nn.Module):
        super().__init__()
        self.body = body
        self.head = head

    def forward(self, x):
        return self.head(self.body(x))

    def penultimate(self, x):
        return self.body(x)


class _ConstantNet(nn.Module):
    """Outputs fixed logits for every sample; used as a test double."""

    def __init__(self, logits: np.ndarray, in_features: int):
        super().__init__()
        k = len(logits)
        self.proj = nn.Linear(in_features, k)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.copy_(torch.as_tensor(logits, dtype=torch.float32))

    def forward(self, x):
        return self.proj(x.flatten(1))

    def penultimate(self, x):
        return x.flatten(1)


def _check_conv_shape(input_shape, arch_spec):
    h, w, _ = input_shape
    if h % 4 or w % 4 or h < 8 or w < 8:
        raise ConfigurationError(
            f"arch {arch_spec!r} needs height/width divisible by 4 and >= 8, "
            f"got {input_shape}")


def _build_linear(input_shape, num_classes):
    d = int(np.prod(input_shape))
    body = nn.Flatten()
    head = nn.Linear(d, num_classes, bias=False)
    return _BodyHeadNet(body, head), ()


def _build_mlp(input_shape, num_classes):
    d = int(np.prod(input_shape))
    body = nn.Sequential(
        nn.Flatten(),
        nn.Linear(d, 512), nn.ReLU(),
        nn.Linear(512, 128), nn.ReLU(),
    )
    return _BodyHeadNet(body, nn.Linear(128, num_classes)), ("penultimate",)


def _build_cnn_small(input_shape, num_classes):
    _check_conv_shape(input_shape, "cnn-small")
    h, w, c = input_shape
    body = nn.Sequential(
        nn.Conv2d(c, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(64 * (h // 4) * (w // 4), 128), nn.ReLU(),
    )
    return _BodyHeadNet(body, nn.Linear(128, num_classes)), ("penultimate",)


def _build_cnn_5layer(input_shape, num_classes):
    _check_conv_shape(input_shape, "cnn-5layer")
    h, w, c = input_shape
    body = nn.Sequential(
        nn.Conv2d(c, 32, 3, padding=1), nn.ReLU(),
        nn.Conv2d(32, 48, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(48, 64, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(64 * (h // 4) * (w // 4), 256), nn.ReLU(),
    )
    return _BodyHeadNet(body, nn.Linear(256, num_classes)), ("penultimate",)


_ARCHS = {
    "linear": _build_linear,
    "mlp": _build_mlp,
    "cnn-small": _build_cnn_small,
    "cnn-5layer": _build_cnn_5layer,
}


def arch_ids() -> list[str]:
    return sorted(_ARCHS)


@dataclass(frozen=True, eq=False)
class ClassifierHandle:
    """Immutable view of a frozen classifier plus its I/O conventions."""

    model_id: str
    arch_spec: str
    dataset_id: str
    seed: int
    input_shape: tuple[int, int, int]
    num_classes: int
    pixel_range: tuple[float, float]
    normalization: tuple[float, float]  # (mean, std) applied inside taps
    embedding_layer_ids: tuple[str, ...]
    accuracy: float | None
    train_accuracy: float | None
    frozen: bool
    module: nn.Module = field(repr=False)


@dataclass(frozen=True, eq=False)
class EnsembleHandle:
    """Two or more frozen classifiers attacked through their mean logits."""

    members: tuple[ClassifierHandle, ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ContractViolation("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.input_shape != first.input_shape:
                raise ContractViolation("ensemble members disagree on input shape")
            if m.num_classes != first.num_classes:
                raise ContractViolation("ensemble members disagree on class count")
        if not all(m.frozen for m in self.members):
            raise ContractViolation("ensemble members must be frozen")

    @property
    def model_id(self) -> str:
        return "ens(" + "+".join(m.model_id for m in self.members) + ")"

    @property
    def input_shape(self):
        return self.members[0].input_shape

    @property
    def num_classes(self):
        return self.members[0].num_classes

    @property
    def pixel_range(self):
        return self.members[0].pixel_range

    @property
    def frozen(self) -> bool:
        return all(m.frozen for m in self.members)


def _validate_batch(clf, batch) -> tuple[torch.Tensor, bool]:
    """Return (float32 NHWC tensor, was_numpy). Raises on shape mismatch."""
    was_numpy = isinstance(batch, np.ndarray)
    t = torch.as_tensor(batch, dtype=torch.float32) if was_numpy else batch
    if not torch.is_tensor(t):
        raise ContractViolation(f"batch must be ndarray or tensor, got {type(batch)}")
    if t.dim() != 4 or tuple(t.shape[1:]) != tuple(clf.input_shape):
        raise ContractViolation(
            f"batch shape {tuple(t.shape)} does not match "
            f"(N, {', '.join(map(str, clf.input_shape))})")
    if not clf.frozen:
        raise ContractViolation("taps require a frozen classifier handle")
    return t.float(), was_numpy


def _forward(clf: ClassifierHandle, batch_nhwc: torch.Tensor) -> torch.Tensor:
    mean, std = clf.normalization
    z = (batch_nhwc - mean) / std
    return clf.module(z.permute(0, 3, 1, 2))


def _maybe_numpy(out: torch.Tensor, was_numpy: bool):
    return out.detach().cpu().numpy() if was_numpy else out


def tap_presoftmax(clf: ClassifierHandle, batch):
    """Pre-softmax logits, one row per sample; differentiable in the batch."""
    t, was_numpy = _validate_batch(clf, batch)
    return _maybe_numpy(_forward(clf, t), was_numpy)


def tap_softmax(clf: ClassifierHandle, batch):
    """Softmax probabilities; rows sum to 1."""
    t, was_numpy = _validate_batch(clf, batch)
    return _maybe_numpy(F.softmax(_forward(clf, t), dim=1), was_numpy)


def tap_embedding(clf: ClassifierHandle, batch, layer_id: str = "softmax",
                  normalize: bool = False):
    """Per-sample features at the named layer ("softmax" is always valid).

    ``normalize`` L2-normalizes rows; intended for intermediate layers whose
    scale is not already calibrated the way probabilities are.
    """
    t, was_numpy = _validate_batch(clf, batch)
    if layer_id == "softmax":
        out = F.softmax(_forward(clf, t), dim=1)
    elif layer_id in clf.embedding_layer_ids:
        mean, std = clf.normalization
        z = (t - mean) / std
        out = clf.module.penultimate(z.permute(0, 3, 1, 2))
    else:
        raise ConfigurationError(
            f"unknown embedding layer {layer_id!r}; valid: "
            f"{list(clf.embedding_layer_ids) + ['softmax']}")
    if normalize:
        out = F.normalize(out, dim=1, eps=1e-12)
    return _maybe_numpy(out, was_numpy)


def predict_label(clf: ClassifierHandle, batch) -> np.ndarray:
    """Argmax of the softmax tap; ties resolve to the lowest class index."""
    t, _ = _validate_batch(clf, batch)
    with torch.no_grad():
        logits = _forward(clf, t).cpu().numpy()
    return np.argmax(logits, axis=1).astype(np.int64)


def ensemble_presoftmax(ens: EnsembleHandle, batch):
    """Elementwise mean of the members' pre-softmax taps."""
    outs = [tap_presoftmax(m, batch) for m in ens.members]
    if torch.is_tensor(outs[0]):
        return torch.stack(outs).mean(dim=0)
    return np.mean(np.stack(outs), axis=0)


def presoftmax_any(target, batch):
    """Logit tap that accepts either a single handle or an ensemble."""
    if isinstance(target, EnsembleHandle):
        return ensemble_presoftmax(target, batch)
    return tap_presoftmax(target, batch)


def softmax_any(target, batch):
    """Softmax over ``presoftmax_any``; for ensembles, softmax of mean logits."""
    if isinstance(target, EnsembleHandle):
        logits = ensemble_presoftmax(target, batch)
        if torch.is_tensor(logits):
            return F.softmax(logits, dim=1)
        return F.softmax(torch.as_tensor(logits), dim=1).numpy()
    return tap_softmax(target, batch)


def predict_label_any(target, batch) -> np.ndarray:
    logits = presoftmax_any(target, batch)
    if torch.is_tensor(logits):
        logits = logits.detach().cpu().numpy()
    return np.argmax(logits, axis=1).astype(np.int64)


def _accuracy(clf: ClassifierHandle, ds: ArrayDataset, batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(ds), batch_size):
        chunk = ds.images[start:start + batch_size]
        hits += int((predict_label(clf, chunk) == ds.labels[start:start + batch_size]).sum())
    return hits / len(ds)


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def train_classifier(dataset_id: str, arch_spec: str, seed: int, *,
                     epochs: int | None = None, batch_size: int = 128,
                     lr: float = 1e-3) -> ClassifierHandle:
    """Train a small classifier and return it as a frozen handle.

    Deterministic for fixed arguments: init, batch order and therefore the
    final parameters reproduce bit-for-bit on the same platform.
    """
    if arch_spec not in _ARCHS:
        raise ConfigurationError(
            f"unknown arch {arch_spec!r}; registered: {arch_ids()}")
    train = load_dataset(dataset_id, "train")
    test = load_dataset(dataset_id, "test")

    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(seed, "clf-init", dataset_id, arch_spec))
        module, embed_ids = _ARCHS[arch_spec](train.input_shape, train.num_classes)

    normalization = (127.5, 127.5)
    mean, std = normalization
    images = torch.as_tensor((train.images - mean) / std).permute(0, 3, 1, 2)
    labels = torch.as_tensor(train.labels)

    n = len(train)
    batch_size = min(batch_size, n)
    if epochs is None:
        # enough passes for ~400 optimizer steps even on tiny datasets
        epochs = max(8, math.ceil(400 * batch_size / n))

    opt = torch.optim.Adam(module.parameters(), lr=lr)
    order_rng = rng_for(seed, "clf-batches", dataset_id, arch_spec)
    module.train()
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            logits = module(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss while training {arch_spec} on {dataset_id}")
            opt.zero_grad()
            loss.backward()
            opt.step()

    _freeze(module)
    handle = ClassifierHandle(
        model_id=f"{dataset_id}-{arch_spec}-s{seed}",
        arch_spec=arch_spec,
        dataset_id=dataset_id,
        seed=seed,
        input_shape=train.input_shape,
        num_classes=train.num_classes,
        pixel_range=train.pixel_range,
        normalization=normalization,
        embedding_layer_ids=embed_ids,
        accuracy=None,
        train_accuracy=None,
        frozen=True,
        module=module,
    )
    return replace(handle,
                   accuracy=_accuracy(handle, test),
                   train_accuracy=_accuracy(handle, train))


def toy_linear_handle() -> ClassifierHandle:
    """Hand-set bias-free linear model on two-pixel inputs.

    Logits are (p0 - p1, p1 - p0) in raw pixel units, so expected outputs
    can be computed by hand in tests.
    """
    module, _ = _build_linear((2, 1, 1), 2)
    with torch.no_grad():
        module.head.weight.copy_(torch.tensor([[1.0, -1.0], [-1.0, 1.0]]))
    _freeze(module)
    return ClassifierHandle(
        model_id="toy-linear-handset",
        arch_spec="linear",
        dataset_id="toy-2class-linear",
        seed=0,
        input_shape=(2, 1, 1),
        num_classes=2,
        pixel_range=PIXEL_RANGE,
        normalization=(0.0, 1.0),
        embedding_layer_ids=(),
        accuracy=None,
        train_accuracy=None,
        frozen=True,
        module=module,
    )


def constant_logits_handle(logits, input_shape=(2, 1, 1)) -> ClassifierHandle:
    """Classifier that outputs the given logits regardless of input."""
    logits = np.asarray(logits, dtype=np.float32)
    module = _ConstantNet(logits, int(np.prod(input_shape)))
    _freeze(module)
    return ClassifierHandle(
        model_id=f"const-{'_'.join(f'{v:g}' for v in logits)}",
        arch_spec="constant",
        dataset_id="none",
        seed=0,
        input_shape=tuple(input_shape),
        num_classes=len(logits),
        pixel_range=PIXEL_RANGE,
        normalization=(0.0, 1.0),
        embedding_layer_ids=("penultimate",),
        accuracy=None,
        train_accuracy=None,
        frozen=True,
        module=module,
    )


# --- persistence ----------------------------------------------------------

def save_handle(handle: ClassifierHandle, out_dir: str | Path) -> Path:
    """Persist weights plus a deterministic manifest; returns the directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights_path = out_dir / "weights.pt"
    torch.save(handle.module.state_dict(), weights_path)
    manifest = {
        "model_id": handle.model_id,
        "arch_spec": handle.arch_spec,
        "dataset_id": handle.dataset_id,
        "seed": handle.seed,
        "input_shape": list(handle.input_shape),
        "num_classes": handle.num_classes,
        "pixel_range": list(handle.pixel_range),
        "normalization": list(handle.normalization),
        "embedding_layer_ids": list(handle.embedding_layer_ids),
        "accuracy": handle.accuracy,
        "train_accuracy": handle.train_accuracy,
        "weights_file": "weights.pt",
        "param_checksum": io_utils.state_dict_checksum(handle.module.state_dict()),
    }
    io_utils.write_json(out_dir / "manifest.json", manifest)
    return out_dir


def load_handle(model_dir: str | Path) -> ClassifierHandle:
    model_dir = Path(model_dir)
    manifest_path = model_dir / "manifest.json"
    if not manifest_path.exists():
        raise DependencyError(f"missing classifier manifest: {manifest_path}")
    m = io_utils.read_json(manifest_path)
    weights_path = model_dir / m["weights_file"]
    if not weights_path.exists():
        raise DependencyError(f"missing classifier weights: {weights_path}")
    if m["arch_spec"] not in _ARCHS:
        raise ConfigurationError(f"manifest names unknown arch {m['arch_spec']!r}")
    input_shape = tuple(m["input_shape"])
    module, embed_ids = _ARCHS[m["arch_spec"]](input_shape, m["num_classes"])
    state = torch.load(weights_path, weights_only=True)
    module.load_state_dict(state)
    if io_utils.state_dict_checksum(state) != m["param_checksum"]:
        raise DependencyError(f"checksum mismatch for {weights_path}")
    _freeze(module)
    return ClassifierHandle(
        model_id=m["model_id"],
        arch_spec=m["arch_spec"],
        dataset_id=m["dataset_id"],
        seed=m["seed"],
        input_shape=input_shape,
        num_classes=m["num_classes"],
        pixel_range=tuple(m["pixel_range"]),
        normalization=tuple(m["normalization"]),
        embedding_layer_ids=tuple(embed_ids),
        accuracy=m["accuracy"],
        train_accuracy=m["train_accuracy"],
        frozen=True,
        module=module,
    )
