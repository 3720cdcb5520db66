"""Latent-to-UAP generative model and its training objectives.

The generator maps latent vectors with components in [-1, 1] to additive
perturbations whose max-norm never exceeds xi: the last layer is a tanh
scaled by xi, so the bound holds by construction at every checkpoint.

Training minimizes fooling + lambda * diversity over a class-impression
dataset. The fooling term drives the perturbed prediction away from the
clean label; the diversity term pushes apart the embeddings of the same
impression perturbed by two different latent draws, which keeps the model
from collapsing onto a single perturbation.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import io_utils
from .classifier_zoo import (ClassifierHandle, EnsembleHandle, softmax_any,
                             predict_label_any, tap_embedding)
from .errors import (ConfigurationError, ContractViolation, DependencyError,
                     TrainingError)
from .impressions import ImpressionDataset
from .seeding import substream_seed

_LOG_EPS = 1e-6
_LATENT_SLACK = 1e-6


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture descriptor for the perturbation generator."""

    kind: str = "deconv"  # "deconv" for square power-of-two images, else "dense"
    latent_dim: int = 10
    xi: float = 10.0
    channels: tuple[int, ...] = (256, 128, 64, 32)  # deconv stage widths
    hidden: tuple[int, ...] = (64, 64)  # dense fallback widths

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ContractViolation("latent_dim must be >= 1")
        if self.xi < 0:
            raise ContractViolation("xi must be nonnegative")
        if self.kind not in ("deconv", "dense"):
            raise ConfigurationError(f"unknown generator kind {self.kind!r}")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Generator training settings; defaults follow the desk-scale setup."""

    batch_size: int = 32
    lam: float = 1.0
    distance_metric: str = "cosine"  # or "euclidean"
    embedding_layer: str = "softmax"
    pairing_mode: str = "per-impression-pair"  # or "all-pairs"
    group_size: int = 4  # latents per impression in all-pairs mode
    epochs: int = 50
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    normalize_embeddings: bool = False

    def validate(self) -> None:
        if self.lam < 0:
            raise ContractViolation("lambda must be nonnegative")
        if self.lam > 0 and self.batch_size < 2:
            raise ContractViolation("batch_size must be >= 2 with diversity enabled")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractViolation("batch_size and epochs must be >= 1")
        if self.distance_metric not in ("cosine", "euclidean"):
            raise ConfigurationError(f"unknown metric {self.distance_metric!r}")
        if self.pairing_mode not in ("per-impression-pair", "all-pairs"):
            raise ConfigurationError(f"unknown pairing mode {self.pairing_mode!r}")
        if self.pairing_mode == "all-pairs" and self.group_size < 2:
            raise ContractViolation("group_size must be >= 2 in all-pairs mode")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class _DeconvGenerator(nn.Module):
    """Stack of stride-2 deconvolutions from a 1x1 latent map up to the image."""

    def __init__(self, latent_dim, out_shape, channels, xi):
        super().__init__()
        h, w, c = out_shape
        stages = int(math.log2(h))
        if h != w or 2 ** stages != h:
            raise ConfigurationError(
                f"deconv generator needs square power-of-two images, got {out_shape}")
        if len(channels) < stages - 1:
            raise ConfigurationError(
                f"need at least {stages - 1} channel widths for {stages} stages")
        widths = list(channels[-(stages - 1):])
        layers = []
        prev = latent_dim
        for width in widths:
            layers += [nn.ConvTranspose2d(prev, width, 4, 2, 1),
                       nn.BatchNorm2d(width), nn.ReLU()]
            prev = width
        layers.append(nn.ConvTranspose2d(prev, c, 4, 2, 1))
        self.stack = nn.Sequential(*layers)
        self.xi = xi

    def forward(self, z):
        maps = self.stack(z.view(z.shape[0], -1, 1, 1))
        return torch.tanh(maps).permute(0, 2, 3, 1) * self.xi


class _DenseGenerator(nn.Module):
    """MLP generator for shapes the deconv stack cannot reach (tiny images)."""

    def __init__(self, latent_dim, out_shape, hidden, xi):
        super().__init__()
        self.out_shape = tuple(out_shape)
        layers = []
        prev = latent_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        layers.append(nn.Linear(prev, int(np.prod(out_shape))))
        self.stack = nn.Sequential(*layers)
        self.xi = xi

    def forward(self, z):
        flat = self.stack(z)
        return torch.tanh(flat).view(z.shape[0], *self.out_shape) * self.xi


@dataclass(eq=False)
class GeneratorModel:
    """Trained generator plus the metadata needed to reuse it."""

    module: nn.Module
    latent_dim: int
    xi: float
    input_shape: tuple[int, int, int]
    spec: GeneratorSpec
    trained_against: tuple[str, ...] = ()
    losses: tuple[dict, ...] = ()
    aborted: bool = False


@dataclass(frozen=True)
class Perturbation:
    """A single UAP; max-abs entry is bounded by xi via the tanh output."""

    values: np.ndarray  # (H, W, C) float32
    xi: float
    source_z: np.ndarray


def build_generator(input_shape, spec: GeneratorSpec, seed: int = 0) -> GeneratorModel:
    """Construct an untrained generator with seeded initialization."""
    spec.validate()
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(seed, "gen-init", spec.kind))
        if spec.kind == "deconv":
            module = _DeconvGenerator(spec.latent_dim, input_shape,
                                      spec.channels, spec.xi)
        else:
            module = _DenseGenerator(spec.latent_dim, input_shape,
                                     spec.hidden, spec.xi)
    return GeneratorModel(module=module, latent_dim=spec.latent_dim, xi=spec.xi,
                          input_shape=tuple(input_shape), spec=spec)


def sample_latent(rng: np.random.Generator, count: int, latent_dim: int) -> np.ndarray:
    """(count, latent_dim) i.i.d. uniform components in [-1, 1]."""
    if count < 1:
        raise ContractViolation("count must be >= 1")
    return rng.uniform(-1.0, 1.0, size=(count, latent_dim)).astype(np.float32)


def _check_latent(G: GeneratorModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2 or z.shape[1] != G.latent_dim:
        raise ContractViolation(
            f"latent shape {z.shape} does not match latent_dim {G.latent_dim}")
    if np.abs(z).max() > 1.0 + _LATENT_SLACK:
        raise ContractViolation("latent components must lie in [-1, 1]")
    return z


def generate_uaps(G: GeneratorModel, z_batch) -> np.ndarray:
    """Forward a latent batch in eval mode; returns (K, H, W, C) float32."""
    z = _check_latent(G, z_batch)
    was_training = G.module.training
    G.module.eval()
    try:
        with torch.no_grad():
            out = G.module(torch.as_tensor(z))
    finally:
        G.module.train(was_training)
    return out.numpy().astype(np.float32)


def generate_uap(G: GeneratorModel, z) -> Perturbation:
    """Deterministic forward pass for a single latent vector."""
    z = _check_latent(G, z)
    if z.shape[0] != 1:
        raise ContractViolation("generate_uap takes a single latent vector")
    values = generate_uaps(G, z)[0]
    return Perturbation(values=values, xi=G.xi, source_z=z[0].copy())


def _as_image_tensor(arr, input_shape, name) -> torch.Tensor:
    t = torch.as_tensor(arr, dtype=torch.float32) if isinstance(arr, np.ndarray) else arr
    if t.dim() != 4 or tuple(t.shape[1:]) != tuple(input_shape):
        raise ContractViolation(
            f"{name} shape {tuple(t.shape)} does not match (N, "
            f"{', '.join(map(str, input_shape))})")
    return t


def fooling_loss(target: ClassifierHandle | EnsembleHandle, x, v_batch,
                 eps: float = _LOG_EPS):
    """Mean of -log(1 - p_c) over the batch, where c is the clean label.

    p_c is the softmax confidence assigned to the clean label after adding
    the perturbation (pixel-clamped). The log argument is floored at eps so
    the loss stays finite as p_c approaches one and nonnegative everywhere.
    Differentiable in v; the clean labels carry no gradient.
    """
    x_t = _as_image_tensor(x, target.input_shape, "x")
    v_t = _as_image_tensor(v_batch, target.input_shape, "v_batch")
    if x_t.shape[0] != v_t.shape[0]:
        raise ContractViolation("x and v_batch must have the same batch size")
    labels = predict_label_any(target, x_t.detach().numpy())
    adv = torch.clamp(x_t + v_t, *target.pixel_range)
    probs = softmax_any(target, adv)
    p_c = probs[torch.arange(len(labels)), torch.as_tensor(labels)]
    loss = -torch.log(torch.clamp(1.0 - p_c, min=eps))
    out = loss.mean()
    return out if torch.is_tensor(v_batch) else float(out)


def embedding_distance(e_a, e_b, metric: str = "cosine"):
    """Row-wise distance between two embedding batches.

    Cosine distance is 1 - cosine similarity; on probability vectors it
    lies in [0, 1]. Euclidean is the plain L2 norm of the difference.
    """
    a = torch.as_tensor(e_a, dtype=torch.float32) if isinstance(e_a, np.ndarray) else e_a
    b = torch.as_tensor(e_b, dtype=torch.float32) if isinstance(e_b, np.ndarray) else e_b
    if a.shape != b.shape:
        raise ContractViolation("embedding batches must have matching shapes")
    if metric == "cosine":
        d = 1.0 - F.cosine_similarity(a, b, dim=1, eps=1e-12)
    elif metric == "euclidean":
        d = torch.linalg.vector_norm(a - b, dim=1)
    else:
        raise ConfigurationError(f"unknown metric {metric!r}")
    return d.numpy() if isinstance(e_a, np.ndarray) else d


def _embed(target, batch, layer: str, normalize: bool):
    if isinstance(target, EnsembleHandle):
        if layer != "softmax":
            raise ConfigurationError("ensemble embeddings support only 'softmax'")
        out = softmax_any(target, batch)
        return F.normalize(out, dim=1, eps=1e-12) if normalize else out
    return tap_embedding(target, batch, layer_id=layer, normalize=normalize)


def diversity_loss(target, x, v_first, v_second, *, metric: str = "cosine",
                   embedding_layer: str = "softmax", normalize: bool = False):
    """Negative sum of embedding distances over per-impression pairs.

    Each impression x_n contributes one unordered pair: the distance between
    the embeddings of x_n + v_first[n] and x_n + v_second[n]. Zero when the
    paired perturbations coincide; at most zero for nonnegative metrics.
    """
    x_t = _as_image_tensor(x, target.input_shape, "x")
    if x_t.shape[0] < 2:
        raise ContractViolation("diversity loss needs a batch of at least 2")
    va = _as_image_tensor(v_first, target.input_shape, "v_first")
    vb = _as_image_tensor(v_second, target.input_shape, "v_second")
    if not (x_t.shape[0] == va.shape[0] == vb.shape[0]):
        raise ContractViolation("x and perturbation batches must align")
    lo, hi = target.pixel_range
    e_a = _embed(target, torch.clamp(x_t + va, lo, hi), embedding_layer, normalize)
    e_b = _embed(target, torch.clamp(x_t + vb, lo, hi), embedding_layer, normalize)
    out = -embedding_distance(e_a, e_b, metric).sum()
    return out if torch.is_tensor(v_first) else float(out)


def diversity_loss_all_pairs(target, x, v_group, *, metric: str = "cosine",
                             embedding_layer: str = "softmax",
                             normalize: bool = False):
    """Full pairwise variant: every unordered pair of the K group members,
    summed over each impression in the batch (pairs counted once)."""
    x_t = _as_image_tensor(x, target.input_shape, "x")
    if x_t.shape[0] < 2:
        raise ContractViolation("diversity loss needs a batch of at least 2")
    v_t = torch.as_tensor(v_group, dtype=torch.float32) \
        if isinstance(v_group, np.ndarray) else v_group
    if v_t.dim() != 4 or tuple(v_t.shape[1:]) != tuple(target.input_shape):
        raise ContractViolation("v_group must be (K, H, W, C)")
    k = v_t.shape[0]
    if k < 2:
        raise ContractViolation("all-pairs diversity needs at least 2 perturbations")
    n = x_t.shape[0]
    lo, hi = target.pixel_range
    # embed all N*K perturbed samples in one pass
    adv = torch.clamp(x_t.unsqueeze(1) + v_t.unsqueeze(0), lo, hi)
    emb = _embed(target, adv.reshape(n * k, *target.input_shape),
                 embedding_layer, normalize)
    emb = emb.reshape(n, k, -1)
    total = emb.new_zeros(())
    for i in range(k):
        for j in range(i + 1, k):
            total = total + embedding_distance(emb[:, i], emb[:, j], metric).sum()
    out = -total
    return out if torch.is_tensor(v_group) else float(out)


def total_loss(l_fool, l_div, lam: float):
    """Fooling plus lambda-weighted diversity."""
    if lam < 0:
        raise ContractViolation("lambda must be nonnegative")
    return l_fool + lam * l_div


def train_generator(target: ClassifierHandle | EnsembleHandle,
                    impressions: ImpressionDataset, cfg: TrainConfig,
                    spec: GeneratorSpec | None = None,
                    out_dir: str | Path | None = None) -> GeneratorModel:
    """Fit the generator on an impression dataset against a frozen target.

    Per-impression-pair mode draws two latents per impression and pairs
    their perturbations for the diversity term; all-pairs mode draws a
    shared group of latents and sums over every unordered pair. On a
    non-finite loss the last completed epoch's weights are restored and the
    model is returned with ``aborted=True``.
    """
    cfg.validate()
    if len(impressions) == 0:
        raise ContractViolation("impression dataset is empty")
    if not target.frozen:
        raise ContractViolation("training requires a frozen target")
    spec = spec or GeneratorSpec()
    G = build_generator(target.input_shape, spec, seed=cfg.seed)
    module = G.module
    module.train()

    images = torch.as_tensor(impressions.images(), dtype=torch.float32)
    n = len(impressions)
    batch_size = min(cfg.batch_size, n)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate,
                           betas=cfg.betas)
    rng = np.random.default_rng(substream_seed(cfg.seed, "gen-train"))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        (out_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    last_good = copy.deepcopy(module.state_dict())
    aborted = False
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        sums = {"fooling": 0.0, "diversity": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if cfg.lam > 0 and len(idx) < 2:
                continue  # tail batch too small for the pairwise term
            x = images[idx]
            b = len(idx)
            if cfg.pairing_mode == "per-impression-pair":
                z = sample_latent(rng, 2 * b, G.latent_dim)
                v = module(torch.as_tensor(z))
                l_fool = fooling_loss(target, torch.cat([x, x]), v)
                l_div = (diversity_loss(
                    target, x, v[:b], v[b:], metric=cfg.distance_metric,
                    embedding_layer=cfg.embedding_layer,
                    normalize=cfg.normalize_embeddings)
                    if cfg.lam > 0 else torch.zeros(()))
            else:
                z = sample_latent(rng, cfg.group_size, G.latent_dim)
                v = module(torch.as_tensor(z))
                reps = x.repeat_interleave(cfg.group_size, dim=0)
                l_fool = fooling_loss(target, reps, v.repeat(b, 1, 1, 1))
                l_div = (diversity_loss_all_pairs(
                    target, x, v, metric=cfg.distance_metric,
                    embedding_layer=cfg.embedding_layer,
                    normalize=cfg.normalize_embeddings)
                    if cfg.lam > 0 else torch.zeros(()))
            loss = total_loss(l_fool, l_div, cfg.lam)
            if not torch.isfinite(loss):
                aborted = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["fooling"] += float(l_fool)
            sums["diversity"] += float(l_div)
            sums["total"] += float(loss)
            batches += 1
        if aborted:
            if not history:
                raise TrainingError("non-finite loss in the first epoch")
            module.load_state_dict(last_good)
            break
        entry = {"epoch": epoch,
                 **{k: sums[k] / max(batches, 1) for k in sums}}
        history.append(entry)
        last_good = copy.deepcopy(module.state_dict())
        if out_path is not None:
            torch.save(module.state_dict(),
                       out_path / "checkpoints" / f"epoch_{epoch:04d}.pt")
            _write_loss_csv(out_path / "losses.csv", history)

    module.eval()
    if isinstance(target, EnsembleHandle):
        trained_against = tuple(m.model_id for m in target.members)
    else:
        trained_against = (target.model_id,)
    return GeneratorModel(module=module, latent_dim=G.latent_dim, xi=G.xi,
                          input_shape=G.input_shape, spec=spec,
                          trained_against=trained_against,
                          losses=tuple(history), aborted=aborted)


# --- persistence ----------------------------------------------------------

def _write_loss_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "fooling", "diversity",
                                               "total"])
        writer.writeheader()
        writer.writerows(history)


def save_generator(G: GeneratorModel, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(G.module.state_dict(), out_dir / "weights.pt")
    _write_loss_csv(out_dir / "losses.csv", list(G.losses))
    io_utils.write_json(out_dir / "manifest.json", {
        "latent_dim": G.latent_dim,
        "xi": G.xi,
        "input_shape": list(G.input_shape),
        "spec": G.spec.as_dict(),
        "trained_against": list(G.trained_against),
        "aborted": G.aborted,
        "weights_file": "weights.pt",
        "param_checksum": io_utils.state_dict_checksum(G.module.state_dict()),
        "final_losses": G.losses[-1] if G.losses else None,
    })
    return out_dir


def load_generator(in_dir: str | Path) -> GeneratorModel:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise DependencyError(f"missing generator manifest: {manifest_path}")
    m = io_utils.read_json(manifest_path)
    spec_kwargs = {k: tuple(v) if isinstance(v, list) else v
                   for k, v in m["spec"].items()}
    spec = GeneratorSpec(**spec_kwargs)
    G = build_generator(tuple(m["input_shape"]), spec)
    weights_path = in_dir / m["weights_file"]
    if not weights_path.exists():
        raise DependencyError(f"missing generator weights: {weights_path}")
    state = torch.load(weights_path, weights_only=True)
    if io_utils.state_dict_checksum(state) != m["param_checksum"]:
        raise DependencyError(f"checksum mismatch for {weights_path}")
    G.module.load_state_dict(state)
    G.module.eval()
    history = []
    losses_path = in_dir / "losses.csv"
    if losses_path.exists():
        with open(losses_path, newline="") as f:
            for row in csv.DictReader(f):
                history.append({"epoch": int(row["epoch"]),
                                **{k: float(row[k])
                                   for k in ("fooling", "diversity", "total")}})
    return GeneratorModel(module=G.module, latent_dim=G.latent_dim, xi=G.xi,
                          input_shape=G.input_shape, spec=spec,
                          trained_against=tuple(m["trained_against"]),
                          losses=tuple(history), aborted=m["aborted"])
