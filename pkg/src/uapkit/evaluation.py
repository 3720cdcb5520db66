"""Attack evaluation: success rates, transfer, diversity, robustness.

Success rate counts label changes on real held-out data, never on
impressions: a perturbation succeeds on a sample when the predicted label
differs from the clean prediction after pixel-clamped addition. All
operations here are pure over frozen handles except adversarial_finetune,
which returns a new handle instead of mutating its input.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import io_utils
from .classifier_zoo import (ClassifierHandle, EnsembleHandle, _accuracy,
                             predict_label_any)
from .data import ArrayDataset, load_dataset
from .errors import ContractViolation, TrainingError
from .generator import (GeneratorModel, Perturbation, TrainConfig,
                        GeneratorSpec, generate_uap, generate_uaps,
                        sample_latent, train_generator)
from .impressions import ImpressionConfig, ImpressionDataset, build_impression_dataset
from .seeding import substream_seed


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    source_id: str
    dataset_id: str
    success_rate: float  # percentage in [0, 100]
    num_samples: int
    label_histogram: tuple[int, ...]  # perturbed-prediction counts per class

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TransferMatrix:
    source_models: tuple[str, ...]
    victim_models: tuple[str, ...]
    rates: np.ndarray  # (sources, victims) percentages
    mean_per_source: np.ndarray
    z_samples: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["source\\victim", *self.victim_models, "mean"])
            for i, src in enumerate(self.source_models):
                writer.writerow([src, *[f"{r:.4f}" for r in self.rates[i]],
                                 f"{self.mean_per_source[i]:.4f}"])


@dataclass(frozen=True)
class InterpolationPoint:
    alpha: float
    perturbation: Perturbation
    success_rate: float


@dataclass(frozen=True)
class RetrainPlan:
    """Impression-synthesis arguments for retraining against a new handle."""

    per_class: int
    class_ids: tuple[int, ...]
    cfg: ImpressionConfig
    seed: int


@dataclass(frozen=True)
class RetrainResult:
    generator: GeneratorModel
    impressions: ImpressionDataset
    success_rate: float
    manifest: dict


def _uap_values(v, input_shape) -> np.ndarray:
    values = v.values if isinstance(v, Perturbation) else np.asarray(v)
    if tuple(values.shape) != tuple(input_shape):
        raise ContractViolation(
            f"perturbation shape {values.shape} does not match {input_shape}")
    return values.astype(np.float32)


def _predict_batched(clf, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [predict_label_any(clf, images[s:s + batch_size])
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out)


def _perturbed_labels(clf, dataset: ArrayDataset, values: np.ndarray) -> np.ndarray:
    adv = np.clip(dataset.images + values, *clf.pixel_range).astype(np.float32)
    return _predict_batched(clf, adv)


def success_rate(clf, dataset: ArrayDataset, v) -> float:
    """Percentage of samples whose predicted label flips when v is added."""
    if len(dataset) == 0:
        raise ContractViolation("evaluation dataset is empty")
    values = _uap_values(v, clf.input_shape)
    clean = _predict_batched(clf, dataset.images)
    pert = _perturbed_labels(clf, dataset, values)
    return 100.0 * float(np.mean(clean != pert))


def evaluate_uap(clf, dataset: ArrayDataset, v, source_id: str = "uap") -> EvalReport:
    """Success rate plus the histogram of perturbed predictions."""
    if len(dataset) == 0:
        raise ContractViolation("evaluation dataset is empty")
    values = _uap_values(v, clf.input_shape)
    clean = _predict_batched(clf, dataset.images)
    pert = _perturbed_labels(clf, dataset, values)
    hist = np.bincount(pert, minlength=clf.num_classes)
    return EvalReport(
        model_id=clf.model_id,
        source_id=source_id,
        dataset_id=dataset.dataset_id,
        success_rate=100.0 * float(np.mean(clean != pert)),
        num_samples=len(dataset),
        label_histogram=tuple(int(c) for c in hist),
    )


def random_noise_baseline(clf, dataset: ArrayDataset, xi: float, trials: int,
                          seed: int = 0) -> float:
    """Mean success rate of i.i.d. uniform noise in [-xi, xi]."""
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    rng = np.random.default_rng(substream_seed(seed, "noise-baseline"))
    rates = []
    for _ in range(trials):
        noise = rng.uniform(-xi, xi, size=clf.input_shape).astype(np.float32)
        rates.append(success_rate(clf, dataset, noise))
    return float(np.mean(rates))


def transfer_matrix(generators: list[GeneratorModel],
                    victims: list[ClassifierHandle], dataset: ArrayDataset,
                    z_samples: int = 10, seed: int = 0,
                    source_names: list[str] | None = None) -> TransferMatrix:
    """Mean success rates of sampled UAPs per (source generator, victim).

    The latent draw is re-seeded identically for every row, so duplicated
    generators produce identical rows and duplicated victims identical
    columns.
    """
    if not generators or not victims:
        raise ContractViolation("need at least one generator and one victim")
    if z_samples < 1:
        raise ContractViolation("z_samples must be >= 1")
    shape = victims[0].input_shape
    for vic in victims:
        if vic.input_shape != shape:
            raise ContractViolation("victims disagree on input shape")
    for g in generators:
        if tuple(g.input_shape) != tuple(shape):
            raise ContractViolation("generator output shape does not match victims")

    clean = {j: _predict_batched(vic, dataset.images)
             for j, vic in enumerate(victims)}
    rates = np.zeros((len(generators), len(victims)))
    for i, g in enumerate(generators):
        row_rng = np.random.default_rng(substream_seed(seed, "transfer-z"))
        uaps = generate_uaps(g, sample_latent(row_rng, z_samples, g.latent_dim))
        for j, vic in enumerate(victims):
            flips = [np.mean(_perturbed_labels(vic, dataset, u) != clean[j])
                     for u in uaps]
            rates[i, j] = 100.0 * float(np.mean(flips))
    if source_names is None:
        source_names = ["+".join(g.trained_against) or "untrained"
                        for g in generators]
    return TransferMatrix(
        source_models=tuple(source_names),
        victim_models=tuple(v.model_id for v in victims),
        rates=rates,
        mean_per_source=rates.mean(axis=1),
        z_samples=z_samples,
    )


def label_diversity(clf, dataset: ArrayDataset, uaps, coverage: float = 0.95) -> int:
    """Smallest number of labels covering the requested share of the mean
    perturbed-prediction histogram (sorted descending)."""
    if not (0.0 < coverage <= 1.0):
        raise ContractViolation("coverage must be in (0, 1]")
    if len(uaps) < 1:
        raise ContractViolation("need at least one perturbation")
    if len(dataset) == 0:
        raise ContractViolation("evaluation dataset is empty")
    hists = []
    for v in uaps:
        pert = _perturbed_labels(clf, dataset, _uap_values(v, clf.input_shape))
        hists.append(np.bincount(pert, minlength=clf.num_classes))
    mean_hist = np.mean(np.stack(hists), axis=0)
    ordered = np.sort(mean_hist)[::-1]
    cum = np.cumsum(ordered)
    threshold = coverage * cum[-1] - 1e-9
    return int(np.searchsorted(cum, threshold) + 1)


def export_uap_png(v, xi: float, path: str | Path) -> None:
    """8-bit preview rescaled from [-xi, xi] to [0, 255]; visualization only."""
    values = v.values if isinstance(v, Perturbation) else np.asarray(v)
    if xi > 0:
        scaled = (values + xi) / (2.0 * xi) * 255.0
    else:
        scaled = np.full_like(values, 127.5)
    arr = np.clip(np.round(scaled), 0, 255).astype(np.uint8)
    if arr.shape[-1] == 1:
        Image.fromarray(arr[..., 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def interpolate_eval(G: GeneratorModel, z1, z2, steps: int, clf,
                     dataset: ArrayDataset,
                     out_dir: str | Path | None = None) -> list[InterpolationPoint]:
    """Evaluate UAPs along the latent segment from z1 (alpha 0) to z2 (alpha 1).

    Alphas are evenly spaced inclusive of both endpoints, which therefore
    reproduce generate_uap(G, z1) and generate_uap(G, z2) bit-exactly.
    """
    if steps < 2:
        raise ContractViolation("steps must be >= 2")
    z1 = np.asarray(z1, dtype=np.float32).reshape(-1)
    z2 = np.asarray(z2, dtype=np.float32).reshape(-1)
    points = []
    for alpha in np.linspace(0.0, 1.0, steps):
        z = (1.0 - alpha) * z1 + alpha * z2
        pert = generate_uap(G, z)
        rate = success_rate(clf, dataset, pert)
        points.append(InterpolationPoint(float(alpha), pert, rate))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "interpolation.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["alpha", "success_rate"])
            for p in points:
                writer.writerow([f"{p.alpha:.4f}", f"{p.success_rate:.4f}"])
        for p in points:
            export_uap_png(p.perturbation, G.xi,
                           out_dir / f"uap_alpha_{p.alpha:.2f}.png")
    return points


def _mean_generator_success(clf, dataset: ArrayDataset, uaps: np.ndarray) -> float:
    clean = _predict_batched(clf, dataset.images)
    flips = [np.mean(_perturbed_labels(clf, dataset, u) != clean) for u in uaps]
    return 100.0 * float(np.mean(flips))


def adversarial_finetune(clf: ClassifierHandle, G: GeneratorModel,
                         train_dataset: ArrayDataset, epochs: int,
                         mix: float = 0.5, *, eval_dataset: ArrayDataset | None = None,
                         z_samples: int = 10, seed: int = 0, lr: float = 1e-4,
                         batch_size: int = 128):
    """Finetune a copy of the classifier on a clean/adversarial mixture.

    Every batch replaces a ``mix`` fraction of its samples with versions
    perturbed by freshly sampled UAPs (true labels kept). Returns the new
    frozen handle plus the generator's mean success rate against the old
    and new handles, measured with one shared UAP draw so epochs=0 gives
    sr_after == sr_before exactly.
    """
    if not (0.0 < mix < 1.0):
        raise ContractViolation("mix must be strictly between 0 and 1")
    if epochs < 0:
        raise ContractViolation("epochs must be >= 0")
    if len(train_dataset) == 0:
        raise ContractViolation("training dataset is empty")
    if tuple(G.input_shape) != tuple(clf.input_shape):
        raise ContractViolation("generator output shape does not match classifier")
    eval_ds = eval_dataset if eval_dataset is not None else train_dataset

    z_eval = sample_latent(np.random.default_rng(substream_seed(seed, "advft-eval-z")),
                           z_samples, G.latent_dim)
    uaps = generate_uaps(G, z_eval)
    sr_before = _mean_generator_success(clf, eval_ds, uaps)

    import copy as _copy
    module = _copy.deepcopy(clf.module)
    for p in module.parameters():
        p.requires_grad_(True)
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    rng = np.random.default_rng(substream_seed(seed, "advft-batches"))
    mean, std = clf.normalization
    lo, hi = clf.pixel_range
    n = len(train_dataset)
    bs = min(batch_size, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            x = train_dataset.images[idx].copy()
            y = torch.as_tensor(train_dataset.labels[idx])
            k = int(round(mix * len(idx)))
            if k > 0:
                z = sample_latent(rng, k, G.latent_dim)
                x[:k] = np.clip(x[:k] + generate_uaps(G, z), lo, hi)
            z_in = torch.as_tensor((x - mean) / std).permute(0, 3, 1, 2)
            loss = F.cross_entropy(module(z_in), y)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite loss during adversarial finetuning")
            opt.zero_grad()
            loss.backward()
            opt.step()

    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    new_handle = dataclasses.replace(
        clf, model_id=f"{clf.model_id}-advft{epochs}e", module=module,
        accuracy=None, train_accuracy=None)
    new_handle = dataclasses.replace(
        new_handle, accuracy=_accuracy(new_handle, eval_ds))
    sr_after = _mean_generator_success(new_handle, eval_ds, uaps)
    return new_handle, sr_before, sr_after


def retrain_against(clf_new: ClassifierHandle,
                    impressions_new: ImpressionDataset | RetrainPlan,
                    cfg: TrainConfig, *, spec: GeneratorSpec | None = None,
                    eval_dataset: ArrayDataset | None = None,
                    z_samples: int = 10) -> RetrainResult:
    """Train a fresh generator against a finetuned handle and rate it.

    Accepts either a ready impression dataset or a RetrainPlan, in which
    case impressions are synthesized from clf_new first; the composition
    equals running the two stages manually with the same seeds.
    """
    if isinstance(impressions_new, RetrainPlan):
        ds = build_impression_dataset(clf_new, impressions_new.per_class,
                                      impressions_new.class_ids,
                                      impressions_new.cfg, impressions_new.seed)
    else:
        ds = impressions_new
    G2 = train_generator(clf_new, ds, cfg, spec=spec)
    if eval_dataset is None:
        eval_dataset = load_dataset(clf_new.dataset_id, "test")
    z = sample_latent(np.random.default_rng(substream_seed(cfg.seed, "retrain-eval-z")),
                      z_samples, G2.latent_dim)
    rate = _mean_generator_success(clf_new, eval_dataset, generate_uaps(G2, z))
    manifest = {
        "finetuned_model_id": clf_new.model_id,
        "impressions_model_id": ds.model_id,
        "impressions_complete": ds.complete,
        "num_impressions": len(ds),
        "recovered_success_rate": rate,
        "z_samples": z_samples,
    }
    return RetrainResult(generator=G2, impressions=ds, success_rate=rate,
                         manifest=manifest)


def write_report(report: EvalReport, path: str | Path) -> str:
    """Canonical JSON dump; returns the content checksum."""
    return io_utils.write_json(path, report.as_dict())
