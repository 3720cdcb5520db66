"""Class-impression synthesis from a frozen classifier.

Starting from uniform noise, an image is optimized to maximize the target
class's pre-softmax activation, with augmentations applied inside the loss
so the impression stays confident under small geometric and photometric
changes. Each run stops once the softmax confidence on the clean image
reaches a per-impression target sampled uniformly from the configured
range, which spreads the dataset over easy and hard examples.

Augmentation is fully differentiable (torch warps and additive terms), so
gradients reach the underlying image. The randomness of a synthesis run is
owned by a single numpy Generator, which makes records reproducible from
their seed alone.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import io_utils
from .classifier_zoo import (ClassifierHandle, EnsembleHandle, presoftmax_any,
                             softmax_any)
from .errors import ContractViolation, DependencyError, SynthesisError
from .seeding import substream_seed


@dataclass(frozen=True)
class ImpressionConfig:
    learning_rate: float = 0.1
    max_steps: int = 2000
    confidence_range: tuple[float, float] = (0.55, 0.99)
    rotation_range_degrees: tuple[float, float] = (-5.0, 5.0)
    scale_choices: tuple[float, ...] = (0.95, 0.975, 1.0, 1.025)
    jitter_amplitude: float = 5.0
    crop_fraction: float = 0.9
    noise_amplitude: float = 10.0
    init_range: tuple[float, float] = (0.0, 255.0)
    pixel_range: tuple[float, float] = (0.0, 255.0)

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ContractViolation("max_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")
        lo, hi = self.confidence_range
        if not (0.0 < lo < hi < 1.0):
            raise ContractViolation("confidence_range must satisfy 0 < low < high < 1")
        if self.jitter_amplitude < 0 or self.noise_amplitude < 0:
            raise ContractViolation("amplitudes must be nonnegative")
        if not (0.0 < self.crop_fraction <= 1.0):
            raise ContractViolation("crop_fraction must be in (0, 1]")
        if not self.scale_choices or any(s <= 0 for s in self.scale_choices):
            raise ContractViolation("scale_choices must be positive")
        for rng_pair in (self.init_range, self.pixel_range):
            if rng_pair[0] > rng_pair[1]:
                raise ContractViolation("ranges must be (low, high)")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ClassImpressionRecord:
    image: np.ndarray  # (H, W, C) float32 within pixel range
    class_id: int
    target_confidence: float
    achieved_confidence: float
    steps_used: int
    seed: int
    model_id: str
    converged: bool
    # clean pre-softmax activation sampled every 10 steps; not persisted
    objective_trace: tuple[float, ...] | None = None


@dataclass
class ImpressionDataset:
    records: list[ClassImpressionRecord]
    model_id: str
    cfg: ImpressionConfig
    seed: int
    per_class: int
    class_ids: tuple[int, ...]
    complete: bool

    def __len__(self) -> int:
        return len(self.records)

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])


def sample_stop_confidence(rng: np.random.Generator,
                           confidence_range: tuple[float, float] = (0.55, 0.99)
                           ) -> float:
    """Uniform draw from the stop-confidence interval (zero width allowed)."""
    lo, hi = confidence_range
    if lo > hi:
        raise ContractViolation("confidence_range must be (low, high)")
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _normalized_coords(coords: torch.Tensor, size: int) -> torch.Tensor:
    # align_corners=True convention; a size-1 axis has a single center at 0
    if size == 1:
        return torch.zeros_like(coords)
    return 2.0 * coords / (size - 1) - 1.0


def _rotate_scale(image_chw: torch.Tensor, angle_deg: float,
                  scale: float) -> torch.Tensor:
    """Rotate about the center then zoom by ``scale``; exact no-op is skipped."""
    if angle_deg == 0.0 and scale == 1.0:
        return image_chw
    _, h, w = image_chw.shape
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = torch.arange(h, dtype=torch.float32)
    xs = torch.arange(w, dtype=torch.float32)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    qy, qx = (gy - cy) / scale, (gx - cx) / scale
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_x = cos_t * qx + sin_t * qy + cx
    src_y = -sin_t * qx + cos_t * qy + cy
    grid = torch.stack([_normalized_coords(src_x, w),
                        _normalized_coords(src_y, h)], dim=-1).unsqueeze(0)
    out = F.grid_sample(image_chw.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out.squeeze(0)


def _crop_resize(image_chw: torch.Tensor, rng: np.random.Generator,
                 crop_fraction: float) -> torch.Tensor:
    if crop_fraction >= 1.0:
        return image_chw
    _, h, w = image_chw.shape
    ch = max(1, round(crop_fraction * h))
    cw = max(1, round(crop_fraction * w))
    if (ch, cw) == (h, w):
        return image_chw
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image_chw[:, top:top + ch, left:left + cw].unsqueeze(0)
    out = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=True)
    return out.squeeze(0)


def augment(image, rng: np.random.Generator, cfg: ImpressionConfig):
    """Rotate, scale, crop/resize, color-jitter, then add uniform noise.

    Accepts (H, W, C) numpy arrays or torch tensors; torch input keeps the
    autograd graph so impression gradients flow through the augmentation.
    The output is clamped to the configured pixel range.
    """
    cfg.validate()
    was_numpy = isinstance(image, np.ndarray)
    t = torch.as_tensor(image, dtype=torch.float32) if was_numpy else image
    if t.dim() != 3:
        raise ContractViolation(f"augment expects (H, W, C), got {tuple(t.shape)}")
    h, w, c = t.shape
    if h == 1 and w == 1:
        raise ContractViolation("degenerate 1x1 images cannot be augmented")

    angle = float(rng.uniform(*cfg.rotation_range_degrees))
    scale = float(cfg.scale_choices[int(rng.integers(len(cfg.scale_choices)))])

    chw = t.permute(2, 0, 1)
    chw = _rotate_scale(chw, angle, scale)
    chw = _crop_resize(chw, rng, cfg.crop_fraction)
    out = chw.permute(1, 2, 0)

    if cfg.jitter_amplitude > 0:
        jitter = rng.uniform(-cfg.jitter_amplitude, cfg.jitter_amplitude, size=c)
        out = out + torch.as_tensor(jitter, dtype=torch.float32)
    if cfg.noise_amplitude > 0:
        noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude,
                            size=(h, w, c))
        out = out + torch.as_tensor(noise, dtype=torch.float32)

    out = out.clamp(*cfg.pixel_range)
    return out.detach().numpy() if was_numpy else out


def _clean_stats(target, image: torch.Tensor, class_id: int) -> tuple[float, float]:
    """(softmax confidence, pre-softmax activation) on the un-augmented image."""
    with torch.no_grad():
        batch = image.detach().unsqueeze(0)
        logits = presoftmax_any(target, batch)
        probs = F.softmax(logits, dim=1)
    return float(probs[0, class_id]), float(logits[0, class_id])


def synth_impression(target: ClassifierHandle | EnsembleHandle, class_id: int,
                     seed: int, cfg: ImpressionConfig,
                     record_trace: bool = False) -> ClassImpressionRecord:
    """Gradient-ascend the class's pre-softmax activation from noise.

    Stops when the clean-image softmax confidence reaches the sampled
    target, or at max_steps (record flagged unconverged, no exception).
    """
    cfg.validate()
    if not (0 <= class_id < target.num_classes):
        raise ContractViolation(
            f"class_id {class_id} out of range [0, {target.num_classes})")
    if not target.frozen:
        raise ContractViolation("impression synthesis requires a frozen target")

    rng = np.random.default_rng(seed)
    target_conf = sample_stop_confidence(rng, cfg.confidence_range)

    h, w, c = target.input_shape
    init = rng.uniform(cfg.init_range[0], cfg.init_range[1], size=(h, w, c))
    image = torch.tensor(init, dtype=torch.float32, requires_grad=True)
    opt = torch.optim.Adam([image], lr=cfg.learning_rate)

    lo = max(cfg.pixel_range[0], target.pixel_range[0])
    hi = min(cfg.pixel_range[1], target.pixel_range[1])

    conf, activation = _clean_stats(target, image, class_id)
    trace = [activation] if record_trace else None
    steps_used = 0
    for step in range(1, cfg.max_steps + 1):
        if conf >= target_conf:
            break
        augmented = augment(image, rng, cfg)
        logits = presoftmax_any(target, augmented.unsqueeze(0))
        loss = -logits[0, class_id]
        if not torch.isfinite(loss):
            raise SynthesisError(
                f"non-finite objective at step {step} (class {class_id})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            image.clamp_(lo, hi)  # keep the impression a valid image
        steps_used = step
        conf, activation = _clean_stats(target, image, class_id)
        if record_trace and step % 10 == 0:
            trace.append(activation)

    final = image.detach().numpy().astype(np.float32)
    if not np.isfinite(final).all():
        raise SynthesisError(f"non-finite pixels after synthesis (class {class_id})")
    return ClassImpressionRecord(
        image=final,
        class_id=class_id,
        target_confidence=target_conf,
        achieved_confidence=conf,
        steps_used=steps_used,
        seed=seed,
        model_id=target.model_id,
        converged=conf >= target_conf,
        objective_trace=tuple(trace) if trace is not None else None,
    )


def build_impression_dataset(target, per_class: int, class_ids, cfg: ImpressionConfig,
                             seed: int) -> ImpressionDataset:
    """Synthesize ``per_class`` impressions for each listed class.

    Each record gets its own derived seed. A synthesis error stops the build
    and the partial dataset comes back with ``complete=False``.
    """
    if per_class < 1:
        raise ContractViolation("per_class must be >= 1")
    class_ids = tuple(int(c) for c in class_ids)
    records: list[ClassImpressionRecord] = []
    complete = True
    for class_id in class_ids:
        for k in range(per_class):
            rec_seed = substream_seed(seed, "impression", class_id, k)
            try:
                records.append(synth_impression(target, class_id, rec_seed, cfg))
            except SynthesisError:
                complete = False
                break
        if not complete:
            break
    return ImpressionDataset(
        records=records,
        model_id=target.model_id,
        cfg=cfg,
        seed=seed,
        per_class=per_class,
        class_ids=class_ids,
        complete=complete,
    )


# --- persistence ----------------------------------------------------------

_CSV_FIELDS = ["file", "class_id", "target_confidence", "achieved_confidence",
               "steps_used", "seed", "model_id", "converged", "sha256"]


def save_impressions(ds: ImpressionDataset, out_dir: str | Path) -> Path:
    """One lossless .npy per record plus a CSV table and a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, rec in enumerate(ds.records):
        fname = f"impression_{i:05d}.npy"
        np.save(out_dir / fname, rec.image)
        rows.append({
            "file": fname,
            "class_id": rec.class_id,
            "target_confidence": repr(rec.target_confidence),
            "achieved_confidence": repr(rec.achieved_confidence),
            "steps_used": rec.steps_used,
            "seed": rec.seed,
            "model_id": rec.model_id,
            "converged": int(rec.converged),
            "sha256": io_utils.sha256_file(out_dir / fname),
        })
    with open(out_dir / "records.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    io_utils.write_json(out_dir / "manifest.json", {
        "model_id": ds.model_id,
        "seed": ds.seed,
        "per_class": ds.per_class,
        "class_ids": list(ds.class_ids),
        "num_records": len(ds.records),
        "complete": ds.complete,
        "cfg": ds.cfg.as_dict(),
    })
    return out_dir


def load_impressions(in_dir: str | Path) -> ImpressionDataset:
    """Load a persisted dataset, validating per-file checksums."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise DependencyError(f"missing impression manifest: {manifest_path}")
    m = io_utils.read_json(manifest_path)
    cfg_kwargs = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in m["cfg"].items()}
    records = []
    with open(in_dir / "records.csv", newline="") as f:
        for row in csv.DictReader(f):
            path = in_dir / row["file"]
            if not path.exists():
                raise DependencyError(f"missing impression file: {path}")
            if io_utils.sha256_file(path) != row["sha256"]:
                raise DependencyError(f"checksum mismatch for {path}")
            records.append(ClassImpressionRecord(
                image=np.load(path),
                class_id=int(row["class_id"]),
                target_confidence=float(row["target_confidence"]),
                achieved_confidence=float(row["achieved_confidence"]),
                steps_used=int(row["steps_used"]),
                seed=int(row["seed"]),
                model_id=row["model_id"],
                converged=bool(int(row["converged"])),
            ))
    return ImpressionDataset(
        records=records,
        model_id=m["model_id"],
        cfg=ImpressionConfig(**cfg_kwargs),
        seed=m["seed"],
        per_class=m["per_class"],
        class_ids=tuple(m["class_ids"]),
        complete=m["complete"],
    )
