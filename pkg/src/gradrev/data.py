"""Synthetic multi-domain data, preprocessing, splits and balanced sampling.

Each class is an oriented bar with a blob at one end, drawn at angle
``k * pi / num_classes``.  Domains share the glyphs but apply their own
photometric affine (contrast, brightness, background ramp), a small
rotation, a raw canvas size and channel count.  Raw images go through the
same preprocessing chain as real photographs would: grayscale, center crop,
bilinear rescale, affine normalization to [-1, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .errors import ConfigError, DataError, InputError
from .rng import stream

NUM_CLASSES = 7
VAL_FRACTION = 0.2


@dataclass(frozen=True)
class DomainShift:
    """Appearance of one domain.  The defaults are the undistorted look."""

    rotation: float = 0.0
    contrast: float = 0.75
    brightness: float = 0.1
    background: float = 0.0
    noise: float = 0.06
    jitter: float = 0.0
    raw_height: int = 40
    raw_width: int = 40
    channels: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


IDENTITY_SHIFT = DomainShift()

# source is a colour camera with a wide frame; targets differ in polarity,
# contrast, lighting gradient, framing and a slight rotation
DEFAULT_SHIFTS = (
    DomainShift(rotation=0.0, contrast=0.75, brightness=0.1, jitter=0.2, raw_height=40, raw_width=48,
                channels=3),
    DomainShift(rotation=0.2, contrast=-0.6, brightness=0.8, noise=0.06, jitter=0.2, raw_height=36,
                raw_width=36),
    DomainShift(rotation=-0.12, contrast=0.45, brightness=0.3, background=0.25, noise=0.1, jitter=0.2,
                raw_height=44, raw_width=32),
    DomainShift(rotation=0.1, contrast=0.9, brightness=0.0, background=-0.1, noise=0.04, jitter=0.2,
                raw_height=48, raw_width=40),
)


def resolve_shifts(shift, domains: int) -> list[DomainShift]:
    """Turn ``"default"``, ``"identity"`` or a list of specs into ``domains`` shifts."""
    if shift is None or shift == "default":
        if domains > len(DEFAULT_SHIFTS):
            raise ConfigError(f"default shift covers {len(DEFAULT_SHIFTS)} domains, "
                              f"asked for {domains}")
        return list(DEFAULT_SHIFTS[:domains])
    if shift == "identity":
        return [IDENTITY_SHIFT] * domains
    if isinstance(shift, str):
        raise ConfigError(f"unknown shift {shift!r}; use 'default', 'identity' or a list")
    shifts = [s if isinstance(s, DomainShift) else DomainShift(**s) for s in shift]
    if len(shifts) != domains:
        raise ConfigError(f"{len(shifts)} shift specs given for {domains} domains")
    return shifts


@dataclass
class Sample:
    image: np.ndarray
    class_label: int
    domain_label: int


@dataclass
class DomainDataset:
    domain_label: int
    images: np.ndarray
    class_labels: np.ndarray
    train_index: np.ndarray
    val_index: np.ndarray
    shift: DomainShift = field(default_factory=DomainShift)

    def __len__(self):
        return len(self.class_labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.class_labels[i]), self.domain_label)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_index, "val": self.val_index}.get(name)
        if idx is None:
            raise DataError(f"unknown split {name!r}")
        return self.images[idx], self.class_labels[idx]


@dataclass
class AggregatedBatch:
    images: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    source_mask: np.ndarray
    indices: list[np.ndarray]

    def __len__(self):
        return len(self.class_labels)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _resize_axis(img: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    if n == size:
        return img
    # pixel-centre aligned sampling positions
    pos = (np.arange(size) + 0.5) * (n / size) - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    a, b = np.take(img, lo, axis=axis), np.take(img, hi, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return a * (1 - frac) + b * frac


def bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    return _resize_axis(_resize_axis(img, size, 0), size, 1)


def center_crop(img: np.ndarray) -> np.ndarray:
    """Largest centred square; stands in for a face detector."""
    h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return img[top:top + side, left:left + side]


def preprocess(raw, target_size: int) -> np.ndarray:
    """Grayscale, crop, rescale and normalize a raw 0..255 image to (1, s, s)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        gray = raw.mean(axis=2)
    elif raw.ndim == 2:
        gray = raw
    else:
        raise InputError(f"expected (h, w) or (h, w, channels) image, got shape {raw.shape}")
    crop = center_crop(gray)
    if crop.shape[0] < target_size:
        raise InputError(f"image {raw.shape[:2]} yields a {crop.shape[0]}px crop, "
                         f"smaller than target {target_size}px")
    small = bilinear_resize(np.clip(crop, 0.0, 255.0), target_size)
    return np.clip(small * (2.0 / 255.0) - 1.0, -1.0, 1.0)[None]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _glyph(u, v, angle, cx, cy, amplitude):
    c, s = math.cos(angle), math.sin(angle)
    du, dv = u - cx, v - cy
    along = du * c + dv * s
    across = -du * s + dv * c
    half_len, width = 0.6, 0.1
    bar = np.exp(-0.5 * (across / width) ** 2) / (1 + np.exp((np.abs(along) - half_len) / 0.04))
    blob = np.exp(-0.5 * ((along - half_len) ** 2 + across ** 2) / 0.16 ** 2)
    return amplitude * np.maximum(bar, blob)


def render_raw(class_label: int, shift: DomainShift, rng: np.random.Generator,
               num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Draw one raw 0..255 image for ``class_label`` under ``shift``."""
    h, w = shift.raw_height, shift.raw_width
    side = min(h, w)
    # coordinates in units of half the crop side, centred on the canvas
    v, u = np.meshgrid((np.arange(h) + 0.5 - h / 2) / (side / 2),
                       (np.arange(w) + 0.5 - w / 2) / (side / 2), indexing="ij")
    angle = class_label * math.pi / num_classes + shift.rotation + rng.normal(0, 0.05)
    cx, cy = rng.uniform(-0.1, 0.1, size=2)
    g = _glyph(u, v, angle, cx, cy, rng.uniform(0.8, 1.0))
    # per-sample lighting variation within the domain
    brightness = shift.brightness + shift.jitter * rng.normal()
    contrast = shift.contrast * (1.0 + shift.jitter * rng.normal())
    noise = shift.noise * (1.0 + shift.jitter * rng.normal()) if shift.jitter else shift.noise
    img = brightness + shift.background * u / 2 + contrast * g
    img = img + rng.normal(0, abs(noise), size=img.shape)
    img = np.clip(img, 0.0, 1.0) * 255.0
    if shift.channels > 1:
        tint = np.linspace(0.9, 1.1, shift.channels)
        img = np.clip(img[..., None] * tint, 0.0, 255.0)
    return img


def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     val_fraction: float = VAL_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    train, val = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_val = int(round(val_fraction * len(idx)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def generate_synthetic(domains: int = 4, classes: int = NUM_CLASSES,
                       per_class: int | Sequence[int] = 20, image_size: int = 32,
                       shift="default", seed: int = 0) -> list[DomainDataset]:
    """Build ``domains`` datasets of ``classes`` glyph classes each.

    ``per_class`` is either one count for every domain or one per domain.
    """
    if domains < 2:
        raise ConfigError(f"need at least 2 domains, got {domains}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    counts = [int(per_class)] * domains if np.isscalar(per_class) else [int(c) for c in per_class]
    if len(counts) != domains:
        raise ConfigError(f"{len(counts)} per-class counts given for {domains} domains")
    if min(counts) < 4:
        raise ConfigError(f"per_class must be at least 4, got {counts}")
    if image_size < 3:
        raise ConfigError(f"image_size must be at least 3, got {image_size}")
    shifts = resolve_shifts(shift, domains)

    out = []
    for d, (count, sh) in enumerate(zip(counts, shifts)):
        rng = stream(seed, "data", d)
        labels = np.repeat(np.arange(classes), count)
        images = np.stack([preprocess(render_raw(k, sh, rng, classes), image_size) for k in labels])
        train, val = stratified_split(labels, rng)
        out.append(DomainDataset(d, images, labels.astype(np.int64), train, val, sh))
    return out


# ---------------------------------------------------------------------------
# balanced aggregated batches
# ---------------------------------------------------------------------------


def steps_per_epoch(datasets: Sequence[DomainDataset], m: int) -> int:
    return math.ceil(max(len(ds.train_index) for ds in datasets) / m)


def make_epoch(datasets: Sequence[DomainDataset], m: int, seed: int, epoch: int = 0,
               source_domain: int | None = None) -> list[AggregatedBatch]:
    """One epoch of aggregated batches holding ``m`` training samples per domain.

    The epoch lasts until the largest domain has been seen once; smaller
    domains are reshuffled and cycled as often as needed.  Each domain's
    order depends only on ``(seed, domain_label, epoch)``.
    """
    if m < 1:
        raise DataError(f"per-domain batch size must be positive, got {m}")
    if not datasets:
        raise DataError("no datasets given")
    for ds in datasets:
        if len(ds.train_index) == 0:
            raise DataError(f"domain {ds.domain_label} has an empty training split")
    if source_domain is None:
        source_domain = datasets[0].domain_label

    n_steps = steps_per_epoch(datasets, m)
    per_domain = []
    for ds in datasets:
        rng = stream(seed, "shuffle", ds.domain_label, epoch)
        order, pos, picks = rng.permutation(ds.train_index), 0, []
        for _ in range(n_steps):
            step, need = [], m
            while need:
                if pos == len(order):
                    order, pos = rng.permutation(ds.train_index), 0
                take = order[pos:pos + need]
                step.append(take)
                pos += len(take)
                need -= len(take)
            picks.append(np.concatenate(step))
        per_domain.append(picks)

    batches = []
    for t in range(n_steps):
        idx = [per_domain[j][t] for j in range(len(datasets))]
        domain_labels = np.concatenate([np.full(m, ds.domain_label, dtype=np.int64) for ds in datasets])
        batches.append(AggregatedBatch(
            images=np.concatenate([ds.images[i] for ds, i in zip(datasets, idx)]),
            class_labels=np.concatenate([ds.class_labels[i] for ds, i in zip(datasets, idx)]),
            domain_labels=domain_labels,
            source_mask=domain_labels == source_domain,
            indices=idx,
        ))
    return batches


# ---------------------------------------------------------------------------
# on-disk layout: <root>/meta.json and <root>/domain_<k>/{meta.json, samples.grda}
# ---------------------------------------------------------------------------


def save_datasets(datasets: Sequence[DomainDataset], root, seed: int, extra: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    summary = []
    for ds in datasets:
        sub = root / f"domain_{ds.domain_label}"
        sub.mkdir(exist_ok=True)
        counts = np.bincount(ds.class_labels).tolist()
        meta = {
            "domain_label": ds.domain_label,
            "class_counts": counts,
            "num_samples": len(ds),
            "train_size": len(ds.train_index),
            "val_size": len(ds.val_index),
            "image_size": int(ds.images.shape[-1]),
            "seed": seed,
            "shift": ds.shift.to_dict(),
            "format_version": tensorio.VERSION,
        }
        _write_json(sub / "meta.json", meta)
        tensorio.save(sub / "samples.grda", {
            "images": ds.images,
            "class_labels": ds.class_labels.astype(np.int64),
            "train_index": ds.train_index.astype(np.int64),
            "val_index": ds.val_index.astype(np.int64),
        })
        summary.append({"domain_label": ds.domain_label, "num_samples": len(ds), "class_counts": counts})
    top = {"domains": summary, "seed": seed, "format_version": tensorio.VERSION}
    top.update(extra or {})
    _write_json(root / "meta.json", top)


def load_datasets(root) -> list[DomainDataset]:
    root = Path(root)
    dirs = sorted(root.glob("domain_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise DataError(f"no domain directories under {root}")
    out = []
    for sub in dirs:
        try:
            meta = json.loads((sub / "meta.json").read_text(encoding="utf-8"))
            t = tensorio.load(sub / "samples.grda")
        except FileNotFoundError as e:
            raise DataError(f"incomplete dataset directory {sub}: {e}") from None
        out.append(DomainDataset(int(meta["domain_label"]), t["images"], t["class_labels"],
                                 t["train_index"], t["val_index"], DomainShift(**meta["shift"])))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
