"""Training protocols, evaluation, checkpoints and latent projection.

Three protocols share one loop:

* ``baseline``: supervised training on the active domains (joint training
  when several are active); the domain head is monitored but detached.
* ``finetune``: same objective on a single target domain, starting from a
  checkpoint.
* ``da``: unsupervised adaptation.  Class labels are used for the source
  domain only; every sample contributes a clamped domain loss whose weight
  follows the schedule.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio
from .data import DomainDataset, make_epoch, steps_per_epoch
from .errors import ConfigError, DataError, FormatError, ShapeMismatchError, VersionError
from .model import ModelConfig, ModelParams, check_params, forward, init_params, param_shapes, predict
from .rng import stream
from .schedule import ScheduleState, clamp_domain_loss, combine_losses, factor

PROTOCOLS = ("baseline", "finetune", "da")
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "domain", "split", "accuracy", "clf_loss", "dmn_loss", "lambda")
STEPS_HEADER = ("step", "epoch", "clf_loss", "dmn_loss", "lambda", "total_loss")


@dataclass(frozen=True)
class TrainConfig:
    protocol: str = "baseline"
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-2
    source_domain: int = 0
    active_domains: tuple[int, ...] | None = None
    alpha: float = 10.0
    clamp: float = 5000.0
    seed: int = 0
    eval_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.active_domains is not None:
            object.__setattr__(self, "active_domains", tuple(int(d) for d in self.active_domains))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if not self.alpha > 0 or not self.clamp > 0:
            raise ConfigError("alpha and clamp must be positive")
        active = self.resolved_active()
        if self.protocol == "da":
            if active is not None and len(active) < 2:
                raise ConfigError("the da protocol needs at least two active domains")
            if active is not None and self.source_domain not in active:
                raise ConfigError(f"source domain {self.source_domain} is not active")
        if self.protocol == "finetune" and (active is None or len(active) != 1):
            raise ConfigError("finetune trains on exactly one target domain; set active_domains")

    def resolved_active(self) -> tuple[int, ...] | None:
        """Active domain labels; ``None`` means every domain (da only)."""
        if self.active_domains is not None:
            return self.active_domains
        if self.protocol == "baseline":
            return (self.source_domain,)
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["active_domains"] = None if self.active_domains is None else list(self.active_domains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    domain: int
    split: str
    accuracy: float
    clf_loss: float
    dmn_loss: float
    lam: float

    def row(self) -> list:
        return [self.epoch, self.domain, self.split, repr(self.accuracy), repr(self.clf_loss),
                repr(self.dmn_loss), repr(self.lam)]


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    clf_loss: float
    dmn_loss: float
    lam: float
    total_loss: float

    def row(self) -> list:
        return [self.step, self.epoch, repr(self.clf_loss), repr(self.dmn_loss),
                repr(self.lam), repr(self.total_loss)]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    schedule: ScheduleState
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    protocol: str = "baseline"
    epoch: int = 0
    fingerprint: str = ""
    train_config: dict | None = None

    @property
    def lam(self) -> float:
        return factor(self.schedule) if self.protocol == "da" else 0.0


@dataclass
class RunResult:
    history: list[MetricsRecord]
    steps: list[StepMetrics]
    checkpoint: Checkpoint
    trajectory: list[ModelParams] | None = None


# ---------------------------------------------------------------------------
# one optimisation step
# ---------------------------------------------------------------------------


def _masked_mean(values: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    count = int(mask.sum())
    if count == 0:
        raise DataError("no labeled samples in the batch")
    return ad.tensor_sum(values) * (1.0 / count)


def train_step(params: ModelParams, batch, config: TrainConfig, state: ScheduleState,
               model_config: ModelConfig | None = None):
    """Forward the whole aggregated batch, take one SGD step.

    Returns ``(new_params, StepMetrics, new_state)``.
    """
    cfg = model_config or config.model
    da = config.protocol == "da"
    if da and len(np.unique(batch.domain_labels)) < 2:
        raise ConfigError("a da step needs samples from at least two domains")
    labeled = batch.source_mask if da else np.ones(len(batch), dtype=bool)

    out, tape = forward(params, batch.images, cfg, lambda_active=da)
    l_clf = _masked_mean(ad.nll_loss(out.clf_logprobs, batch.class_labels, labeled), labeled)
    dmn_per_sample = ad.nll_loss(out.dmn_logprobs, batch.domain_labels)
    if da:
        lam = factor(state)
        l_dmn = ad.mean(clamp_domain_loss(dmn_per_sample, state))
        total = combine_losses(l_clf, l_dmn, lam)
    else:
        # monitored only; the detached head gets no update
        lam = 0.0
        l_dmn = ad.mean(ad.detach(dmn_per_sample))
        total = l_clf
    grads = ad.backward(total, tape)
    new_params = {k: v - config.lr * grads[k] for k, v in params.items()}
    metrics = StepMetrics(state.n, -1, l_clf.item(), l_dmn.item(), lam, total.item())
    return new_params, metrics, state.advance()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _forward_eval(params, images, cfg, chunk=256):
    parts = [forward(params, images[i:i + chunk], cfg, requires_grad=False)[0]
             for i in range(0, len(images), chunk)]
    return (np.concatenate([p.latent.data for p in parts]),
            np.concatenate([p.clf_logprobs.data for p in parts]),
            np.concatenate([p.dmn_logprobs.data for p in parts]))


def evaluate(params: ModelParams, dataset: DomainDataset, split: str, model_config: ModelConfig,
             epoch: int = 0, lam: float = 0.0) -> MetricsRecord:
    """Accuracy and unclamped mean losses of ``dataset``'s ``split``."""
    images, labels = dataset.split(split)
    if len(labels) == 0:
        raise DataError(f"domain {dataset.domain_label} has an empty {split} split")
    _, clf, dmn = _forward_eval(params, images, model_config)
    rows = np.arange(len(labels))
    return MetricsRecord(
        epoch=epoch,
        domain=dataset.domain_label,
        split=split,
        accuracy=float(np.mean(predict(clf) == labels)),
        clf_loss=float(np.mean(-clf[rows, labels])),
        dmn_loss=float(np.mean(-dmn[rows, dataset.domain_label])),
        lam=float(lam),
    )


def domain_head_accuracy(params, datasets, model_config, split="val") -> float:
    """Accuracy of the trained domain head itself on ``split``."""
    hits = total = 0
    for ds in datasets:
        images, _ = ds.split(split)
        _, _, dmn = _forward_eval(params, images, model_config)
        hits += int(np.sum(predict(dmn) == ds.domain_label))
        total += len(images)
    return hits / total


def domain_probe_accuracy(params: ModelParams, datasets: Sequence[DomainDataset],
                          model_config: ModelConfig, seed: int = 0, iters: int = 300,
                          lr: float = 0.5, l2: float = 1e-3) -> float:
    """Validation accuracy of a fresh linear domain classifier on the latent.

    A softmax regression is fit to standardized train-split latents of all
    domains, then scored on the validation splits.  Higher means the
    features carry more domain information; ``1 / len(datasets)`` is chance.
    """
    def collect(split):
        zs, ys = [], []
        for j, ds in enumerate(datasets):
            images, _ = ds.split(split)
            zs.append(_forward_eval(params, images, model_config)[0])
            ys.append(np.full(len(images), j))
        return np.concatenate(zs), np.concatenate(ys)

    z_train, y_train = collect("train")
    z_val, y_val = collect("val")
    mu, sd = z_train.mean(axis=0), z_train.std(axis=0) + 1e-8
    z_train, z_val = (z_train - mu) / sd, (z_val - mu) / sd
    k = len(datasets)
    # inverse-frequency weights so unequal domain sizes don't favour the largest
    weights = 1.0 / np.bincount(y_train, minlength=k)[y_train]
    weights /= weights.sum()
    onehot = np.eye(k)[y_train]
    rng = stream(seed, "probe")
    w = rng.normal(0, 0.01, size=(z_train.shape[1], k))
    b = np.zeros(k)
    for _ in range(iters):
        logits = z_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) * weights[:, None]
        w -= lr * (z_train.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return float(np.mean(np.argmax(z_val @ w + b, axis=1) == y_val))


# ---------------------------------------------------------------------------
# protocol runner
# ---------------------------------------------------------------------------


def _select(datasets, labels):
    by_label = {ds.domain_label: ds for ds in datasets}
    missing = [d for d in labels if d not in by_label]
    if missing:
        raise DataError(f"datasets missing for domains {missing}")
    return [by_label[d] for d in labels]


def run_protocol(config: TrainConfig, datasets: Sequence[DomainDataset],
                 init: Checkpoint | None = None, keep_trajectory: bool = False) -> RunResult:
    """Train per ``config`` and evaluate every domain's validation split.

    Evaluation happens before training (epoch 0), every ``eval_every``
    epochs, and after the final epoch.
    """
    if not datasets:
        raise DataError("no datasets given")
    if config.protocol == "finetune" and init is None:
        raise ConfigError("finetune requires an initial checkpoint")

    if init is not None:
        model_cfg = init.model_config
        check_params(init.params, model_cfg)
        params = {k: v.copy() for k, v in init.params.items()}
    else:
        model_cfg = config.model
        params = init_params(model_cfg, config.seed)
    top = max(ds.domain_label for ds in datasets)
    if top >= model_cfg.num_domains:
        raise ConfigError(f"domain label {top} exceeds the model's {model_cfg.num_domains} domains")

    active_labels = config.resolved_active() or tuple(ds.domain_label for ds in datasets)
    active = _select(datasets, active_labels)
    if config.protocol == "da" and len(active) < 2:
        raise ConfigError("the da protocol needs at least two active domains")
    if config.protocol == "da" and config.source_domain not in active_labels:
        raise ConfigError(f"source domain {config.source_domain} is not among the active domains")
    source = config.source_domain if config.protocol == "da" else active_labels[0]

    spe = steps_per_epoch(active, config.batch_size)
    state = ScheduleState(0, max(1, config.epochs * spe), config.alpha, config.clamp)
    da = config.protocol == "da"

    history: list[MetricsRecord] = []
    steps: list[StepMetrics] = []
    trajectory = [params] if keep_trajectory else None

    def record(epoch):
        lam = factor(state) if da else 0.0
        for ds in datasets:
            history.append(evaluate(params, ds, "val", model_cfg, epoch, lam))

    record(0)
    for epoch in range(1, config.epochs + 1):
        for batch in make_epoch(active, config.batch_size, config.seed, epoch - 1, source):
            params, m, state = train_step(params, batch, config, state, model_cfg)
            steps.append(replace(m, epoch=epoch))
            if keep_trajectory:
                trajectory.append(params)
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            record(epoch)

    ckpt = Checkpoint(model_cfg, params, state, {"kind": "sgd", "lr": config.lr},
                      config.protocol, config.epochs, config.fingerprint(), config.to_dict())
    return RunResult(history, steps, ckpt, trajectory)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def metrics_csv(history: Sequence[MetricsRecord]) -> str:
    return _csv_text(METRICS_HEADER, (r.row() for r in history))


def steps_csv(steps: Sequence[StepMetrics]) -> str:
    return _csv_text(STEPS_HEADER, (s.row() for s in steps))


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricsRecord(int(r["epoch"]), int(r["domain"]), r["split"], float(r["accuracy"]),
                              float(r["clf_loss"]), float(r["dmn_loss"]), float(r["lambda"]))
                for r in reader]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "schedule": asdict(ckpt.schedule),
        "optimizer": ckpt.optimizer,
        "protocol": ckpt.protocol,
        "epoch": ckpt.epoch,
        "fingerprint": ckpt.fingerprint,
        "train_config": ckpt.train_config,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    tensors = {"__meta__": np.frombuffer(blob, dtype=np.uint8)}
    for name in param_shapes(ckpt.model_config):
        tensors[name] = np.asarray(ckpt.params[name], dtype=np.float64)
    body = tensorio.encode(tensors)
    tensors["__checksum__"] = np.frombuffer(hashlib.sha256(body).digest(), dtype=np.uint8)
    return tensorio.encode(tensors)


def decode_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    tensors = tensorio.decode(buf)
    checksum = tensors.pop("__checksum__", None)
    if checksum is None or "__meta__" not in tensors:
        raise FormatError("not a checkpoint: meta or checksum tensor missing")
    if hashlib.sha256(tensorio.encode(tensors)).digest() != checksum.tobytes():
        raise FormatError("checkpoint checksum mismatch; file is corrupt")
    try:
        meta = json.loads(tensors.pop("__meta__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint metadata: {e}") from None
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {meta.get('checkpoint_version')} "
                           f"is not supported (expected {CHECKPOINT_VERSION})")
    cfg = ModelConfig.from_dict(meta["model_config"])
    check_params(tensors, cfg)
    if expected is not None and expected != cfg:
        want = param_shapes(expected)
        diffs = [(n, tuple(tensors[n].shape) if n in tensors else None, want.get(n))
                 for n in sorted(set(want) | set(tensors))
                 if (tuple(tensors[n].shape) if n in tensors else None) != want.get(n)]
        if diffs:
            raise ShapeMismatchError(diffs)
        raise ShapeMismatchError([(f"config.{k}", v, expected.to_dict()[k])
                                  for k, v in cfg.to_dict().items() if expected.to_dict()[k] != v])
    return Checkpoint(cfg, tensors, ScheduleState(**meta["schedule"]), meta["optimizer"],
                      meta["protocol"], meta["epoch"], meta["fingerprint"], meta["train_config"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected)


# ---------------------------------------------------------------------------
# latent projection
# ---------------------------------------------------------------------------


@dataclass
class Projection:
    coords: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray
    explained_variance: np.ndarray
    degenerate: bool = False

    def to_csv(self) -> str:
        rows = ([repr(float(x)), repr(float(y)), int(c), int(d)]
                for (x, y), c, d in zip(self.coords, self.class_labels, self.domain_labels))
        return _csv_text(("x", "y", "class", "domain"), rows)


def top2_principal_axes(centered: np.ndarray, tol: float = 1e-10, max_iter: int = 10000):
    """Leading two eigenvectors of the covariance by orthogonal iteration.

    Returns ``(axes (dim, 2), eigenvalues (2,), converged)``.  Each axis is
    signed so its first nonzero loading is positive.
    """
    n, dim = centered.shape
    cov = centered.T @ centered / n
    k = min(2, dim)
    # deterministic start: the covariance columns with the largest norms
    order = np.argsort(-np.linalg.norm(cov, axis=0), kind="stable")[:k]
    q, _ = np.linalg.qr(cov[:, order] + np.eye(dim)[:, order] * 1e-3)
    evals = np.zeros(k)
    converged = False
    for _ in range(max_iter):
        q, _ = np.linalg.qr(cov @ q)
        # Rayleigh-Ritz on the current subspace keeps the two vectors ordered
        small = q.T @ cov @ q
        vals, vecs = np.linalg.eigh((small + small.T) / 2)
        evals, vecs = vals[::-1], vecs[:, ::-1]
        q = q @ vecs
        resid = np.linalg.norm(cov @ q - q * evals, axis=0)
        if np.all(resid <= tol * max(evals[0], 1e-300)):
            converged = True
            break
    for j in range(k):
        nz = np.flatnonzero(np.abs(q[:, j]) > 1e-12)
        if len(nz) and q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    if k < 2:
        q = np.hstack([q, np.zeros((dim, 1))])
        evals = np.append(evals, 0.0)
    return q, evals, converged


def pca_2d(points: np.ndarray, tol: float = 1e-10):
    """Project ``points`` onto their top-2 principal directions."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 3:
        raise DataError(f"projection needs at least 3 samples, got {len(points)}")
    centered = points - points.mean(axis=0)
    total = float(np.sum(centered ** 2)) / len(points)
    if total <= 1e-24:
        warnings.warn("latent vectors are all identical; returning zero coordinates")
        return np.zeros((len(points), 2)), np.zeros(2), True
    axes, evals, converged = top2_principal_axes(centered, tol)
    if not converged:
        warnings.warn("principal axes did not reach the requested tolerance")
    return centered @ axes, np.maximum(evals, 0.0), False


def project_latent(params: ModelParams, images: np.ndarray, model_config: ModelConfig,
                   class_labels, domain_labels) -> Projection:
    latent, _, _ = _forward_eval(params, images, model_config)
    coords, evals, degenerate = pca_2d(latent)
    return Projection(coords, np.asarray(class_labels), np.asarray(domain_labels), evals, degenerate)
