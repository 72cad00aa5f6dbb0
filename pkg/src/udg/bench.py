"""Synthetic domain-shift benchmarks, dataset files and evaluation.

Two families stand in for real single-source benchmarks:

* two moons rotated about the origin (source at 0 degrees, unseen domains at
  other angles), the analog of a digits-style domain shift;
* 16x16 procedurally drawn glyphs over five classes with corruption families
  and severities 1..5, the analog of a corrupted-image benchmark.

Corruption magnitudes per severity ``s``:

===========  ==========================================================
noise        additive gaussian, std ``0.04 * s`` (no clipping)
blur         box blur of radius ``min(max(s - 1, 0), 3)``
contrast     ``(x - mean) * (1 - 0.15 * s) + mean`` per image
occlusion    a ``2s x 2s`` square set to zero, fully inside the image
translation  shift by ``s`` pixels in one of four directions, zero fill
rotation     ``15 * s`` degrees, bilinear, zero fill
===========  ==========================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .augment import one_hot
from .config import TrainConfig
from .metrics import MetaStepReport
from .model import Backbone, UDGModel, forward
from .optim import clip_grad_norm, make_optimizer
from .rng import Rng

FAMILIES = ("rotation", "translation", "noise", "blur", "contrast", "occlusion")
GLYPH_CLASSES = ("bar", "cross", "circle", "triangle", "checker")
GLYPH_SIZE = 16


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    family: str
    severity: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shift family {self.family!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in 1..5, got {self.severity}")


@dataclass
class DomainDataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    domain_id: str = "source"
    shift: ShiftSpec | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a non-empty (n, d) array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("need one label per input row")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "DomainDataset":
        return DomainDataset(self.inputs[idx], self.labels[idx], self.classes, self.domain_id, self.shift)


@dataclass(frozen=True)
class MetricsRecord:
    domain_id: str
    shift: ShiftSpec | None
    accuracy: float
    n: int
    correct: int


# ------------------------------------------------------------------ two moons


def _cos_sin(deg: float) -> tuple[float, float]:
    r = deg % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if r in exact:
        return exact[r]
    rad = math.radians(r)
    return math.cos(rad), math.sin(rad)


def rotate_points(points: np.ndarray, rotation_deg: float) -> np.ndarray:
    c, s = _cos_sin(rotation_deg)
    x, y = points[:, 0], points[:, 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=1)


def gen_two_moons(n: int, rotation_deg: float = 0.0, noise_std: float = 0.1, seed: int = 0) -> DomainDataset:
    """Two interleaved half circles, rotated about the origin.

    Class 0 is the upper arc of the unit circle at the origin, class 1 the
    lower arc of the unit circle centred at ``(1, 0.5)``; sizes are
    ``ceil(n / 2)`` and ``floor(n / 2)``.
    """
    if n < 2:
        raise ValueError("two moons needs n >= 2")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = Rng(seed).fork("moons")
    n0, n1 = (n + 1) // 2, n // 2
    t0 = np.pi * rng.uniform(n0)
    t1 = np.pi * rng.uniform(n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    points = np.concatenate([outer, inner])
    if noise_std > 0:
        points = points + noise_std * rng.normal(points.shape)
    labels = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return DomainDataset(rotate_points(points, rotation_deg), labels, 2, f"moons_rot{rotation_deg:g}")


# --------------------------------------------------------------------- glyphs


def _render(cls: int, rng: Rng) -> np.ndarray:
    u = rng.uniform(6)
    cy = 7.5 + (u[0] - 0.5) * 4.0
    cx = 7.5 + (u[1] - 0.5) * 4.0
    thick = 0.8 + 0.8 * u[2]
    size = 4.0 + 1.5 * u[3]
    ink = 0.7 + 0.3 * u[4]
    yy, xx = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    name = GLYPH_CLASSES[cls]
    if name == "bar":
        mask = (np.abs(dx) <= thick) & (np.abs(dy) <= size + 1)
    elif name == "cross":
        mask = ((np.abs(dx) <= thick) & (np.abs(dy) <= size)) | ((np.abs(dy) <= thick) & (np.abs(dx) <= size))
    elif name == "circle":
        mask = np.abs(np.hypot(dx, dy) - size) <= thick
    elif name == "triangle":
        top, bottom = -size, size
        mask = (dy >= top) & (dy <= bottom) & (np.abs(dx) <= 0.6 * (dy - top))
    else:
        cell = 2 + int(u[5] * 2)
        region = (np.abs(dx) <= size + 1) & (np.abs(dy) <= size + 1)
        mask = region & (((np.floor(xx / cell) + np.floor(yy / cell)) % 2) == 0)
    return np.where(mask, ink, 0.0)


def apply_corruption(images: np.ndarray, shift: ShiftSpec, rng: Rng) -> np.ndarray:
    """Corrupt a stack of (n, 16, 16) images; see the module table for magnitudes."""
    s = shift.severity
    n = images.shape[0]
    fam = shift.family
    if fam == "noise":
        return images + 0.04 * s * rng.normal(images.shape)
    if fam == "blur":
        radius = min(max(s - 1, 0), 3)
        if radius == 0:
            return images.copy()
        return ndimage.uniform_filter(images, size=(1, 2 * radius + 1, 2 * radius + 1), mode="constant")
    if fam == "contrast":
        m = images.mean(axis=(1, 2), keepdims=True)
        return (images - m) * (1.0 - 0.15 * s) + m
    out = images.copy()
    if fam == "occlusion":
        side = 2 * s
        corners = rng.integers(0, GLYPH_SIZE - side + 1, (n, 2))
        for i, (r, c) in enumerate(corners):
            out[i, r : r + side, c : c + side] = 0.0
        return out
    if fam == "translation":
        dirs = rng.integers(0, 4, n)
        for i, d in enumerate(dirs):
            dy, dx = [(s, 0), (-s, 0), (0, s), (0, -s)][d]
            out[i] = ndimage.shift(images[i], (dy, dx), order=0, mode="constant", cval=0.0)
        return out
    if fam == "rotation":
        for i in range(n):
            out[i] = ndimage.rotate(images[i], 15.0 * s, reshape=False, order=1, mode="constant", cval=0.0)
        return out
    raise ValueError(f"unknown shift family {fam!r}")


def gen_glyph_images(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError("glyphs needs n >= 1")
    rng = Rng(seed).fork("glyphs")
    labels = (np.arange(n) % len(GLYPH_CLASSES))[rng.fork("order").permutation(n)]
    draw = rng.fork("draw")
    images = np.stack([_render(int(c), draw.fork(i)) for i, c in enumerate(labels)])
    return images, labels


def gen_glyphs(n: int, shift: ShiftSpec | None = None, seed: int = 0) -> DomainDataset:
    images, labels = gen_glyph_images(n, seed)
    domain = "glyphs"
    if shift is not None:
        images = apply_corruption(images, shift, Rng(seed).fork("corrupt", shift.family, shift.severity))
        domain = f"glyphs_{shift.family}{shift.severity}"
    return DomainDataset(images.reshape(n, -1), labels, len(GLYPH_CLASSES), domain, shift)


# ---------------------------------------------------------------------- files


def save_dataset(path, ds: DomainDataset) -> None:
    """Write ``n d classes`` then one row of ``d`` reals and a label per example."""
    lines = [f"{len(ds)} {ds.dim} {ds.classes}"]
    for row, label in zip(ds.inputs, ds.labels):
        lines.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, domain_id: str | None = None, shift: ShiftSpec | None = None) -> DomainDataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(f"{path}: not UTF-8 text") from exc
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file")
    try:
        n, d, classes = (int(v) for v in lines[0].split())
    except ValueError:
        raise DatasetFormatError(f"{path}:1: header must be 'n d classes'") from None
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise DatasetFormatError(f"{path}: header declares {n} rows, found {len(rows)}")
    inputs = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != d + 1:
            raise DatasetFormatError(f"{path}:{i + 2}: expected {d + 1} fields, got {len(parts)}")
        try:
            inputs[i] = [float(v) for v in parts[:d]]
            labels[i] = int(parts[d])
        except ValueError:
            raise DatasetFormatError(f"{path}:{i + 2}: malformed number") from None
    try:
        return DomainDataset(inputs, labels, classes, domain_id or path.stem, shift)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


# ----------------------------------------------------------------- evaluation


def predict(backbone, inputs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    with ag.no_grad():
        logits = forward(backbone, inputs).data
    return np.argmax(logits, axis=1)


def evaluate(backbone, dataset: DomainDataset) -> MetricsRecord:
    if backbone.n_classes != dataset.classes:
        raise ValueError(f"model predicts {backbone.n_classes} classes, dataset has {dataset.classes}")
    correct = int(np.sum(predict(backbone, dataset.inputs) == dataset.labels))
    return MetricsRecord(dataset.domain_id, dataset.shift, correct / len(dataset), len(dataset), correct)


def average_accuracy(records) -> float:
    """Unweighted mean over domains."""
    records = list(records)
    return float(np.mean([r.accuracy for r in records]))


def batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Rows used at ``iteration``: consecutive slices of a per-epoch permutation."""
    if batch_size >= n:
        return np.arange(n)
    per_epoch = n // batch_size
    epoch, j = divmod(iteration, per_epoch)
    perm = Rng(seed).fork("shuffle", epoch).permutation(n)
    return perm[j * batch_size : (j + 1) * batch_size]


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, report: MetaStepReport | None = None):
        super().__init__(message)
        self.report = report


def model_sizes(cfg: TrainConfig, source: DomainDataset) -> tuple[int, ...]:
    return (source.dim, *cfg.hidden, source.classes)


def init_model(cfg: TrainConfig, source: DomainDataset) -> UDGModel:
    return UDGModel.init(model_sizes(cfg, source), Rng(cfg.seed).fork("init"), cfg.perturb_layers, cfg.aux_hidden, cfg.floor)


def erm_train(cfg: TrainConfig, source: DomainDataset, model: UDGModel | None = None) -> tuple[Backbone, list[MetaStepReport]]:
    """Plain cross-entropy training of the backbone.

    Initialization, batch order and optimizer match the meta-learning trainer
    for the same config, so the two can be compared step for step.
    """
    model = model or init_model(cfg, source)
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr)
    y_all = one_hot(source.labels, source.classes)
    theta = model.group("theta")
    history = []
    for it in range(cfg.iterations):
        idx = batch_indices(len(source), cfg.batch_size, it, cfg.seed)
        loss = ag.softmax_xent(forward(model.backbone.with_params(theta), source.inputs[idx]), ag.Tensor(y_all[idx]))
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(f"non-finite ERM loss at iteration {it}")
        grads = clip_grad_norm(ag.backward(loss, theta), cfg.grad_clip)
        theta = opt.step("theta", theta, grads)
        history.append(MetaStepReport(it, loss.item()))
    return model.backbone.with_params(theta), history
