"""Sample construction, the joint classification/regression loss and SGD."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from charprop import tensor
from charprop.boxes import BBox, encode_regression, expand_to_aspect, iou, iou_matrix
from charprop.data import AnnotatedImage, CropSource
from charprop.network import Model, builtin_spec, init_model, to_input
from charprop.templates import DEFAULT_MODE, TemplateSet, cluster_templates

logger = logging.getLogger(__name__)

POSITIVE_IOU = 0.85
NEGATIVE_IOU = 0.1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.001
    lr_step: int = 0  # 0 disables step decay
    lr_gamma: float = 0.1
    alpha: float = 0.5
    weight_decay: float = 5e-4
    iterations: int = 10000
    shift_count: int = 4
    max_offset: float = 0.1
    negatives_per_image: int = 30
    negative_min_side: float = 10.0
    negative_max_coverage: float = 0.5
    seed: int = 0
    arch: str = "CPN-ENG"
    width: float = 1.0
    num_classes: int = 4
    template_mode: str = DEFAULT_MODE
    init: str = "0.01"  # Gaussian std, or "he"

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``."""
        if self.lr_step > 0:
            return self.learning_rate * self.lr_gamma ** ((iteration - 1) // self.lr_step)
        return self.learning_rate

    def init_value(self):
        return "he" if self.init == "he" else float(self.init)


@dataclass
class TrainingSample:
    patch: np.ndarray  # (R_h, R_w, 3) uint8
    label: int  # 1-based; K is background
    target: tuple[float, float, float, float] | None
    source_box: BBox
    truth_box: BBox | None = None


def prior_box(sample_box: BBox, templates: TemplateSet, k: int) -> BBox:
    """Template ``k`` box centred in ``sample_box`` at that box's scale."""
    rw, rh = templates.receptive_field
    mw, mh = templates.sizes[k - 1]
    cx, cy = sample_box.center
    w, h = mw * sample_box.w / rw, mh * sample_box.h / rh
    return BBox(cx - w / 2, cy - h / 2, w, h)


def _source(image) -> CropSource:
    if isinstance(image, CropSource):
        return image
    if isinstance(image, AnnotatedImage):
        image = image.pixels
    return CropSource(np.asarray(image))


def sample_positives(
    image, truths: Sequence[BBox], templates: TemplateSet, config: TrainConfig, rng: np.random.Generator
) -> list[TrainingSample]:
    """Crops around each truth box plus shifted copies.

    A crop is the truth with its shorter side grown to the receptive-field
    aspect. Shifted copies move that crop by up to ``max_offset`` of its
    size and are kept only when they overlap the unshifted crop by more
    than 0.85 IoU.
    """
    if not truths:
        raise ValueError("no truth boxes")
    src = _source(image)
    rw, rh = templates.receptive_field
    out = []
    for g in truths:
        if not (g.w > 0 and g.h > 0):
            logger.warning("skipping degenerate truth box %s", tuple(g))
            continue
        k = templates.assign(g)
        base = expand_to_aspect(g, rw / rh)
        boxes = [base]
        attempts = 0
        while len(boxes) < config.shift_count + 1 and attempts < 20 * max(config.shift_count, 1):
            attempts += 1
            dx, dy = rng.uniform(-config.max_offset, config.max_offset, size=2)
            s = BBox(base.x + dx * base.w, base.y + dy * base.h, base.w, base.h)
            if iou(s, base) > POSITIVE_IOU:
                boxes.append(s)
        for s in boxes:
            t = encode_regression(prior_box(s, templates, k), g)
            out.append(TrainingSample(src.crop(s, (rw, rh)), k, t, s, g))
    return out


def sample_negatives(
    image,
    truths: Sequence[BBox],
    count: int,
    config: TrainConfig,
    rng: np.random.Generator,
    receptive_field: tuple[int, int] = (29, 29),
    positives: Sequence[BBox] = (),
    background: int = 4,
) -> list[TrainingSample]:
    """Random square crops that avoid every character.

    A crop is rejected if its IoU with any expanded truth (or any supplied
    positive sample box) reaches 0.1, or if more than
    ``negative_max_coverage`` of its area lies inside one of them.
    """
    src = _source(image)
    h, w = src.shape[:2]
    rw, rh = receptive_field
    lo = config.negative_min_side
    hi = min(h, w)
    if hi < lo:
        raise ValueError(f"image {w}x{h} smaller than the minimal crop {lo}")
    guards = [expand_to_aspect(g, rw / rh) for g in truths if g.w > 0 and g.h > 0] + list(positives)
    guard_arr = np.array([tuple(b) for b in guards], dtype=float).reshape(-1, 4)
    out = []
    attempts = 0
    while len(out) < count and attempts < 50 * max(count, 1):
        attempts += 1
        side = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        sw, sh = side * rw / max(rw, rh), side * rh / max(rw, rh)
        box = BBox(rng.uniform(0, w - sw), rng.uniform(0, h - sh), sw, sh)
        if len(guard_arr):
            ious = iou_matrix(np.array([tuple(box)]), guard_arr)[0]
            if ious.max() >= NEGATIVE_IOU:
                continue
            inter = ious * (box.area + guard_arr[:, 2] * guard_arr[:, 3]) / (1 + ious)
            if (inter / box.area).max() > config.negative_max_coverage:
                continue
        out.append(TrainingSample(src.crop(box, (rw, rh)), background, None, box, None))
    if len(out) < count:
        logger.warning("placed only %d of %d negatives", len(out), count)
    return out


@dataclass
class SampleArrays:
    """Training samples packed for fast minibatch indexing."""

    patches: np.ndarray  # (N, R_h, R_w, 3) uint8
    labels: np.ndarray  # (N,) 1-based
    targets: np.ndarray  # (N, 4), zeros for background

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> SampleArrays:
        patches = np.stack([s.patch for s in samples])
        labels = np.array([s.label for s in samples], dtype=np.int64)
        targets = np.array([s.target if s.target is not None else (0, 0, 0, 0) for s in samples], dtype=np.float64)
        return cls(patches, labels, targets)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> SampleArrays:
        return SampleArrays(self.patches[idx], self.labels[idx], self.targets[idx])


@dataclass
class LossParts:
    total: float
    cls: float
    reg: float
    decay: float


def batch_loss(
    model: Model,
    x: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    weight_decay: float,
) -> tuple[LossParts, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss and parameter gradients for an NCHW batch of receptive-field patches.

    ``J = alpha * J_cls + (1 - alpha) * J_reg + weight_decay * sum ||W||^2``
    where J_reg only sees the four outputs of each positive sample's own
    template, and the decay covers kernels but not biases.
    """
    k = model.num_classes
    out, cache = model.forward(x, keep_cache=True)
    n = out.shape[0]
    flat = out.reshape(n, 5 * k)
    loss_cls, g_cls = tensor.softmax_cross_entropy(flat[:, :k], labels)

    reg = flat[:, k:].reshape(n, k, 4)
    mask = np.zeros(reg.shape, dtype=reg.dtype)
    tgt = np.zeros(reg.shape, dtype=reg.dtype)
    pos = np.flatnonzero(labels != k)
    mask[pos, labels[pos] - 1] = 1
    tgt[pos, labels[pos] - 1] = targets[pos]
    loss_reg, g_reg = tensor.mse_loss(reg, tgt, mask)

    g_out = np.concatenate([alpha * g_cls, (1 - alpha) * g_reg.reshape(n, 4 * k)], axis=1)
    grads = model.backward(cache, g_out.astype(out.dtype, copy=False).reshape(out.shape))

    decay = 0.0
    if weight_decay:
        for (kern, _), (gk, _) in zip(model.params, grads):
            decay += float(np.sum(kern.astype(np.float64) ** 2))
            gk += (2 * weight_decay) * kern
        decay *= weight_decay
    total = alpha * loss_cls + (1 - alpha) * loss_reg + decay
    return LossParts(total, loss_cls, loss_reg, decay), grads


def joint_loss(batch: Sequence[TrainingSample], model: Model, config: TrainConfig | None = None):
    """Joint loss over a list of samples; see :func:`batch_loss`."""
    if not batch:
        raise ValueError("empty batch")
    config = config or TrainConfig()
    arr = SampleArrays.from_samples(batch)
    dtype = model.params[0][0].dtype
    x = to_input(arr.patches).astype(dtype, copy=False)
    return batch_loss(model, x, arr.labels, arr.targets, config.alpha, config.weight_decay)


def build_samples(
    dataset: Sequence[AnnotatedImage], templates: TemplateSet, config: TrainConfig, rng: np.random.Generator
) -> SampleArrays:
    samples: list[TrainingSample] = []
    for rec in dataset:
        truths = [b for b in rec.boxes if b.w > 0 and b.h > 0]
        src = CropSource(rec.pixels)
        pos = sample_positives(src, truths, templates, config, rng) if truths else []
        neg = sample_negatives(
            src,
            truths,
            config.negatives_per_image,
            config,
            rng,
            templates.receptive_field,
            [p.source_box for p in pos],
            templates.background,
        )
        samples.extend(pos)
        samples.extend(neg)
    return SampleArrays.from_samples(samples)


def make_initial_model(dataset: Sequence[AnnotatedImage], config: TrainConfig) -> Model:
    """Templates clustered from the dataset plus freshly initialized weights."""
    spec = builtin_spec(config.arch, config.num_classes, config.width)
    boxes = [b for rec in dataset for b in rec.boxes]
    templates = cluster_templates(boxes, config.num_classes, spec.input_size, config.template_mode)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = init_model(spec, np.random.default_rng(seeds[0]), config.init_value(), templates)
    model.meta.update({k: v for k, v in asdict(config).items()})
    model.meta["width"] = float(config.width)
    return model


def train(
    dataset: Sequence[AnnotatedImage],
    config: TrainConfig,
    model: Model | None = None,
    samples: SampleArrays | None = None,
    on_iteration: Callable[[int, LossParts], None] | None = None,
) -> tuple[Model, list[tuple[int, float, float, float]]]:
    """Minibatch SGD over shuffled training samples.

    Returns the trained model and the loss curve as
    ``(iteration, total, cls, reg)`` rows.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if model is None:
        model = make_initial_model(dataset, config)
    else:
        model = model.copy()
    if samples is None:
        samples = build_samples(dataset, model.templates, config, np.random.default_rng(seeds[1]))
    k = model.num_classes
    if not (np.any(samples.labels == k) and np.any(samples.labels != k)):
        raise ValueError("training needs both positive and negative samples")
    logger.info(
        "training on %d samples (%d positive), %d iterations",
        len(samples), int(np.sum(samples.labels != k)), config.iterations,
    )

    rng = np.random.default_rng(seeds[2])
    dtype = model.params[0][0].dtype
    curve = []
    n = len(samples)
    bs = min(config.batch_size, n)
    for it in range(1, config.iterations + 1):
        idx = rng.choice(n, size=bs, replace=False)
        batch = samples.take(idx)
        x = to_input(batch.patches).astype(dtype, copy=False)
        parts, grads = batch_loss(model, x, batch.labels, batch.targets, config.alpha, config.weight_decay)
        if not math.isfinite(parts.total):
            raise TrainingDivergedError(
                f"loss became {parts.total} at iteration {it} (cls={parts.cls}, reg={parts.reg}); "
                f"last finite losses: {curve[-3:]}"
            )
        lr = config.lr_at(it)
        if lr:
            for (kern, bias), (gk, gb) in zip(model.params, grads):
                kern -= (lr * gk).astype(dtype, copy=False)
                bias -= (lr * gb).astype(dtype, copy=False)
        curve.append((it, parts.total, parts.cls, parts.reg))
        if on_iteration is not None:
            on_iteration(it, parts)
    return model, curve
