"""Loss, training loop, and dataset evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data_io
from .autograd import AdamState, Tape, adam_step, dice_bce_value
from .errors import ConfigError
from .metrics import (
    DEFAULT_THRESHOLD,
    MetricRow,
    aggregate_counts,
    aggregate_dataset,
    compute_metrics,
    confusion_counts,
    write_report,
)
from .model import ModelParams, build_model, model_forward, record_forward

log = logging.getLogger(__name__)


def dice_bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean clamped BCE plus (1 - smoothed Dice) over the whole batch."""
    return float(dice_bce_value(np.asarray(pred), np.asarray(target)).reshape(-1)[0])


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr: float = 1e-4
    seed: int = 1
    input_size: int = 64
    loss_kind: str = "dice_bce"
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input size must be a positive multiple of 16, got {self.input_size}")
        if self.loss_kind != "dice_bce":
            raise ConfigError(f"unsupported loss {self.loss_kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    optimizer: AdamState


def load_dataset(manifest: data_io.SampleManifest, size: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = [data_io.load_sample(img, mask, size) for img, mask in manifest]
    return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])


def train_step(params: ModelParams, images: np.ndarray, masks: np.ndarray, state: AdamState) -> float:
    """One forward/backward pass and Adam update; returns the batch loss."""
    tape = Tape()
    out, ids = record_forward(tape, params, images, mode="train")
    loss = tape.dice_bce(out, tape.leaf(masks, trainable=False))
    grads = tape.backward(loss)
    adam_step(params.tensors, {name: grads[i] for name, i in ids.items()}, state)
    return float(tape.value(loss).reshape(-1)[0])


def train(
    cfg: TrainConfig,
    manifest: data_io.SampleManifest,
    params: Optional[ModelParams] = None,
    loss_log=None,
) -> TrainResult:
    """Train from ``cfg.seed``-initialised weights (or ``params``, updated in place).

    Each epoch visits the samples in an order drawn from a PRNG seeded once
    with ``cfg.seed``; the final batch may be short.
    """
    images, masks = load_dataset(manifest, cfg.input_size)
    if params is None:
        params = build_model(cfg.input_size, in_ch=images.shape[1], seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    n = len(images)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            total += train_step(params, images[idx], masks[idx], state) * len(idx)
        losses.append(total / n)
        log.info("epoch %d loss %.6f", epoch, losses[-1])
    if loss_log is not None:
        write_loss_log(loss_log, losses)
    return TrainResult(params, losses, state)


def write_loss_log(path, losses) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for i, v in enumerate(losses, 1):
            w.writerow((i, repr(float(v))))


def smoothed(losses, window: int = 10) -> list[float]:
    """Means of consecutive non-overlapping ``window``-epoch blocks."""
    return [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]


def predict_mask(params: ModelParams, image: data_io.ImageBuffer, threshold: float = DEFAULT_THRESHOLD,
                 size: Optional[int] = None) -> np.ndarray:
    """Binary (h, w) mask at the image's own resolution."""
    size = size or params.arch.input_size
    x = data_io.normalize_image(data_io.resize_bilinear(image, size, size))
    prob = model_forward(params, x, mode="infer")[0, 0]
    small = data_io.ImageBuffer((prob >= threshold).astype(np.uint8))
    return data_io.resize_nearest(small, image.w, image.h).pixels[:, :, 0]


@dataclass
class EvalResult:
    names: list[str]
    rows: list[MetricRow]
    mean: MetricRow
    micro: MetricRow
    counts: list = field(default_factory=list)


def evaluate(
    params: Optional[ModelParams],
    manifest: data_io.SampleManifest,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    size: Optional[int] = None,
    report_path=None,
    micro: bool = False,
    use_ground_truth: bool = False,
) -> EvalResult:
    """Score every image at its mask's native resolution.

    With ``use_ground_truth`` the ground truth stands in for the prediction,
    which checks the evaluation path itself (every metric is 1.0).
    """
    names, rows, counts = [], [], []
    for img_path, mask_path in manifest:
        try:
            gt = data_io.binarize_mask(data_io.read_pnm(mask_path))[0, 0]
            if use_ground_truth:
                pred = gt
            else:
                pred = predict_mask(params, data_io.read_pnm(img_path), threshold, size)
        except data_io.PNMError as e:
            raise data_io.ManifestError(f"{img_path} / {mask_path}: {e}") from e
        if pred.shape != gt.shape:
            raise data_io.ManifestError(f"{img_path}: image {pred.shape} and mask {gt.shape} sizes differ")
        c = confusion_counts(pred.astype(np.float32), gt, threshold)
        names.append(Path(img_path).name)
        rows.append(compute_metrics(c))
        counts.append(c)
    micro_row = aggregate_counts(counts)
    if report_path is not None:
        write_report(report_path, names, rows, micro_row if micro else None)
    return EvalResult(names, rows, aggregate_dataset(rows), micro_row, counts)
