"""Deterministic training loops for both pipelines plus end-to-end
evaluation and latency measurement.

Training is step-based: each step draws the next batch from a per-epoch
seeded shuffle, runs forward/loss/backward and one optimiser step. With
identical (config, records, seed) two runs produce byte-identical
checkpoints.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import losses as L
from . import metrics as M
from . import models
from . import tensor as T
from .localise import argmax_point, binarize, gaussian_heatmap, largest_blob_centroid
from .rng import mix64, shuffled, uniform

SEGMENTATION = "segmentation"
REGRESSION = "regression"

_VARIANT_FOR_TASK = {SEGMENTATION: models.U2NET_LITE, REGRESSION: models.UNET_COORD}


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step index and batch sample ids."""

    def __init__(self, step: int, sample_ids: list[str]):
        super().__init__(f"non-finite loss at step {step} on samples {sample_ids}")
        self.step = step
        self.sample_ids = sample_ids


@dataclass
class TrainConfig:
    task: str
    model: models.ModelConfig
    optimiser: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 500
    seed: int = 0
    heatmap_sigma: float = 3.0
    boundary_weight: float = 1.0
    threshold: float = 0.5
    checkpoint_every: int = 0
    augment_flip: bool = False

    def __post_init__(self):
        if self.task not in _VARIANT_FOR_TASK:
            raise ValueError(f"task must be one of {sorted(_VARIANT_FOR_TASK)}, got {self.task!r}")
        expected = _VARIANT_FOR_TASK[self.task]
        if self.model.variant != expected:
            raise ValueError(
                f"task {self.task} requires model variant {expected!r}, got {self.model.variant!r}"
            )
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValueError("batch_size and max_steps must be >= 1")
        if self.task == REGRESSION and not self.heatmap_sigma > 0:
            raise ValueError("regression requires heatmap_sigma > 0")
        if self.optimiser not in ("adam", "sgd"):
            raise ValueError(f"optimiser must be adam or sgd, got {self.optimiser!r}")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    step_ms: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None

    def write(self, path) -> None:
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for i, (loss, ms) in enumerate(zip(self.losses, self.step_ms)):
                fh.write(json.dumps({"step": i, "loss": loss, "ms": ms}) + "\n")


def _prepare(cfg: TrainConfig, records: list[D.SampleRecord], base_dir: str):
    D.validate_for_task(records, cfg.task)
    images, targets, ids = [], [], []
    h, w = cfg.model.input_size
    for rec in records:
        sample = D.load_sample(rec, base_dir)
        if sample.image.shape != (h, w):
            raise ValueError(
                f"sample '{rec.id}' has shape {sample.image.shape}, model expects {h}x{w}"
            )
        images.append(sample.image)
        if cfg.task == SEGMENTATION:
            targets.append(
                (sample.mask.astype(np.float32), L.signed_distance_map(sample.mask))
            )
        else:
            targets.append(gaussian_heatmap(sample.center, (h, w), cfg.heatmap_sigma))
        ids.append(rec.id)
    return images, targets, ids


def _flip_target(cfg: TrainConfig, target):
    if cfg.task == SEGMENTATION:
        m, sdm = target
        return np.ascontiguousarray(m[:, ::-1]), np.ascontiguousarray(sdm[:, ::-1])
    return np.ascontiguousarray(target[:, ::-1])


def train(
    cfg: TrainConfig,
    records: list[D.SampleRecord],
    ckpt_path,
    log_path=None,
    base_dir: str = ".",
) -> tuple[models.Network, TrainLog]:
    """Train per config, write the final checkpoint, return (net, log)."""
    if not records:
        raise ValueError("training needs at least one record")
    images, targets, ids = _prepare(cfg, records, base_dir)
    net = models.build(cfg.model, cfg.seed)
    params = net.parameters()
    if cfg.optimiser == "adam":
        opt = T.Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    else:
        opt = T.SGD(params, lr=cfg.lr)

    log = TrainLog()
    n = len(images)
    step = 0
    epoch = 0
    while step < cfg.max_steps:
        order = shuffled(n, mix64(cfg.seed, 1000 + epoch))
        flips = (
            uniform(mix64(cfg.seed, 5000 + epoch), n) < 0.5
            if cfg.augment_flip
            else np.zeros(n, dtype=bool)
        )
        for start in range(0, n, cfg.batch_size):
            if step >= cfg.max_steps:
                break
            t0 = time.perf_counter()
            batch_idx = order[start : start + cfg.batch_size]
            xs, ts = [], []
            for i in batch_idx:
                if flips[i]:
                    xs.append(np.ascontiguousarray(images[i][:, ::-1]))
                    ts.append(_flip_target(cfg, targets[i]))
                else:
                    xs.append(images[i])
                    ts.append(targets[i])
            x = T.Tensor(np.stack(xs)[:, None, :, :])
            out = models.forward(net, x)
            if cfg.task == SEGMENTATION:
                gt = np.stack([t[0] for t in ts])[:, None, :, :]
                sdm = np.stack([t[1] for t in ts])[:, None, :, :]
                loss = L.total_seg_loss(out, gt, weight=cfg.boundary_weight, sdm=sdm)
            else:
                gt = np.stack(ts)[:, None, :, :]
                loss = L.mse_heatmap_loss(out, gt)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, [ids[i] for i in batch_idx])
            loss.backward()
            opt.step()
            opt.zero_grad()
            log.losses.append(value)
            log.step_ms.append((time.perf_counter() - t0) * 1000.0)
            step += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                models.save_checkpoint(net, ckpt_path)
        epoch += 1
    models.save_checkpoint(net, ckpt_path)
    log.checkpoint_path = str(ckpt_path)
    if log_path is not None:
        log.write(log_path)
    return net, log


# -- evaluation ----------------------------------------------------------------


def _predict_centers(
    net: models.Network,
    images: list[np.ndarray],
    task: str,
    threshold: float,
    batch: int = 16,
):
    """Per-image soft maps and centre predictions, batched, without grads."""
    maps, centers = [], []
    with T.no_grad():
        for start in range(0, len(images), batch):
            x = np.stack(images[start : start + batch])[:, None, :, :]
            out = models.forward(net, T.Tensor(x)).data[:, 0]
            for m in out:
                maps.append(m)
                if task == SEGMENTATION:
                    centers.append(largest_blob_centroid(binarize(m, threshold)))
                else:
                    centers.append(argmax_point(m))
    return maps, centers


def evaluate(
    net: models.Network,
    records: list[D.SampleRecord],
    task: str,
    base_dir: str = ".",
    threshold: float = 0.5,
    sigma: float | None = None,
    dataset_name: str = "dataset",
    model_id: str = "",
) -> M.EvalReport:
    """Forward every record and assemble the metric report.

    Segmentation reports pixel metrics plus the centroid localisation path;
    regression reports the argmax path. Faces with both eyes present
    contribute one d value each; absent prerequisites leave the
    corresponding metrics as None.
    """
    if not records:
        raise ValueError("evaluation needs at least one record")
    if task not in _VARIANT_FOR_TASK:
        raise ValueError(f"unknown task {task!r}")
    if net.config.variant != _VARIANT_FOR_TASK[task]:
        raise ValueError(
            f"checkpoint variant {net.config.variant!r} cannot run task {task!r}"
        )
    samples = [D.load_sample(rec, base_dir) for rec in records]
    maps, centers = _predict_centers(net, [s.image for s in samples], task, threshold)

    report = M.EvalReport(
        dataset=dataset_name,
        n_samples=len(records),
        model_id=model_id,
        sigma=sigma,
        threshold=threshold if task == SEGMENTATION else None,
    )

    if task == SEGMENTATION:
        per: dict[str, list[float]] = {k: [] for k in ("ei", "precision", "recall", "f1", "dice")}
        for s, m in zip(samples, maps):
            if s.mask is None:
                continue
            c = M.confusion(binarize(m, threshold), s.mask)
            p, r, f1 = M.precision_recall_f1(c)
            per["ei"].append((c.fp + c.fn) / c.total)
            per["precision"].append(p)
            per["recall"].append(r)
            per["f1"].append(f1)
            per["dice"].append(M.dice_coefficient(c))
        if per["ei"]:
            report.per_image = per
            report.ei = float(np.mean(per["ei"]))
            report.precision = float(np.mean(per["precision"]))
            report.recall = float(np.mean(per["recall"]))
            report.f1 = float(np.mean(per["f1"]))
            report.dice = float(np.mean(per["dice"]))

    pixel_errors = []
    for s, c in zip(samples, centers):
        if s.center is None:
            continue
        if c is None:
            pixel_errors.append(math.inf)
        else:
            pixel_errors.append(math.hypot(c.x - s.center.x, c.y - s.center.y))
    if pixel_errors:
        report.pixel_errors = pixel_errors
        finite = [e for e in pixel_errors if math.isfinite(e)]
        report.mean_pixel_error = float(np.mean(finite)) if finite else math.inf

    by_face: dict[str, dict[str, tuple]] = {}
    for s, c in zip(samples, centers):
        if s.center is None or s.record.interocular_px is None:
            continue
        by_face.setdefault(s.record.face_id, {})[s.record.side] = (c, s.center, s.record.interocular_px)
    ds = []
    for face, sides in sorted(by_face.items()):
        if set(sides) != {"L", "R"}:
            continue
        (cl, gl, il), (cr, gr, ir) = sides["L"], sides["R"]
        if abs(il - ir) > 1e-6 * max(il, ir):
            raise ValueError(f"face '{face}' has inconsistent interocular distances {il} vs {ir}")
        ds.append(M.max_normalized_error(cl, cr, gl, gr, il))
    if ds:
        report.d_values = ds
        report.hit_rates = M.hit_rates(ds)
    return report


def measure_latency(
    net: models.Network,
    task: str,
    n_runs: int = 100,
    warmup: int = 10,
    threshold: float = 0.5,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Single-image forward + post-processing timings on this thread.

    Warm-up runs are excluded; forward and post-processing are reported
    separately plus combined.
    """
    if n_runs < 10:
        raise ValueError("n_runs must be >= 10")
    h, w = net.config.input_size
    img = uniform(seed, h * w).astype(np.float32).reshape(1, 1, h, w)
    fwd_ms, post_ms = [], []
    with T.no_grad():
        for i in range(warmup + n_runs):
            t0 = time.perf_counter()
            out = models.forward(net, T.Tensor(img)).data[0, 0]
            t1 = time.perf_counter()
            if task == SEGMENTATION:
                largest_blob_centroid(binarize(out, threshold))
            else:
                argmax_point(out)
            t2 = time.perf_counter()
            if i >= warmup:
                fwd_ms.append((t1 - t0) * 1000.0)
                post_ms.append((t2 - t1) * 1000.0)

    def stats(xs: list[float]) -> dict[str, float]:
        arr = np.array(xs)
        return {
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "p95": float(np.percentile(arr, 95)),
        }

    total = [a + b for a, b in zip(fwd_ms, post_ms)]
    return {"forward_ms": stats(fwd_ms), "postproc_ms": stats(post_ms), "total_ms": stats(total)}
