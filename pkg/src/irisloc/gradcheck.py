"""Finite-difference verification of every differentiable operation.

Each case builds a small float64 graph, computes analytic gradients via
backward(), then re-evaluates the forward pass with each input element
nudged by +-h (central differences, h = 1e-3) and compares. The error
measure is elementwise |analytic - numeric| / max(1, |analytic|, |numeric|),
i.e. relative for large gradients and absolute near zero.

Inputs are conditioned away from the non-smooth points of relu and maxpool
(kinks and ties) since central differences are invalid across them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import models
from . import tensor as T
from .rng import mix64, uniform

H_STEP = 1e-3
TOLERANCE = 1e-4
DEFAULT_SEEDS = 10


def _arr(seed: int, shape: tuple[int, ...], lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return uniform(seed, int(np.prod(shape)), lo, hi).reshape(shape)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # relu is non-differentiable at 0; push elements out of the FD window
    near = np.abs(x) < margin
    x = x.copy()
    x[near] += margin * 2 * np.where(x[near] >= 0, 1.0, -1.0)
    return x


def _pool_safe(seed: int, shape: tuple[int, ...], margin: float = 0.05) -> np.ndarray:
    # reject draws whose 2x2 windows have a top-two gap below the margin
    for attempt in range(100):
        x = _arr(mix64(seed, attempt), shape)
        n, c, h, w = shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) >= margin:
            return x
    raise RuntimeError("could not draw a tie-free maxpool input")


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def fd_grad(fwd, leaf: T.Tensor, h: float = H_STEP) -> np.ndarray:
    flat = leaf.data.reshape(-1)
    grad = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fwd().item()
            flat[i] = orig - h
            fm = fwd().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(leaf.data.shape)


def _check(leaves: dict[str, T.Tensor], fwd, perturb: bool = False) -> float:
    loss = fwd()
    loss.backward()
    worst = 0.0
    for leaf in leaves.values():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if perturb:
            analytic = analytic + 1e-2
        worst = max(worst, rel_err(analytic, fd_grad(fwd, leaf)))
    return worst


# -- cases ---------------------------------------------------------------------


def _case_conv2d(seed: int):
    x = T.Tensor(_arr(mix64(seed, 1), (1, 2, 6, 6)), requires_grad=True)
    w = T.Tensor(_arr(mix64(seed, 2), (3, 2, 3, 3)), requires_grad=True)
    b = T.Tensor(_arr(mix64(seed, 3), (3,)), requires_grad=True)
    proj = _arr(mix64(seed, 4), (1, 3, 6, 6))
    return {"x": x, "w": w, "b": b}, lambda: (T.conv2d(x, w, b, 1, 1) * T.Tensor(proj)).sum()


def _case_conv2d_strided(seed: int):
    x = T.Tensor(_arr(mix64(seed, 1), (2, 1, 5, 5)), requires_grad=True)
    w = T.Tensor(_arr(mix64(seed, 2), (2, 1, 3, 3)), requires_grad=True)
    b = T.Tensor(_arr(mix64(seed, 3), (2,)), requires_grad=True)
    proj = _arr(mix64(seed, 4), (2, 2, 2, 2))
    return {"x": x, "w": w, "b": b}, lambda: (T.conv2d(x, w, b, 2, 0) * T.Tensor(proj)).sum()


def _case_maxpool2(seed: int):
    x = T.Tensor(_pool_safe(mix64(seed, 1), (1, 2, 6, 6)), requires_grad=True)
    proj = _arr(mix64(seed, 2), (1, 2, 3, 3))
    return {"x": x}, lambda: (T.maxpool2(x) * T.Tensor(proj)).sum()


def _case_upsample(seed: int):
    x = T.Tensor(_arr(mix64(seed, 1), (1, 2, 3, 4)), requires_grad=True)
    proj = _arr(mix64(seed, 2), (1, 2, 6, 8))
    return {"x": x}, lambda: (T.upsample_nearest2(x) * T.Tensor(proj)).sum()


def _case_relu(seed: int):
    x = T.Tensor(_away_from_zero(_arr(mix64(seed, 1), (1, 3, 4, 4))), requires_grad=True)
    proj = _arr(mix64(seed, 2), (1, 3, 4, 4))
    return {"x": x}, lambda: (T.relu(x) * T.Tensor(proj)).sum()


def _case_sigmoid(seed: int):
    x = T.Tensor(_arr(mix64(seed, 1), (2, 1, 3, 5), -4.0, 4.0), requires_grad=True)
    proj = _arr(mix64(seed, 2), (2, 1, 3, 5))
    return {"x": x}, lambda: (T.sigmoid(x) * T.Tensor(proj)).sum()


def _case_concat(seed: int):
    a = T.Tensor(_arr(mix64(seed, 1), (1, 2, 3, 3)), requires_grad=True)
    b = T.Tensor(_arr(mix64(seed, 2), (1, 3, 3, 3)), requires_grad=True)
    proj = _arr(mix64(seed, 3), (1, 5, 3, 3))
    return {"a": a, "b": b}, lambda: (T.concat_channels(a, b) * T.Tensor(proj)).sum()


def _case_coord_augment(seed: int):
    x = T.Tensor(_arr(mix64(seed, 1), (1, 2, 4, 6)), requires_grad=True)
    proj = _arr(mix64(seed, 2), (1, 4, 4, 6))
    return {"x": x}, lambda: (T.coord_augment(x) * T.Tensor(proj)).sum()


def _case_arith(seed: int):
    a = T.Tensor(_arr(mix64(seed, 1), (3, 4)), requires_grad=True)
    b = T.Tensor(_arr(mix64(seed, 2), (3, 4)), requires_grad=True)
    c = T.Tensor(_arr(mix64(seed, 3), (3, 4), 0.5, 1.5), requires_grad=True)

    def fwd():
        mixed = a * b + a / c - 3.0 * a + (1.0 - b)
        return mixed.mean() * 2.0 + (a * a).sum() / 7.0

    return {"a": a, "b": b, "c": c}, fwd


def _case_dice(seed: int):
    pred = T.Tensor(_arr(mix64(seed, 1), (8, 8), 0.05, 0.95), requires_grad=True)
    gt = (_arr(mix64(seed, 2), (8, 8)) > 0.0).astype(np.float64)
    return {"pred": pred}, lambda: L.dice_loss(pred, gt)


def _case_boundary(seed: int):
    pred = T.Tensor(_arr(mix64(seed, 1), (8, 8), 0.0, 1.0), requires_grad=True)
    sdm = L.signed_distance_map(_arr(mix64(seed, 2), (8, 8)) > 0.2).astype(np.float64)
    return {"pred": pred}, lambda: L.boundary_loss(pred, sdm)


def _case_total_seg(seed: int):
    pred = T.Tensor(_arr(mix64(seed, 1), (8, 8), 0.05, 0.95), requires_grad=True)
    gt = (_arr(mix64(seed, 2), (8, 8)) > 0.0).astype(np.float64)
    return {"pred": pred}, lambda: L.total_seg_loss(pred, gt)


def _case_mse(seed: int):
    pred = T.Tensor(_arr(mix64(seed, 1), (8, 8)), requires_grad=True)
    gt = _arr(mix64(seed, 2), (8, 8))
    return {"pred": pred}, lambda: L.mse_heatmap_loss(pred, gt)


def _model_leaves(net: models.Network, x: T.Tensor) -> dict[str, T.Tensor]:
    leaves = {"input": x}
    leaves.update(net.params)
    return leaves


def _smooth_point(net: models.Network, x: T.Tensor, margin: float = 0.01) -> bool:
    """True when no relu input or positive maxpool window sits within
    ``margin`` of a kink/tie, so central differences stay valid there."""
    tr: list = []
    with T.no_grad():
        models.forward(net, x, trace=tr)
    prev = x.data
    for kind, val in tr:
        if kind == "relu" and np.min(np.abs(prev)) < margin:
            return False
        if kind == "res.conv" and np.min(np.abs(val)) < margin:
            return False
        if kind == "pool":
            n, c, h, w = prev.shape
            win = prev.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            top2 = np.sort(win.reshape(-1, 4), axis=1)[:, -2:]
            live = top2[:, 1] > 0
            if live.any() and np.min(top2[live, 1] - top2[live, 0]) < margin:
                return False
        prev = val
    return True


def _smooth_model_case(build_case, seed: int):
    for attempt in range(500):
        net, x, fwd = build_case(mix64(seed, attempt))
        if _smooth_point(net, x):
            return _model_leaves(net, x), fwd
    raise RuntimeError("could not find a kink-free model evaluation point")


def _case_unet_coord(seed: int):
    def build(s: int):
        cfg = models.ModelConfig(models.UNET_COORD, (4, 4), base_channels=1, depth=2)
        net = models.build_unet_coord(cfg, s).cast(np.float64)
        x = T.Tensor(_arr(mix64(s, 99), (1, 1, 4, 4), 0.0, 1.0), requires_grad=True)
        target = _arr(mix64(s, 98), (1, 1, 4, 4), 0.0, 1.0)
        return net, x, lambda: L.mse_heatmap_loss(models.forward(net, x), target)

    return _smooth_model_case(build, seed)


def _case_u2net_lite(seed: int):
    def build(s: int):
        cfg = models.ModelConfig(models.U2NET_LITE, (4, 4), base_channels=2, depth=2, rsu_inner_depth=2)
        net = models.build_u2net_lite(cfg, s).cast(np.float64)
        x = T.Tensor(_arr(mix64(s, 99), (1, 1, 4, 4), 0.0, 1.0), requires_grad=True)
        gt = (_arr(mix64(s, 98), (1, 1, 4, 4)) > 0.0).astype(np.float64)
        return net, x, lambda: L.total_seg_loss(models.forward(net, x), gt)

    return _smooth_model_case(build, seed)


CASES = [
    ("conv2d", _case_conv2d),
    ("conv2d_strided", _case_conv2d_strided),
    ("maxpool2", _case_maxpool2),
    ("upsample_nearest2", _case_upsample),
    ("relu", _case_relu),
    ("sigmoid", _case_sigmoid),
    ("concat_channels", _case_concat),
    ("coord_augment", _case_coord_augment),
    ("arithmetic", _case_arith),
    ("dice_loss", _case_dice),
    ("boundary_loss", _case_boundary),
    ("total_seg_loss", _case_total_seg),
    ("mse_heatmap_loss", _case_mse),
    ("unet_coord_composite", _case_unet_coord),
    ("u2net_lite_composite", _case_u2net_lite),
]


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def run_case(name: str, seed: int = 0, seeds: int = DEFAULT_SEEDS, perturb: bool = False) -> CheckResult:
    case_fn = dict(CASES)[name]
    worst = 0.0
    for k in range(seeds):
        leaves, fwd = case_fn(mix64(seed, 7000 + k))
        worst = max(worst, _check(leaves, fwd, perturb=perturb))
    return CheckResult(name, worst, worst < TOLERANCE)


def run_all(seed: int = 0, seeds: int = DEFAULT_SEEDS, perturb_op: str | None = None) -> list[CheckResult]:
    """Run every case; ``perturb_op`` injects a deliberate analytic-gradient
    offset into one case (test harness hook for the failure path)."""
    if perturb_op is not None and perturb_op not in dict(CASES):
        raise ValueError(f"unknown gradcheck case {perturb_op!r}")
    return [run_case(name, seed, seeds, perturb=(name == perturb_op)) for name, _ in CASES]
