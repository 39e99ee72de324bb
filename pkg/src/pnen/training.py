"""Optimiser, schedule, augmentation, synthetic data and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as pio
from .backbone import PnenModel, pnen_loss
from .config import RunConfig
from .errors import DataError, NumericError
from .filters import apply_filter, gaussian_blur
from .metrics import psnr
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_HEADER = ["step", "epoch", "lr", "loss"]


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("adam_step: non-finite gradient, step aborted")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm <= 0 or total <= max_norm:
        return grads
    return [g * (max_norm / total) for g in grads]


# --- learning-rate plateau schedule ------------------------------------------------


@dataclass
class PlateauState:
    lr: float = 5e-4
    floor: float = 1e-4
    patience: int = 5
    min_delta: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0


def lr_schedule(history: list[float], state: PlateauState) -> float:
    """Feed the newest epoch loss; halve the lr after ``patience`` epochs without improvement."""
    if not history:
        return state.lr
    loss = history[-1]
    if loss < state.best * (1 - state.min_delta):
        state.best = loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.lr = max(state.lr / 2, state.floor)
        state.bad_epochs = 0
    return state.lr


# --- augmentation ---------------------------------------------------------------


def augment(x: np.ndarray, g: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Same random horizontal flip (p=0.5) and k*90 degree rotation on both arrays."""
    if x.shape != g.shape:
        raise DataError(f"augment: shapes differ {x.shape} vs {g.shape}")
    flip = rng.random() < 0.5
    k = int(rng.integers(4))
    return _transform(x, flip, k), _transform(g, flip, k)


def _transform(a: np.ndarray, flip: bool, k: int) -> np.ndarray:
    if flip:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, k, axes=(-2, -1)))


# --- synthetic textures ---------------------------------------------------------------


@dataclass(frozen=True)
class TextureSpec:
    count: int = 16
    size: int = 128
    channels: int = 3
    cells: int = 10
    amplitude: float = 0.02
    low: float = 0.1
    high: float = 0.9


def _voronoi_labels(size, cells, rng):
    pts = rng.uniform(0, size, size=(cells, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return d.argmin(axis=-1)


def _color_classes(labels, cells):
    """Greedy smallest-last colouring of the region adjacency graph."""
    adj = {i: set() for i in range(cells)}
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1], labels[1:])):
        diff = a != b
        for u, v in zip(a[diff], b[diff]):
            adj[int(u)].add(int(v))
            adj[int(v)].add(int(u))
    remaining = {i: set(n) for i, n in adj.items()}
    order = []
    while remaining:
        i = min(remaining, key=lambda k: (len(remaining[k]), k))
        order.append(i)
        for j in remaining.pop(i):
            if j in remaining:
                remaining[j].discard(i)
    colour = {}
    for i in reversed(order):
        used = {colour[j] for j in adj[i] if j in colour}
        colour[i] = next(k for k in range(cells + 1) if k not in used)
    return np.array([colour[i] for i in range(cells)])


def _band_limited(size, rng):
    noise = gaussian_blur(rng.standard_normal((size, size)), 1.0)
    return (noise - noise.mean()) / noise.std()


def synth_region_image(spec: TextureSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One synthetic image with its region labels and flat (texture-free) base."""
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    labels = _voronoi_labels(spec.size, spec.cells, rng)
    present = np.unique(labels)
    classes = _color_classes(labels, spec.cells)
    k = max(int(classes[present].max()) + 1, 2)
    levels = np.linspace(spec.low, spec.high, k)
    # independent permutation per channel keeps every boundary a step in every channel
    base = np.stack([rng.permutation(levels)[classes][labels] for _ in range(spec.channels)])
    texture = np.zeros((spec.size, spec.size))
    for cell in present:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.35)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        texture[labels == cell] = grating[labels == cell]
    texture = 0.5 * texture / texture.std() + 0.5 * _band_limited(spec.size, rng)
    texture /= texture.std()
    return np.clip(base + spec.amplitude * texture, 0.0, 1.0), labels, base


def synth_textures(spec: TextureSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Piecewise-constant Voronoi regions plus per-region oscillating textures.

    Adjacent regions receive distinct grey levels from an evenly spaced
    palette, so every boundary carries a step of at least
    ``(high - low) / (classes - 1)``. Returns (channels, size, size) arrays.
    """
    return [synth_region_image(spec, rng)[0] for _ in range(spec.count)]


# --- training loop ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: PnenModel
    losses: list[float]
    lrs: list[float]
    checkpoint: Path | None = None
    loss_csv: Path | None = None


def load_training_images(cfg: RunConfig) -> list[np.ndarray]:
    if cfg.dataset:
        root = Path(cfg.dataset)
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm")) if root.is_dir() else []
        if not files:
            raise DataError(f"no .pgm/.ppm images in {root}")
        images = [pio.read_image(p) for p in files]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        spec = TextureSpec(count=cfg.synth_count, size=cfg.synth_size, channels=cfg.c, amplitude=cfg.synth_amplitude)
        images = synth_textures(spec, rng)
    for img in images:
        if img.shape[0] != cfg.c:
            raise DataError(f"image has {img.shape[0]} channels, config expects c={cfg.c}")
        if min(img.shape[1:]) < cfg.patch_size:
            raise DataError(f"image {img.shape[1:]} smaller than patch_size {cfg.patch_size}")
    return images


def sample_batch(images, targets, cfg: RunConfig, rng: np.random.Generator, dtype) -> tuple[Tensor, Tensor]:
    p = cfg.patch_size
    xs, gs = [], []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(len(images)))
        _, h, w = images[i].shape
        y0 = int(rng.integers(h - p + 1))
        x0 = int(rng.integers(w - p + 1))
        x, g = augment(images[i][:, y0 : y0 + p, x0 : x0 + p], targets[i][:, y0 : y0 + p, x0 : x0 + p], rng)
        xs.append(x)
        gs.append(g)
    return Tensor(np.stack(xs).astype(dtype)), Tensor(np.stack(gs).astype(dtype))


def predict(model: PnenModel, img: np.ndarray) -> np.ndarray:
    """Run one (c, h, w) image through the model in eval mode."""
    was_training = model.training
    model.eval()
    try:
        Y, _ = model(Tensor(img[None].astype(model.cfg.np_dtype)))
    finally:
        model.train(was_training)
    return Y.data[0].astype(np.float64)


def evaluate_psnr(model: PnenModel, images, targets) -> tuple[float, float]:
    """Mean PSNR of the model and of the identity map against ``targets``."""
    model_scores = [psnr(np.clip(predict(model, x), 0, 1), g) for x, g in zip(images, targets)]
    ident_scores = [psnr(x, g) for x, g in zip(images, targets)]
    return float(np.mean(model_scores)), float(np.mean(ident_scores))


def _fmt(v: float) -> str:
    return repr(float(v))


def train(cfg: RunConfig, out_dir=None, images=None) -> TrainResult:
    """Run the full loop; writes ``loss.csv`` and a final checkpoint into ``out_dir``."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    model = PnenModel(cfg.model_config())
    dtype = model.cfg.np_dtype
    images = images if images is not None else load_training_images(cfg)
    spec = cfg.filter_spec()
    targets = [apply_filter(img, spec) for img in images]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    names, params = zip(*model.named_parameters())
    adam = AdamState(lr=cfg.lr_init, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    plateau = PlateauState(lr=cfg.lr_init, floor=cfg.lr_floor, patience=cfg.plateau_patience, min_delta=cfg.plateau_min_delta)
    losses, lrs, epoch_means = [], [], []

    csv_path = out / "loss.csv" if out else None
    fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(LOSS_HEADER)
    step = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for _ in range(cfg.steps_per_epoch):
                X, G = sample_batch(images, targets, cfg, rng, dtype)
                try:
                    model.zero_grad()
                    with Tape() as tape:
                        Y, Ys = model(X)
                        loss = pnen_loss(Y, Ys, G)
                    tape.backward(loss)
                    grads = clip_by_global_norm([p.grad for p in params], cfg.clip_grad)
                    adam_step(list(params), grads, adam)
                except NumericError:
                    if out:
                        pio.write_tensor(out / "bad_batch_input.pnt", X.data)
                        pio.write_tensor(out / "bad_batch_target.pnt", G.data)
                    raise
                step += 1
                value = loss.item()
                losses.append(value)
                lrs.append(adam.lr)
                epoch_losses.append(value)
                if writer:
                    writer.writerow([step, epoch, _fmt(adam.lr), _fmt(value)])
            epoch_means.append(float(np.mean(epoch_losses)))
            adam.lr = lr_schedule(epoch_means, plateau)
            log.info("epoch %d mean loss %.6g lr %.3g", epoch, epoch_means[-1], adam.lr)
            if out and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                pio.save_checkpoint(model, out / f"epoch{epoch + 1:04d}")
    finally:
        if fh:
            fh.close()
    ckpt = None
    if out:
        ckpt, _ = pio.save_checkpoint(model, out / "final")
        (out / "run.cfg").write_text(cfg.dumps())
    return TrainResult(model, losses, lrs, ckpt, csv_path)
