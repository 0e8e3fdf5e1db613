"""Optimizer, schedules, metrics, and the two training loops.

Everything here is deterministic for a fixed config seed: the parameter
init, the patch pool order, the batch shuffle, and the Adam updates all
derive from one generator, and the metric log writes floats with repr()
so a rerun produces byte-identical files.

Gradients for a batch are accumulated sample by sample (each backward
pass is seeded with 1/batch so the result is the batch-mean gradient)
and applied with one Adam step per batch.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff, core, dataio, models

DEPTH_SCALE = 65535.0  # stored uint16 depth -> [0, 1] working range


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    batch_size: int = 10
    epochs: int = 2000
    max_steps: int = 0  # optimizer-step cap; 0 means epochs decide
    schedule: str = "step_decay"
    step_milestones: tuple = (1200, 1600)
    step_factor: float = 0.1
    plateau_factor: float = 0.8
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    seed: int = 0
    loss: str = "mse"
    patch_size: int = 32
    patch_stride: int = 16
    augment: bool = False
    augment_compose: bool = False
    eval_every: int = 1
    checkpoint_every: int = 0  # extra periodic checkpoints; 0 = best/final only

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        for name in ("step_factor", "plateau_factor"):
            f = getattr(self, name)
            if not 0 < f <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {f}")
        if self.schedule not in ("step_decay", "plateau"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss != "mse":
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.patch_size < 1 or self.patch_stride < 1:
            raise ValueError("batch_size, patch_size and patch_stride must be positive")
        if self.epochs < 0 or self.max_steps < 0:
            raise ValueError("epochs and max_steps must be non-negative")
        if self.plateau_patience < 1 or self.eval_every < 1:
            raise ValueError("plateau_patience and eval_every must be >= 1")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers per parameter name plus the step counter."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m={n: np.zeros_like(p.value) for n, p in params.items()},
            v={n: np.zeros_like(p.value) for n, p in params.items()},
        )


def adam_step(params, state, lr):
    """One bias-corrected Adam update from the gradients in the slots."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, slot in params.items():
        g = slot.grad
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name!r} at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        slot.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def schedule_lr(config, epoch, eval_history):
    """Learning rate for ``epoch`` given the eval losses seen so far.

    Pure function of its arguments.  step_decay divides lr0 by 10 for
    every milestone the epoch has passed; plateau multiplies by the decay
    factor each time the running best loss fails to improve by the
    relative threshold for ``patience`` consecutive evals.
    """
    if config.schedule == "step_decay":
        passed = sum(1 for mst in config.step_milestones if epoch >= mst)
        return config.lr0 * config.step_factor ** passed
    lr = config.lr0
    best = None
    streak = 0
    for loss in eval_history:
        improved = best is not None and (best - loss) >= config.plateau_threshold * max(abs(best), 1e-12)
        if best is None or loss < best:
            best = loss
        streak = 0 if improved else streak + 1
        if streak >= config.plateau_patience:
            lr *= config.plateau_factor
            streak = 0
    return lr


# ---------------------------------------------------------------------------
# metrics


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _mse(a, b):
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    return float(np.mean(d * d))


def psnr(a, b, max_val=1.0):
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a, b = np.asarray(a), np.asarray(b)
    _check_same_shape(a, b)
    mse = _mse(a, b)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def rmse(a, b):
    a, b = np.asarray(a), np.asarray(b)
    _check_same_shape(a, b)
    return math.sqrt(_mse(a, b))


def depth_grid_sample(depth_hr, factor):
    """Pick every factor-th pixel, top-left anchored, over the last two axes.

    Trailing rows or columns that do not fill a whole cell are cropped
    off first (with a warning) so the result matches a zero-upsampled
    round trip exactly.
    """
    x = np.asarray(depth_hr)
    f = int(factor)
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = x.shape[-2:]
    hc, wc = (h // f) * f, (w // f) * f
    if hc == 0 or wc == 0:
        raise ValueError(f"map {x.shape} smaller than one {f}x{f} cell")
    if (hc, wc) != (h, w):
        warnings.warn(f"cropping {(h, w)} to {(hc, wc)} for grid factor {f}", stacklevel=2)
        x = x[..., :hc, :wc]
    return x[..., ::f, ::f].copy()


# ---------------------------------------------------------------------------
# augmentation and patches


def _rot90(img, k):
    return np.ascontiguousarray(np.rot90(img, k, axes=(1, 2)))


def augment(img, compose=False):
    """The training-set variants of one (C, H, W) image.

    Non-composed: the original, four bicubic downscales (0.9/0.8/0.7/0.6)
    and three rotations of the original; 8 images.  Composed: every
    rotation of every scale; 20 images.
    """
    img = np.asarray(img)
    c, h, w = img.shape
    scales = [img]
    for f in (0.9, 0.8, 0.7, 0.6):
        scales.append(dataio.bicubic_resize(img, round(h * f), round(w * f)).astype(img.dtype))
    if compose:
        return [_rot90(v, k) for v in scales for k in range(4)]
    return scales + [_rot90(img, k) for k in (1, 2, 3)]


def extract_patches(hr_img, scale, m, stride):
    """Aligned (LR, HR) patch pairs from one high-res image.

    The LR image is the bicubic downscale of the HR image (cropped so the
    factor divides evenly); m-by-m patches slide over the LR grid with the
    given stride and each HR patch is the exactly matching scale-times
    region.  Returns [] when the LR image is smaller than one patch.
    """
    hr = np.asarray(hr_img)
    c, h, w = hr.shape
    hc, wc = (h // scale) * scale, (w // scale) * scale
    hr = hr[:, :hc, :wc]
    lr = dataio.bicubic_resize(hr, hc // scale, wc // scale).astype(np.float32)
    hr = hr.astype(np.float32)
    hl, wl = lr.shape[1:]
    pairs = []
    if hl < m or wl < m:
        return pairs
    for i0 in range(0, hl - m + 1, stride):
        for j0 in range(0, wl - m + 1, stride):
            lr_p = lr[:, i0:i0 + m, j0:j0 + m].copy()
            hr_p = hr[:, scale * i0:scale * (i0 + m), scale * j0:scale * (j0 + m)].copy()
            pairs.append((lr_p, hr_p))
    return pairs


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SisrImage:
    name: str
    y: np.ndarray  # (1, H, W) float32 luminance in [0, 1]


@dataclass
class JointSample:
    name: str
    depth: np.ndarray  # (1, H, W) float32, raw stored units
    guide: np.ndarray  # (3, H, W) float32 in [0, 1]


def _split_records(records):
    splits = {"train": [], "eval": []}
    for rec in records:
        if rec.role not in splits:
            raise ValueError(f"unknown split {rec.role!r} (want train or eval)")
        splits[rec.role].append(rec)
    return splits


def load_sisr_dataset(manifest_path):
    """Manifest of train/eval PNGs -> dict of luminance images per split."""
    splits = _split_records(dataio.load_manifest(manifest_path))
    out = {}
    for role, recs in splits.items():
        out[role] = [
            SisrImage(rec.target.name, dataio.rgb_to_y(dataio.load_png(rec.target)))
            for rec in recs
        ]
    return out


def load_joint_dataset(manifest_path):
    """Manifest of train/eval depth+guide pairs -> dict of samples per split."""
    splits = _split_records(dataio.load_manifest(manifest_path))
    out = {}
    for role, recs in splits.items():
        samples = []
        for rec in recs:
            if rec.guide is None:
                raise ValueError(f"{rec.target}: joint samples need a guide image")
            depth = dataio.load_pgm16(rec.target).astype(np.float32)[None]
            guide = dataio.load_png(rec.guide).astype(np.float32) / 255.0
            if guide.shape[0] != 3:
                raise ValueError(f"{rec.guide}: guide must be RGB")
            samples.append(JointSample(rec.target.name, depth, guide))
        out[role] = samples
    return out


# ---------------------------------------------------------------------------
# training loops


@dataclass
class MetricRow:
    epoch: int
    split: str
    loss: float
    psnr_db: float
    rmse: float
    lr: float


METRIC_HEADER = ["epoch", "split", "loss", "psnr_db", "rmse", "lr"]


def write_metric_csv(path, rows):
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow([r.epoch, r.split, repr(r.loss), repr(r.psnr_db), repr(r.rmse), repr(r.lr)])


def read_metric_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRIC_HEADER:
            raise ValueError(f"unexpected metric header {header}")
        return [
            MetricRow(int(e), s, float(l), float(p), float(r), float(lr_))
            for e, s, l, p, r, lr_ in reader
        ]


@dataclass
class TrainResult:
    params: dict
    best_params: dict  # plain name -> array snapshot
    history: list
    best_epoch: int
    best_eval_loss: float
    steps: int
    metrics_path: Path | None = None
    best_checkpoint: Path | None = None
    final_checkpoint: Path | None = None


def _psnr_from_mse(mse, max_val):
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def _snapshot(params):
    return {n: p.value.copy() for n, p in params.items()}


class _Loop:
    """Bookkeeping shared by the two training loops."""

    def __init__(self, spec, params, config, out_dir, max_val):
        self.spec = spec
        self.params = params
        self.config = config
        self.max_val = max_val
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.state = AdamState.for_params(params)
        self.history = []
        self.eval_losses = []
        self.best = _snapshot(params)
        self.best_loss = math.inf
        self.best_epoch = 0
        self.steps = 0
        self._save_best()

    def _path(self, name):
        return None if self.out_dir is None else self.out_dir / name

    def _save_best(self):
        path = self._path("best.atup")
        if path is not None:
            slots = {n: autodiff.ParamSlot(n, v) for n, v in self.best.items()}
            models.save_checkpoint(path, slots)

    def train_row(self, epoch, loss, lr):
        self.history.append(
            MetricRow(epoch, "train", loss, _psnr_from_mse(loss, self.max_val), math.sqrt(loss), lr)
        )

    def eval_row(self, epoch, loss, psnr_db, rmse_val, lr):
        self.history.append(MetricRow(epoch, "eval", loss, psnr_db, rmse_val, lr))
        self.eval_losses.append(loss)
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best = _snapshot(self.params)
            self._save_best()

    def periodic_checkpoint(self, epoch):
        every = self.config.checkpoint_every
        if every and epoch % every == 0 and self.out_dir is not None:
            models.save_checkpoint(self._path(f"epoch{epoch}.atup"), self.params)

    def abort(self, epoch, why):
        # keep whatever was best so far on disk, then bail
        self.finish()
        raise DivergenceError(f"{why} at epoch {epoch} (best checkpoint retained)")

    def finish(self):
        if self.out_dir is not None:
            models.save_checkpoint(self._path("final.atup"), self.params)
            write_metric_csv(self._path("metrics.csv"), self.history)

    def result(self):
        return TrainResult(
            params=self.params,
            best_params=self.best,
            history=self.history,
            best_epoch=self.best_epoch,
            best_eval_loss=self.best_loss,
            steps=self.steps,
            metrics_path=self._path("metrics.csv"),
            best_checkpoint=self._path("best.atup"),
            final_checkpoint=self._path("final.atup"),
        )


def _run_batches(loop, pool, forward, epoch, lr, rng):
    """One epoch of batch-mean gradient steps; returns (mean loss, step cap hit)."""
    config = loop.config
    order = rng.permutation(len(pool))
    losses = []
    capped = False
    for b0 in range(0, len(order), config.batch_size):
        batch = order[b0:b0 + config.batch_size]
        autodiff.zero_grads(loop.params.values())
        for idx in batch:
            tape = autodiff.OpTape()
            loss = forward(pool[idx], tape)
            val = float(loss.value)
            if not math.isfinite(val):
                loop.abort(epoch, f"non-finite loss {val}")
            losses.append(val)
            autodiff.backward(tape, loss, seed=1.0 / len(batch))
        try:
            adam_step(loop.params, loop.state, lr)
        except DivergenceError as err:
            loop.abort(epoch, str(err))
        loop.steps += 1
        if config.max_steps and loop.steps >= config.max_steps:
            capped = True
            break
    return (float(np.mean(losses)) if losses else 0.0), capped


def _eval_sisr(spec, params, images):
    losses, psnrs, rmses = [], [], []
    for img in images:
        s = spec.upsample_factor
        c, h, w = img.y.shape
        hr = img.y[:, :(h // s) * s, :(w // s) * s]
        lr_img = dataio.bicubic_resize(hr, hr.shape[1] // s, hr.shape[2] // s).astype(np.float32)
        pred = models.sisr_forward(lr_img, spec, params).value
        losses.append(_mse(pred, hr))
        psnrs.append(psnr(pred, hr, 1.0))
        rmses.append(rmse(pred, hr))
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(rmses))


def train_sisr(spec, dataset, config, out_dir=None):
    """Fit the super-resolution network on a patch pool; see module docstring."""
    rng = core.make_rng(config.seed)
    params = models.build_sisr_params(spec, rng)
    pool = []
    for img in dataset.get("train", []):
        variants = augment(img.y, config.augment_compose) if config.augment else [img.y]
        for v in variants:
            pool.extend(extract_patches(v, spec.upsample_factor, config.patch_size, config.patch_stride))
    if not pool:
        raise ValueError(
            f"no training patches: patch size {config.patch_size} does not fit the "
            f"downscaled training images"
        )
    eval_images = dataset.get("eval", [])
    loop = _Loop(spec, params, config, out_dir, max_val=1.0)

    def forward(pair, tape):
        lr_p, hr_p = pair
        out = models.sisr_forward(lr_p, spec, params, tape)
        return autodiff.mse(out, hr_p, tape)

    for epoch in range(1, config.epochs + 1):
        lr = schedule_lr(config, epoch, loop.eval_losses)
        train_loss, capped = _run_batches(loop, pool, forward, epoch, lr, rng)
        loop.train_row(epoch, train_loss, lr)
        if eval_images and (epoch % config.eval_every == 0 or capped):
            loop.eval_row(epoch, *_eval_sisr(spec, params, eval_images), lr)
        elif not eval_images and train_loss < loop.best_loss:
            # nothing to evaluate on; fall back to train loss for "best"
            loop.best_loss = train_loss
            loop.best_epoch = epoch
            loop.best = _snapshot(params)
            loop._save_best()
        loop.periodic_checkpoint(epoch)
        if capped:
            break
    loop.finish()
    return loop.result()


def _eval_joint(spec, params, samples):
    losses, psnrs, rmses = [], [], []
    for smp in samples:
        norm = smp.depth / DEPTH_SCALE
        lr_d = depth_grid_sample(norm, spec.upsample_factor)
        pred = models.joint_forward(lr_d, smp.guide, spec, params).value
        losses.append(_mse(pred, norm))
        psnrs.append(psnr(pred, norm, 1.0))
        rmses.append(rmse(pred * DEPTH_SCALE, smp.depth))  # raw stored units
    return float(np.mean(losses)), float(np.mean(psnrs)), float(np.mean(rmses))


def train_joint(spec, dataset, config, out_dir=None):
    """Fit the guided upsampler on whole depth/guide pairs."""
    rng = core.make_rng(config.seed)
    params = models.build_joint_params(spec, rng)
    samples = list(dataset.get("train", []))
    if not samples:
        raise ValueError("empty train split")
    eval_samples = dataset.get("eval", [])
    loop = _Loop(spec, params, config, out_dir, max_val=1.0)

    def forward(smp, tape):
        norm = smp.depth / DEPTH_SCALE
        lr_d = depth_grid_sample(norm, spec.upsample_factor)
        out = models.joint_forward(lr_d, smp.guide, spec, params, tape)
        return autodiff.mse(out, norm, tape)

    for epoch in range(1, config.epochs + 1):
        lr = schedule_lr(config, epoch, loop.eval_losses)
        train_loss, capped = _run_batches(loop, samples, forward, epoch, lr, rng)
        loop.train_row(epoch, train_loss, lr)
        if eval_samples and (epoch % config.eval_every == 0 or capped):
            loop.eval_row(epoch, *_eval_joint(spec, params, eval_samples), lr)
        loop.periodic_checkpoint(epoch)
        if capped:
            break
    loop.finish()
    return loop.result()


def train(spec, dataset, config, out_dir=None):
    """Dispatch on the spec type."""
    if isinstance(spec, models.SisrSpec):
        return train_sisr(spec, dataset, config, out_dir)
    if isinstance(spec, models.JointSpec):
        return train_joint(spec, dataset, config, out_dir)
    raise TypeError(f"cannot train a {type(spec).__name__}")
