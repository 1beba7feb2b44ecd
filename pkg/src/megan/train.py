"""Loss, optimiser, learning-rate schedule, augmentation and the training loop."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import model
from .data import SCALE, VideoClip
from .model import MeganConfig
from .tensor import MeganError, ShapeError

log = logging.getLogger(__name__)

# stream-splitting slots for the per-iteration generator
_STREAM_SAMPLE, _STREAM_AUGMENT, _STREAM_CROP, _STREAM_POOL = range(4)


class ConfigError(MeganError):
    pass


class TrainingDiverged(MeganError):
    pass


# -- loss ---------------------------------------------------------------------

def charbonnier_forward(pred, gt, eps=1e-3, reduction="global"):
    """``sqrt(sum((gt - pred)^2) + eps^2)`` or, for ``"elementwise"``,
    ``mean(sqrt((gt - pred)^2 + eps^2))``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {gt.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = pred - gt
    if reduction == "global":
        loss = math.sqrt(float(np.sum(d * d)) + eps * eps)
        return loss, (d, loss, reduction)
    if reduction == "elementwise":
        r = np.sqrt(d * d + eps * eps)
        return float(r.mean()), (d, r, reduction)
    raise ValueError(f"unknown reduction {reduction!r}")


def charbonnier_backward(dloss, cache):
    d, r, reduction = cache
    if reduction == "global":
        return dloss * d / r
    return dloss * d / (r * d.size)


def charbonnier_loss(pred, gt, eps=1e-3, reduction="global") -> float:
    return charbonnier_forward(pred, gt, eps, reduction)[0]


# -- schedule and optimiser ---------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    period: int = 20000


def cosine_lr(t: int, s: LrSchedule = LrSchedule()) -> float:
    if t < 0:
        raise ValueError("iteration must be non-negative")
    if t >= s.period:
        return s.lr_min
    return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * t / s.period))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- augmentation -------------------------------------------------------------

def hflip(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.hr_frames[..., ::-1].copy(), clip.lr_frames[..., ::-1].copy(), clip.clip_id)


def vflip(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.hr_frames[..., ::-1, :].copy(), clip.lr_frames[..., ::-1, :].copy(), clip.clip_id)


def rot90(clip: VideoClip, k: int = 1) -> VideoClip:
    if k % 2 and clip.hr_frames.shape[-1] != clip.hr_frames.shape[-2]:
        raise ShapeError("90 degree rotation needs square frames")
    return VideoClip(np.rot90(clip.hr_frames, k, axes=(-2, -1)).copy(),
                     np.rot90(clip.lr_frames, k, axes=(-2, -1)).copy(), clip.clip_id)


def reverse_time(clip: VideoClip) -> VideoClip:
    return VideoClip(clip.hr_frames[::-1].copy(), clip.lr_frames[::-1].copy(), clip.clip_id)


def augment(clip: VideoClip, seed, rotate: bool = True) -> VideoClip:
    """Seeded horizontal/vertical flips, quarter turns and temporal reversal."""
    rng = np.random.default_rng(seed)
    do_h, do_v, do_rev = rng.random(3) < 0.5
    k = int(rng.integers(4)) if rotate else 0
    if do_h:
        clip = hflip(clip)
    if do_v:
        clip = vflip(clip)
    if k:
        clip = rot90(clip, k)
    if do_rev:
        clip = reverse_time(clip)
    return clip


def random_crop(clip: VideoClip, crop: int, rng: np.random.Generator) -> VideoClip:
    """Aligned crop: ``crop`` on LR, ``SCALE * crop`` on HR at the scaled origin."""
    h, w = clip.lr_frames.shape[-2:]
    if crop > h or crop > w:
        raise ShapeError(f"crop {crop} larger than LR frame {h}x{w}")
    oy = int(rng.integers(h - crop + 1))
    ox = int(rng.integers(w - crop + 1))
    lr = clip.lr_frames[..., oy:oy + crop, ox:ox + crop]
    hr = clip.hr_frames[..., SCALE * oy:SCALE * (oy + crop), SCALE * ox:SCALE * (ox + crop)]
    return VideoClip(hr.copy(), lr.copy(), clip.clip_id)


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 2
    crop: int = 32
    seed: int = 0
    epsilon: float = 1e-3
    lr_max: float = 1e-4
    lr_min: float = 1e-7
    lr_period: int = 20000
    checkpoint_every: int = 0
    reduction: str = "global"
    augment: bool = True

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_max, self.lr_min, self.lr_period)


REQUIRED_KEYS = ("iterations", "batch_size", "crop", "seed")
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
_MODEL_KEYS = {f.name: f for f in fields(MeganConfig)}


def _convert(key, raw, ftype):
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {ftype}") from None


def parse_config(text: str) -> tuple[TrainConfig, MeganConfig]:
    """Flat ``key = value`` lines with ``#`` comments; unknown keys are rejected.

    Training keys and model keys (``channels``, ``m1``, ``tau``, ...) share
    the file. ``iterations``, ``batch_size``, ``crop`` and ``seed`` are required.
    """
    train_kw, model_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, _TRAIN_KEYS[key].type)
        elif key in _MODEL_KEYS:
            model_kw[key] = _convert(key, raw, _MODEL_KEYS[key].type)
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    for key in REQUIRED_KEYS:
        if key not in train_kw:
            raise ConfigError(f"missing required config key {key!r}")
    tcfg = TrainConfig(**train_kw)
    if tcfg.iterations < 0 or tcfg.batch_size < 1 or tcfg.crop < 1:
        raise ConfigError("iterations must be >= 0, batch_size and crop >= 1")
    if tcfg.reduction not in ("global", "elementwise"):
        raise ConfigError(f"reduction must be 'global' or 'elementwise', got {tcfg.reduction!r}")
    try:
        cfg = MeganConfig(**model_kw)
    except MeganError as exc:
        raise ConfigError(str(exc)) from None
    return tcfg, cfg


def load_config(path) -> tuple[TrainConfig, MeganConfig]:
    return parse_config(Path(path).read_text())


# -- training loop ------------------------------------------------------------

def iteration_rngs(seed: int, it: int) -> list[np.random.Generator]:
    """Independent generators for sampling, augmentation, cropping and pool draws."""
    children = np.random.SeedSequence([seed, it]).spawn(4)
    return [np.random.default_rng(c) for c in children]


def make_batch(clips: list[VideoClip], tcfg: TrainConfig, it: int):
    """Returns ``(lr, hr, pool_seed)`` with ``lr`` of shape ``4 x B x 3 x c x c``."""
    rngs = iteration_rngs(tcfg.seed, it)
    lrs, hrs = [], []
    for _ in range(tcfg.batch_size):
        clip = clips[int(rngs[_STREAM_SAMPLE].integers(len(clips)))]
        clip = random_crop(clip, tcfg.crop, rngs[_STREAM_CROP])
        if tcfg.augment:
            clip = augment(clip, rngs[_STREAM_AUGMENT].integers(2 ** 63), rotate=True)
        lrs.append(clip.lr_frames)
        hrs.append(clip.hr_frames)
    pool_seed = int(rngs[_STREAM_POOL].integers(2 ** 31))
    return np.stack(lrs, axis=1), np.stack(hrs, axis=1), pool_seed


def trace_path(ckpt_path) -> Path:
    return Path(f"{os.fspath(ckpt_path)}.trace.csv")


def format_trace_row(it: int, loss: float, lr: float) -> str:
    return f"{it},{loss:.17g},{lr:.17g}\n"


def training_entries(P, cfg, state: AdamState, iteration: int, tcfg: TrainConfig) -> dict:
    entries = model.model_entries(P, cfg)
    for k in P:
        if k in state.m:
            entries[f"adam.m.{k}"] = state.m[k]
            entries[f"adam.v.{k}"] = state.v[k]
    entries["adam.t"] = np.array(float(state.t))
    entries["train.iteration"] = np.array(float(iteration))
    entries["train.seed"] = np.array(float(tcfg.seed))
    return entries


def restore_training(entries: dict):
    P, cfg = model.split_model_entries(entries)
    state = AdamState(t=int(entries.get("adam.t", 0)))
    for k in P:
        if f"adam.m.{k}" in entries:
            state.m[k] = entries[f"adam.m.{k}"]
            state.v[k] = entries[f"adam.v.{k}"]
    return P, cfg, state, int(entries.get("train.iteration", 0))


@dataclass
class TrainResult:
    params: dict
    config: MeganConfig
    losses: list[float]
    lrs: list[float]
    iteration: int


def train_loop(tcfg: TrainConfig, cfg: MeganConfig, clips: list[VideoClip], out_path=None,
               resume=None, init_seed: int | None = None) -> TrainResult:
    """Run ``tcfg.iterations`` total iterations (a resumed run continues its counter).

    When ``out_path`` is given, the final checkpoint and the
    ``iteration,loss,lr`` trace are written there; a non-finite loss raises
    :class:`TrainingDiverged` after saving the last good state.
    """
    if not clips:
        raise MeganError("dataset is empty")
    if resume is not None:
        P, cfg, state, start = restore_training(model.load_checkpoint(resume))
        prior = trace_path(resume)
        rows = prior.read_text().splitlines(keepends=True)[1:] if prior.exists() else []
        rows = rows[:start]
    else:
        P = model.init_params(cfg, tcfg.seed if init_seed is None else init_seed)
        state = AdamState()
        start = 0
        rows = []
    if cfg.n != 3:
        raise MeganError("training data provides 4 input frames, so n must be 3")
    losses, lrs = [], []
    it = start

    def save():
        if out_path is None:
            return
        model.save_checkpoint(training_entries(P, cfg, state, it, tcfg), out_path)
        tp = trace_path(out_path)
        tmp = tp.with_name(tp.name + f".tmp{os.getpid()}")
        tmp.write_text("iteration,loss,lr\n" + "".join(rows))
        os.replace(tmp, tp)

    while it < tcfg.iterations:
        lr_in, hr, pool_seed = make_batch(clips, tcfg, it)
        out, cache = model.megan_forward(lr_in, P, cfg, pool_seed)
        loss, lc = charbonnier_forward(out, hr, tcfg.epsilon, tcfg.reduction)
        if not math.isfinite(loss):
            save()
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        G, _ = model.megan_backward(charbonnier_backward(1.0, lc), cache)
        lr = cosine_lr(it, tcfg.schedule)
        adam_step(P, G, state, lr)
        rows.append(format_trace_row(it, loss, lr))
        losses.append(loss)
        lrs.append(lr)
        it += 1
        if tcfg.checkpoint_every and it % tcfg.checkpoint_every == 0:
            save()
        if it % 50 == 0:
            log.info("iteration %d loss %.6f lr %.3e", it, loss, lr)
    save()
    return TrainResult(P, cfg, losses, lrs, it)


def with_overrides(tcfg: TrainConfig, **kw) -> TrainConfig:
    return replace(tcfg, **kw)
