"""Synthetic clips, bicubic degradation, frame selection and PNG I/O.

On-disk layout under a dataset root::

    manifest.txt              clip ids, one per line
    clip/<id>/hr_1.png ... hr_7.png
    clip/<id>/lr_1.png ... lr_4.png
"""
from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import MeganError, ShapeError

HR_FRAMES = 7
LR_FRAMES = 4
SCALE = 4
KEYS_A = -0.5
MAX_SPEED = 2.0


class DataError(MeganError):
    pass


@dataclass
class VideoClip:
    hr_frames: np.ndarray  # 7 x 3 x H x W
    lr_frames: np.ndarray  # 4 x 3 x H/4 x W/4
    clip_id: str = ""


# -- resampling ---------------------------------------------------------------

def keys_kernel(x, a=KEYS_A):
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``n_out x n_in`` bicubic resampling matrix.

    Output sample ``o`` sits at source coordinate ``(o + 0.5) * n_in / n_out - 0.5``;
    out-of-range taps are clamped to the border. When shrinking with
    ``antialias`` the kernel is stretched by the scale factor.
    """
    scale = n_in / n_out
    stretch = scale if antialias and scale > 1.0 else 1.0
    support = 2.0 * stretch
    M = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi)
        w = keys_kernel((taps - center) / stretch)
        w = w / w.sum()
        np.add.at(M[o], np.clip(taps, 0, n_in - 1), w)
    return M


def resize(frame, out_h: int, out_w: int, antialias: bool = True, clamp: bool = True):
    """Separable bicubic resize of ``... x H x W``."""
    H, W = frame.shape[-2:]
    out = resize_matrix(H, out_h, antialias) @ frame @ resize_matrix(W, out_w, antialias).T
    return np.clip(out, 0.0, 1.0) if clamp else out


def bicubic_downsample(frame, factor: int = SCALE, clamp: bool = True):
    H, W = frame.shape[-2:]
    if H % factor or W % factor:
        raise ShapeError(f"frame {H}x{W} not divisible by {factor}")
    return resize(frame, H // factor, W // factor, antialias=True, clamp=clamp)


def bicubic_upsample(frame, factor: int = SCALE):
    H, W = frame.shape[-2:]
    return resize(frame, H * factor, W * factor)


def select_frames(hr_frames):
    """Odd-indexed (1-based 1, 3, 5, 7) frames downsampled as input, all 7 as ground truth."""
    hr_frames = np.asarray(hr_frames)
    if hr_frames.shape[0] != HR_FRAMES:
        raise ShapeError(f"expected {HR_FRAMES} HR frames, got {hr_frames.shape[0]}")
    lr = np.stack([bicubic_downsample(f) for f in hr_frames[0::2]])
    return lr, hr_frames


def baseline_upsample(lr_frames):
    """Bicubic x4 of each input frame; in-between frames repeat their predecessor."""
    up = [bicubic_upsample(f) for f in lr_frames]
    out = []
    for i, f in enumerate(up):
        out.append(f)
        if i + 1 < len(up):
            out.append(f)
    return np.stack(out)


# -- PNG ----------------------------------------------------------------------

def to_bytes(frame) -> np.ndarray:
    """``3 x H x W`` floats -> ``H x W x 3`` uint8, rounding half away from zero."""
    v = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def png_encode(frame, path) -> None:
    Image.fromarray(to_bytes(frame)).save(path, format="PNG")


def png_write(frame, path) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}.png"
    png_encode(frame, tmp)
    os.replace(tmp, path)


def png_read(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: unreadable PNG ({exc})") from exc
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class MovingObject:
    kind: str  # "rect" or "ellipse"
    cx: float
    cy: float
    half_w: float
    half_h: float
    vx: float
    vy: float
    color: np.ndarray
    drift: float = 0.0

    def center(self, t):
        return self.cx + self.vx * t, self.cy + self.vy * t


def _interval_overlap(lo, hi, n):
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, None)


def coverage(obj: MovingObject, t: float, H: int, W: int, supersample: int = 8) -> np.ndarray:
    """Fraction of each pixel ``[j, j+1) x [i, i+1)`` covered by the object at time ``t``."""
    cx, cy = obj.center(t)
    if obj.kind == "rect":
        ox = _interval_overlap(cx - obj.half_w, cx + obj.half_w, W)
        oy = _interval_overlap(cy - obj.half_h, cy + obj.half_h, H)
        return np.outer(oy, ox)
    s = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(H)[:, None] + s[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + s[None, :]).reshape(-1)
    inside = ((xs[None, :] - cx) / obj.half_w) ** 2 + ((ys[:, None] - cy) / obj.half_h) ** 2 <= 1.0
    return inside.reshape(H, supersample, W, supersample).mean(axis=(1, 3))


def random_objects(rng: np.random.Generator, size: int, n_objects: int) -> list[MovingObject]:
    objs = []
    for _ in range(n_objects):
        speed = rng.uniform(0.25, MAX_SPEED)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        objs.append(MovingObject(
            kind="rect" if rng.random() < 0.5 else "ellipse",
            cx=rng.uniform(0.3, 0.7) * size,
            cy=rng.uniform(0.3, 0.7) * size,
            half_w=rng.uniform(size / 12, size / 5),
            half_h=rng.uniform(size / 12, size / 5),
            vx=speed * np.cos(angle),
            vy=speed * np.sin(angle),
            color=rng.uniform(0.05, 0.95, 3),
            drift=rng.uniform(-0.02, 0.02) if rng.random() < 0.5 else 0.0,
        ))
    return objs


def render_frames(rng: np.random.Generator, size: int, n_objects: int, n_frames: int = HR_FRAMES):
    """Smooth gradient background plus anti-aliased moving shapes, values in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = rng.uniform(0.2, 0.8, 3)
    gx = rng.uniform(-0.2, 0.2, 3)
    gy = rng.uniform(-0.2, 0.2, 3)
    background = np.clip(base[:, None, None] + gx[:, None, None] * xx + gy[:, None, None] * yy, 0, 1)
    objs = random_objects(rng, size, n_objects)
    frames = np.empty((n_frames, 3, size, size))
    for t in range(n_frames):
        img = background.copy()
        for obj in objs:
            alpha = coverage(obj, t, size, size)[None]
            color = np.clip(obj.color + obj.drift * t, 0.0, 1.0)[:, None, None]
            img = img * (1.0 - alpha) + color * alpha
        frames[t] = img
    return frames, objs


def quantize(frames):
    """Round-trip through 8-bit bytes, as stored on disk."""
    return np.floor(np.clip(frames, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def synth_clip(seed: int, index: int, size: int, n_objects: int) -> VideoClip:
    if size % SCALE:
        raise ShapeError(f"size {size} must be divisible by {SCALE}")
    if n_objects < 1:
        raise DataError("need at least one object")
    rng = np.random.default_rng([seed, index])
    hr, _ = render_frames(rng, size, n_objects)
    hr = quantize(hr)
    lr, _ = select_frames(hr)
    return VideoClip(hr, quantize(lr), f"{index:04d}")


def _write_clip(clip: VideoClip, clip_dir: Path) -> None:
    clip_dir.mkdir(parents=True)
    for t, f in enumerate(clip.hr_frames, 1):
        png_encode(f, clip_dir / f"hr_{t}.png")
    for t, f in enumerate(clip.lr_frames, 1):
        png_encode(f, clip_dir / f"lr_{t}.png")


def prepare_output_dir(out_dir: Path) -> None:
    """Refuse to overwrite: the target may be absent or an empty directory."""
    if out_dir.exists() and (not out_dir.is_dir() or any(out_dir.iterdir())):
        raise DataError(f"output directory {out_dir} exists and is not empty")


def publish_dir(tmp: Path, out_dir: Path) -> None:
    """Move a fully written temp directory into place."""
    if out_dir.exists():
        out_dir.rmdir()
    os.replace(tmp, out_dir)


def synth_generate(out_dir, seed: int, n_clips: int, size: int, n_objects: int = 2) -> list[str]:
    """Render ``n_clips`` clips into ``out_dir`` (built in a temp dir, then renamed)."""
    if size % SCALE:
        raise ShapeError(f"size {size} must be divisible by {SCALE}")
    if n_clips < 1:
        raise DataError("need at least one clip")
    out_dir = Path(out_dir)
    prepare_output_dir(out_dir)
    parent = out_dir.parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=parent))
    try:
        ids = []
        for i in range(n_clips):
            clip = synth_clip(seed, i, size, n_objects)
            _write_clip(clip, tmp / "clip" / clip.clip_id)
            ids.append(clip.clip_id)
        (tmp / "manifest.txt").write_text("".join(f"{c}\n" for c in ids))
        publish_dir(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return ids


def read_manifest(root) -> list[str]:
    path = Path(root) / "manifest.txt"
    if not path.is_file():
        raise DataError(f"{path} not found")
    ids = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"{path} lists no clips")
    return ids


def load_clip(root, clip_id: str, verify: bool = True) -> VideoClip:
    d = Path(root) / "clip" / clip_id
    hr = np.stack([png_read(d / f"hr_{t}.png") for t in range(1, HR_FRAMES + 1)])
    lr = np.stack([png_read(d / f"lr_{t}.png") for t in range(1, LR_FRAMES + 1)])
    if hr.shape[-1] % SCALE or hr.shape[-2] % SCALE:
        raise DataError(f"clip {clip_id}: HR size {hr.shape[-2:]} not divisible by {SCALE}")
    if lr.shape[-2:] != (hr.shape[-2] // SCALE, hr.shape[-1] // SCALE):
        raise DataError(f"clip {clip_id}: LR size {lr.shape[-2:]} inconsistent with HR {hr.shape[-2:]}")
    if verify:
        expected = quantize(select_frames(hr)[0])
        if not np.array_equal(expected, lr):
            raise DataError(f"clip {clip_id}: LR frames are not the bicubic degradation of HR")
    return VideoClip(hr, lr, clip_id)


def load_dataset(root, verify: bool = True) -> list[VideoClip]:
    return [load_clip(root, cid, verify) for cid in read_manifest(root)]


def read_lr_dir(path) -> np.ndarray:
    """``lr_1.png ... lr_k.png`` from a directory, stacked."""
    path = Path(path)
    frames = []
    t = 1
    while (path / f"lr_{t}.png").exists():
        frames.append(png_read(path / f"lr_{t}.png"))
        t += 1
    if not frames:
        raise DataError(f"no lr_1.png in {path}")
    return np.stack(frames)
