"""PSNR and SSIM on RGB frames in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    k = g.shape[0]
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, data_range=1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window, valid region, channel mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    if smap.ndim == 2:
        return float(smap.mean())
    return float(smap.reshape(-1, *smap.shape[-2:]).mean(axis=(1, 2)).mean())


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def format(self) -> str:
        lines = ["frame_idx  psnr_db  ssim"]
        for i, (p, s) in enumerate(zip(self.psnr, self.ssim), 1):
            lines.append(f"{i}  {_fmt(p)}  {s:.4f}")
        lines.append(f"mean  {_fmt(self.mean_psnr)}  {self.mean_ssim:.4f}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def evaluate(pred_frames, gt_frames) -> MetricReport:
    if len(pred_frames) != len(gt_frames):
        raise ShapeError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground truth")
    rep = MetricReport()
    for p, g in zip(pred_frames, gt_frames):
        rep.psnr.append(psnr(p, g))
        rep.ssim.append(ssim(p, g))
    return rep


def _frame_key(path: Path):
    stem = path.stem
    tail = stem.rsplit("_", 1)[-1]
    return (stem.rsplit("_", 1)[0], int(tail)) if tail.isdigit() else (stem, 0)


def evaluate_dirs(pred_dir, gt_dir) -> MetricReport:
    """Compare every ``hr_*.png`` in ``pred_dir`` with the same name in ``gt_dir``."""
    from .data import DataError, png_read

    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    files = sorted(pred_dir.glob("hr_*.png"), key=_frame_key)
    if not files:
        raise DataError(f"no hr_*.png frames in {pred_dir}")
    rep = MetricReport()
    for f in files:
        g = gt_dir / f.name
        if not g.exists():
            raise DataError(f"{g} missing from ground truth")
        p, t = png_read(f), png_read(g)
        rep.psnr.append(psnr(p, t))
        rep.ssim.append(ssim(p, t))
        rep.names.append(f.name)
    return rep
