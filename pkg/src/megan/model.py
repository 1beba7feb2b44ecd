"""The four-stage network: feature extraction, temporal interpolation,
memory-enhanced aggregation and progressive fusion reconstruction.
"""
from __future__ import annotations

import io
import re
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import blocks, lmga, ops
from .blocks import (conv_backward, conv_forward, conv_lrelu_backward, conv_lrelu_forward,
                     init_conv)
from .tensor import (FormatError, MeganError, ShapeError, TruncatedFileError, atomic_write_bytes,
                     read_tensor, reference_dtype, write_tensor)

_ATTENTION = ("softmax", "sum")
_OFFSET_HEAD = re.compile(r"^(interp\.g[13]|bi\.(fwd|bwd)\.g[hc])\.c1\.[wb]$")
_MESSAGE = ("neighbor", "self")


@dataclass(frozen=True)
class MeganConfig:
    channels: int = 16
    m1: int = 3
    m2: int = 1
    m3: int = 2
    tau: int = 2
    K: int = 2
    scale: int = 4
    n: int = 3
    nonlocal_enabled: bool = True
    lmga_enabled: bool = True
    modulated: bool = False
    attention: str = "softmax"
    message_source: str = "neighbor"

    def __post_init__(self):
        if self.scale != 4:
            raise MeganError(f"scale must be 4 (two x2 pixel-shuffle stages), got {self.scale}")
        if self.channels < 2 or self.channels % 2:
            raise MeganError(f"channels must be even and >= 2, got {self.channels}")
        for name in ("m1", "m2", "m3", "K", "tau"):
            if getattr(self, name) < 0:
                raise MeganError(f"{name} must be non-negative")
        if self.n < 1:
            raise MeganError(f"n must be >= 1, got {self.n}")
        if self.tau > 2 * self.n + 1:
            raise MeganError(f"tau={self.tau} exceeds the 2n+1={2 * self.n + 1} frames")
        if self.lmga_enabled and self.K < 1:
            raise MeganError("LMGA needs K >= 1")
        if self.attention not in _ATTENTION:
            raise MeganError(f"attention must be one of {_ATTENTION}")
        if self.message_source not in _MESSAGE:
            raise MeganError(f"message_source must be one of {_MESSAGE}")

    @property
    def out_frames(self) -> int:
        return 2 * self.n + 1

    @classmethod
    def published(cls, channels=64) -> "MeganConfig":
        """Published block counts; the feature width is not given, 64 is a guess."""
        return cls(channels=channels, m1=3, m2=5, m3=20, tau=4, K=2)


# the output conv starts small so the initial prediction sits near zero
OUT_GAIN = 0.1


def init_params(cfg: MeganConfig, seed: int = 0) -> dict:
    """Fresh parameter dict for ``cfg``.

    Each tensor is drawn from its own generator keyed on ``(seed, name)``, so
    toggling a block leaves the initial values of every other tensor intact.
    """
    C = cfg.channels
    P: dict = {}
    init_conv(P, "ext.head", 3, C, seed=seed)
    if cfg.nonlocal_enabled:
        blocks.init_nonlocal(P, "ext.nl", C, seed)
    for i in range(cfg.m1):
        init_conv(P, f"ext.body{i}", C, C, seed=seed)
    blocks.init_interpolation(P, "interp", C, seed, cfg.modulated)
    blocks.init_bidirectional(P, "bi", C, seed, cfg.modulated)
    if cfg.lmga_enabled:
        lmga.init_lmga(P, "lmga", C, cfg.K, seed)
    for i in range(cfg.m2):
        blocks.init_pfrdb(P, f"rec.pfrdb{i}", C, cfg.out_frames, seed)
    for i in range(cfg.m3):
        blocks.init_resblock(P, f"rec.res{i}", C, seed)
    init_conv(P, "rec.up1", C, 4 * C, seed=seed)
    init_conv(P, "rec.up2", C, 4 * C, seed=seed)
    init_conv(P, "rec.out", C, 3, seed=seed, gain=OUT_GAIN)
    return P


def param_count(cfg: MeganConfig) -> int:
    return int(sum(v.size for v in init_params(cfg).values()))


def offset_head_names(P) -> list[str]:
    """Layers whose cotangent is zero while the final offset conv is still zero."""
    return [k for k in P if _OFFSET_HEAD.match(k)]


# -- stages -------------------------------------------------------------------

def feature_extract_forward(frames, P, cfg: MeganConfig):
    """``T x N x 3 x H x W`` LR frames -> ``T x N x C x H x W`` features."""
    if frames.ndim != 5 or frames.shape[2] != 3:
        raise ShapeError(f"expected T x N x 3 x H x W frames, got {frames.shape}")
    T, N, _, H, W = frames.shape
    x, ch = conv_forward(frames.reshape(T * N, 3, H, W), P, "ext.head")
    cnl = None
    if cfg.nonlocal_enabled:
        x, cnl = blocks.nonlocal_forward(x, P, "ext.nl", cfg.attention)
    body = []
    for i in range(cfg.m1):
        x, c = conv_lrelu_forward(x, P, f"ext.body{i}")
        body.append(c)
    return x.reshape(T, N, -1, H, W), (ch, cnl, body)


def feature_extract_backward(dout, cache, G):
    ch, cnl, body = cache
    T, N = dout.shape[:2]
    d = dout.reshape((T * N,) + dout.shape[2:])
    for c in reversed(body):
        d = conv_lrelu_backward(d, c, G)
    if cnl is not None:
        d = blocks.nonlocal_backward(d, cnl, G)
    return conv_backward(d, ch, G).reshape(T, N, 3, *dout.shape[3:])


def interpolate_sequence_forward(F, P):
    """Interleave ``n+1`` key features with the ``n`` synthesised in-betweens."""
    T1, N = F.shape[:2]
    inner = F.shape[2:]
    A = F[:-1].reshape((-1,) + inner)
    B = F[1:].reshape((-1,) + inner)
    I, ci = blocks.feature_interpolate_forward(A, B, P, "interp")
    S = np.empty((2 * T1 - 1, N) + inner)
    S[0::2] = F
    S[1::2] = I.reshape((T1 - 1, N) + inner)
    return S, ci


def interpolate_sequence_backward(dS, cache, G):
    T1 = (dS.shape[0] + 1) // 2
    N = dS.shape[1]
    inner = dS.shape[2:]
    dI = dS[1::2].reshape((-1,) + inner)
    dA, dB = blocks.feature_interpolate_backward(dI, cache, G)
    dF = dS[0::2].copy()
    dF[:-1] += dA.reshape((T1 - 1, N) + inner)
    dF[1:] += dB.reshape((T1 - 1, N) + inner)
    return dF


def reconstruct_forward(FM, P, cfg: MeganConfig):
    """``T x N x C x h x w`` features -> ``T x N x 3 x 4h x 4w`` frames (unclamped)."""
    T, N, C, H, W = FM.shape
    caches = []
    x = FM
    for i in range(cfg.m2):
        x, c = blocks.pfrdb_forward(x, P, f"rec.pfrdb{i}")
        caches.append(c)
    x = x.reshape(T * N, C, H, W)
    res = []
    for i in range(cfg.m3):
        x, c = blocks.resblock_forward(x, P, f"rec.res{i}")
        res.append(c)
    ups = []
    for name in ("rec.up1", "rec.up2"):
        y, cc = conv_forward(x, P, name)
        y = ops.pixel_shuffle(y, 2)
        x, cl = ops.leaky_relu_forward(y)
        ups.append((cc, cl))
    out, co = conv_forward(x, P, "rec.out")
    return out.reshape(T, N, 3, 4 * H, 4 * W), (caches, res, ups, co, FM.shape)


def reconstruct_backward(dout, cache, G):
    caches, res, ups, co, shape = cache
    T, N, C, H, W = shape
    d = conv_backward(dout.reshape((T * N,) + dout.shape[2:]), co, G)
    for cc, cl in reversed(ups):
        d = ops.leaky_relu_backward(d, cl)
        d = conv_backward(ops.pixel_unshuffle(d, 2), cc, G)
    for c in reversed(res):
        d = blocks.resblock_backward(d, c, G)
    d = d.reshape(shape)
    for c in reversed(caches):
        d = blocks.pfrdb_backward(d, c, G)
    return d


def megan_forward(frames, P, cfg: MeganConfig, seed: int = 0):
    """``(n+1) x N x 3 x H x W`` LR frames -> raw ``(2n+1) x N x 3 x 4H x 4W`` output.

    A 4-D ``(n+1) x 3 x H x W`` input is treated as batch size one and the
    batch axis is dropped from the result.
    """
    frames = np.asarray(frames, dtype=np.float64)
    squeeze = frames.ndim == 4
    if squeeze:
        frames = frames[:, None]
    if frames.shape[0] != cfg.n + 1:
        raise ShapeError(f"expected {cfg.n + 1} input frames, got {frames.shape[0]}")
    F, c_ext = feature_extract_forward(frames, P, cfg)
    S, c_int = interpolate_sequence_forward(F, P)
    E, c_bi = blocks.bidirectional_forward(S, P, "bi")
    c_lm = None
    if cfg.lmga_enabled:
        E, c_lm = lmga.lmga_forward(E, P, cfg.tau, cfg.K, seed, "lmga", cfg.message_source)
    out, c_rec = reconstruct_forward(E, P, cfg)
    cache = (c_ext, c_int, c_bi, c_lm, c_rec, squeeze)
    return (out[:, 0] if squeeze else out), cache


def megan_backward(dout, cache):
    """Full reverse sweep; returns ``(grads, dframes)``."""
    c_ext, c_int, c_bi, c_lm, c_rec, squeeze = cache
    if squeeze:
        dout = dout[:, None]
    G: dict = {}
    d = reconstruct_backward(dout, c_rec, G)
    if c_lm is not None:
        d = lmga.lmga_backward(d, c_lm, G)
    d = blocks.bidirectional_backward(d, c_bi, G)
    d = interpolate_sequence_backward(d, c_int, G)
    dframes = feature_extract_backward(d, c_ext, G)
    return G, (dframes[:, 0] if squeeze else dframes)


def megan_infer(frames, P, cfg: MeganConfig, seed: int = 0):
    """Forward pass clamped to ``[0, 1]`` for image emission."""
    return np.clip(megan_forward(frames, P, cfg, seed)[0], 0.0, 1.0)


# -- checkpoints --------------------------------------------------------------

_NAME_LEN = struct.Struct("<H")
_COUNT = struct.Struct("<I")


def config_entries(cfg: MeganConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "attention":
            v = _ATTENTION.index(v)
        elif f.name == "message_source":
            v = _MESSAGE.index(v)
        out[f"config.{f.name}"] = np.array(float(v))
    return out


def config_from_entries(entries: dict) -> MeganConfig:
    kw = {}
    for f in fields(MeganConfig):
        key = f"config.{f.name}"
        if key not in entries:
            continue
        v = float(entries[key])
        if f.name == "attention":
            kw[f.name] = _ATTENTION[int(v)]
        elif f.name == "message_source":
            kw[f.name] = _MESSAGE[int(v)]
        elif f.type in (bool, "bool"):
            kw[f.name] = bool(v)
        else:
            kw[f.name] = int(v)
    return MeganConfig(**kw)


def checkpoint_bytes(entries: dict, dtype=None) -> bytes:
    buf = io.BytesIO()
    buf.write(_COUNT.pack(len(entries)))
    for name, value in entries.items():
        raw = name.encode("utf-8")
        buf.write(_NAME_LEN.pack(len(raw)))
        buf.write(raw)
        write_tensor(buf, np.asarray(value), dtype)
    return buf.getvalue()


def save_checkpoint(entries: dict, path, dtype=None) -> None:
    """Write named tensors; storage precision defaults to ``MEGAN_REFERENCE_PRECISION``."""
    if dtype is None:
        dtype = reference_dtype()
    atomic_write_bytes(path, checkpoint_bytes(entries, dtype))


def parse_checkpoint(data: bytes) -> dict:
    buf = io.BytesIO(data)
    head = buf.read(4)
    if len(head) < 4:
        raise TruncatedFileError("checkpoint shorter than its header")
    (count,) = _COUNT.unpack(head)
    entries = {}
    for _ in range(count):
        raw = buf.read(2)
        if len(raw) < 2:
            raise TruncatedFileError("checkpoint truncated in entry header")
        (length,) = _NAME_LEN.unpack(raw)
        name = buf.read(length)
        if len(name) < length:
            raise TruncatedFileError("checkpoint truncated in entry name")
        try:
            key = name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry name is not UTF-8: {exc}") from exc
        if key in entries:
            raise FormatError(f"duplicate entry {key!r}")
        entries[key] = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after last checkpoint entry")
    return entries


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def model_entries(P: dict, cfg: MeganConfig) -> dict:
    return {**config_entries(cfg), **{f"param.{k}": v for k, v in P.items()}}


def split_model_entries(entries: dict) -> tuple[dict, MeganConfig]:
    cfg = config_from_entries(entries)
    P = {k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")}
    expected = init_params(cfg)
    missing = sorted(set(expected) - set(P))
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for k, v in expected.items():
        if P[k].shape != v.shape:
            raise FormatError(f"parameter {k} has shape {P[k].shape}, expected {v.shape}")
    return P, cfg


def describe(cfg: MeganConfig) -> str:
    return ", ".join(f"{k}={v}" for k, v in asdict(cfg).items())
