"""Synthetic sequences with exact ground truth, cropping, and file I/O.

Scenes are textured rectangles translating at constant integer velocities
over a textured background that may itself translate.  All randomness comes
from numpy's PCG64 generator seeded with the scene seed, so samples are
identical across platforms.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, FormatError, UsageError
from .flowops import FlowField, occlusion_gt_oracle

FLO_TAG = 202021.25


@dataclass
class SceneConfig:
    height: int = 48
    width: int = 48
    n_objects: int = 2
    object_size: tuple = (10, 22)
    max_object_speed: int = 6
    max_background_speed: int = 2
    noise_scale: float = 8.0
    length: int = 5
    channels: int = 3
    seed: int = 0
    speed_limit: int = 64

    def validate(self):
        if self.length < 2:
            raise ConfigurationError("a sequence needs at least two frames")
        lo, hi = self.object_size
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"bad object size range {self.object_size}")
        if hi > min(self.height, self.width):
            raise ConfigurationError("objects must fit inside the canvas")
        if max(self.max_object_speed, self.max_background_speed) > self.speed_limit:
            raise ConfigurationError("velocities exceed what the pyramid can match")
        if min(self.max_object_speed, self.max_background_speed) < 0:
            raise ConfigurationError("speeds must be non-negative")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")


@dataclass
class SequenceSample:
    """Frames plus per-pair ground truth; pair k maps frame k to frame k+1.

    ``flow_bwd[k]`` maps frame k+1 back to frame k in frame k+1 coordinates.
    ``occ[k]`` is 1 on pixels of frame k without a correspondence in k+1.
    """

    frames: np.ndarray  # (N, C, H, W) in [0, 1]
    flow_fwd: np.ndarray  # (N-1, 2, H, W)
    flow_bwd: np.ndarray  # (N-1, 2, H, W)
    labels: np.ndarray  # (N, H, W)
    occ: np.ndarray  # (N-1, H, W)
    gamma: np.ndarray = field(default=None)  # (N-1, H, W)
    rho: np.ndarray = field(default=None)  # (N-1, H, W)

    def __post_init__(self):
        n, _, h, w = self.frames.shape
        if n < 2:
            raise UsageError("a sequence needs at least two frames")
        if self.gamma is None:
            self.gamma = np.ones((n - 1, h, w), np.float32)
        if self.rho is None:
            self.rho = np.ones((n - 1, h, w), np.float32)
        for name, arr, lead in (
            ("flow_fwd", self.flow_fwd, n - 1),
            ("flow_bwd", self.flow_bwd, n - 1),
            ("labels", self.labels, n),
            ("occ", self.occ, n - 1),
            ("gamma", self.gamma, n - 1),
            ("rho", self.rho, n - 1),
        ):
            if arr.shape[0] != lead or arr.shape[-2:] != (h, w):
                raise UsageError(f"{name} has shape {arr.shape}, inconsistent with frames {self.frames.shape}")

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[2:]

    def head(self, n):
        """The first ``n`` frames with their pair ground truth."""
        if not 2 <= n <= self.length:
            raise UsageError(f"cannot take {n} frames from a {self.length}-frame sequence")
        return SequenceSample(
            self.frames[:n], self.flow_fwd[: n - 1], self.flow_bwd[: n - 1], self.labels[:n],
            self.occ[: n - 1], self.gamma[: n - 1], self.rho[: n - 1],
        )


def value_noise(rng, height, width, channels, scale, octaves=3):
    """Smooth random texture in [0, 1] built from bilinearly interpolated lattices."""
    out = np.zeros((channels, height, width))
    amp_total = 0.0
    for o in range(octaves):
        cell = max(scale / 2**o, 1.0)
        gh = int(np.ceil(height / cell)) + 2
        gw = int(np.ceil(width / cell)) + 2
        lattice = rng.random((channels, gh, gw))
        ys = np.arange(height) / cell
        xs = np.arange(width) / cell
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        a = lattice[:, y0][:, :, x0]
        b = lattice[:, y0][:, :, x0 + 1]
        c = lattice[:, y0 + 1][:, :, x0]
        d = lattice[:, y0 + 1][:, :, x0 + 1]
        amp = 0.5**o
        out += amp * ((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d))
        amp_total += amp
    out /= amp_total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-12)


def _quantize(img):
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


@dataclass(frozen=True)
class MovingRect:
    """A rectangle of size (height, width) at (top, left) in the first frame, moving by ``velocity`` (u, v) per frame."""

    height: int
    width: int
    top: int
    left: int
    velocity: tuple


def gen_sequence(config: SceneConfig) -> SequenceSample:
    """Render one synthetic sequence with analytic flows and oracle occlusions."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    h, w = config.height, config.width
    vb = rng.integers(-config.max_background_speed, config.max_background_speed + 1, size=2)
    objects = []
    lo, hi = config.object_size
    for _ in range(config.n_objects):
        oh, ow = rng.integers(lo, hi + 1, size=2)
        y0 = rng.integers(0, h - oh + 1)
        x0 = rng.integers(0, w - ow + 1)
        vel = rng.integers(-config.max_object_speed, config.max_object_speed + 1, size=2)
        objects.append(MovingRect(int(oh), int(ow), int(y0), int(x0), (int(vel[0]), int(vel[1]))))
    return render_scene(config, tuple(int(v) for v in vb), objects, rng)


def render_scene(config: SceneConfig, background_velocity, objects, rng=None) -> SequenceSample:
    """Render explicit moving rectangles (first object at the back) over a translating background.

    Textures are drawn from ``rng``, or from the config seed when omitted.
    """
    config.validate()
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    h, w, n, ch = config.height, config.width, config.length, config.channels
    vb = np.asarray(background_velocity, dtype=int).reshape(2)
    for ob in objects:
        if ob.height < 1 or ob.width < 1 or ob.height > h or ob.width > w:
            raise ConfigurationError(f"object {ob} does not fit a {h}x{w} canvas")

    span = (n - 1) * np.abs(vb)
    bg = value_noise(rng, h + span[1], w + span[0], ch, config.noise_scale)
    off = (n - 1) * np.maximum(vb, 0)
    textures = [value_noise(rng, ob.height, ob.width, ch, max(config.noise_scale / 2, 1.0)) for ob in objects]

    frames = np.zeros((n, ch, h, w), np.float32)
    labels = np.zeros((n, h, w), np.int32)
    velocity = np.zeros((n, 2, h, w), np.float32)
    for t in range(n):
        oy, ox = off[1] - vb[1] * t, off[0] - vb[0] * t
        img = bg[:, oy : oy + h, ox : ox + w].copy()
        lab = np.zeros((h, w), np.int32)
        vel_map = np.zeros((2, h, w), np.float32)
        vel_map[0], vel_map[1] = vb[0], vb[1]
        for k, (ob, tex) in enumerate(zip(objects, textures), start=1):
            oh, ow = ob.height, ob.width
            py, px = ob.top + ob.velocity[1] * t, ob.left + ob.velocity[0] * t
            ya, yb = max(py, 0), min(py + oh, h)
            xa, xb = max(px, 0), min(px + ow, w)
            if ya >= yb or xa >= xb:
                continue
            img[:, ya:yb, xa:xb] = tex[:, ya - py : yb - py, xa - px : xb - px]
            lab[ya:yb, xa:xb] = k
            vel_map[0, ya:yb, xa:xb] = ob.velocity[0]
            vel_map[1, ya:yb, xa:xb] = ob.velocity[1]
        frames[t] = _quantize(img)
        labels[t] = lab
        velocity[t] = vel_map

    flow_fwd = velocity[:-1].copy()
    flow_bwd = -velocity[1:]
    occ = np.zeros((n - 1, h, w), np.uint8)
    for k in range(n - 1):
        occ[k] = occlusion_gt_oracle(flow_fwd[k], flow_bwd[k], labels[k], labels[k + 1]).binary
    return SequenceSample(frames, flow_fwd, flow_bwd, labels, occ)


def gen_dataset(config: SceneConfig, count, seed=None):
    """``count`` sequences whose seeds are drawn from ``seed`` (default: config.seed)."""
    base = config.seed if seed is None else seed
    seeds = np.random.Generator(np.random.PCG64(base)).integers(0, 2**31 - 1, size=count)
    out = []
    for s in seeds:
        cfg = SceneConfig(**{**config.__dict__, "seed": int(s)})
        out.append(gen_sequence(cfg))
    return out


def crop_sample(sample: SequenceSample, rect) -> SequenceSample:
    """Crop to ``rect = (top, left, height, width)``.

    Pixels whose ground-truth flow leaves the crop become occluded; their
    flow stays valid.
    """
    top, left, ch, cw = (int(v) for v in rect)
    h, w = sample.shape
    if top < 0 or left < 0 or ch <= 0 or cw <= 0 or top + ch > h or left + cw > w:
        raise UsageError(f"crop {rect} outside a {h}x{w} sample")
    ys, xs = slice(top, top + ch), slice(left, left + cw)
    fwd = sample.flow_fwd[:, :, ys, xs].copy()
    gy, gx = np.mgrid[0:ch, 0:cw]
    tx = gx[None] + fwd[:, 0]
    ty = gy[None] + fwd[:, 1]
    leaves = (tx < 0) | (tx > cw - 1) | (ty < 0) | (ty > ch - 1)
    occ = (sample.occ[:, ys, xs].astype(bool) | leaves).astype(np.uint8)
    return SequenceSample(
        sample.frames[:, :, ys, xs].copy(),
        fwd,
        sample.flow_bwd[:, :, ys, xs].copy(),
        sample.labels[:, ys, xs].copy(),
        occ,
        sample.gamma[:, ys, xs].copy(),
        sample.rho[:, ys, xs].copy(),
    )


# ------------------------------------------------------------------ .flo I/O


def write_flo(flow, path):
    """Write a Middlebury .flo file from a (2, H, W) array or single FlowField."""
    uv = flow.array[0] if isinstance(flow, FlowField) else np.asarray(flow)
    if uv.ndim != 3 or uv.shape[0] != 2:
        raise UsageError(f"flow must be (2, H, W), got {uv.shape}")
    if not np.all(np.isfinite(uv)):
        raise UsageError("cannot write non-finite flow")
    _, h, w = uv.shape
    payload = np.ascontiguousarray(uv.transpose(1, 2, 0), dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_TAG, w, h))
        f.write(payload.tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError("truncated .flo header", offset=len(data))
    tag, w, h = struct.unpack_from("<fii", data, 0)
    if tag != FLO_TAG:
        raise FormatError(f"bad .flo magic {tag!r}", offset=0)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad .flo dimensions {w}x{h}", offset=4)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"truncated .flo payload, expected {need} bytes", offset=len(data))
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField.from_uv(uv.transpose(2, 0, 1).astype(np.float32))


# ------------------------------------------------------------------ PNG I/O


def _to_uint8(image):
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    return np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)


def export_png(image, path):
    """Save a [0, 1] float image (H, W), (H, W, 3) or (C, H, W), or uint8 RGB/gray."""
    arr = _to_uint8(image)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path, as_float=True):
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.float32) / 255.0 if as_float else arr


# --------------------------------------------------------------- directories


def write_sequence(sample: SequenceSample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(sample.length):
        export_png(sample.frames[k], d / f"frame_{k}.png")
        labels = sample.labels[k]
        if labels.max() > 255:
            raise UsageError("label ids above 255 cannot be stored as 8-bit PNG")
        export_png(labels.astype(np.uint8), d / f"labels_{k}.png")
    for k in range(sample.length - 1):
        write_flo(sample.flow_fwd[k], d / f"flow_fwd_{k}.flo")
        write_flo(sample.flow_bwd[k], d / f"flow_bwd_{k}.flo")
        export_png((sample.occ[k] * 255).astype(np.uint8), d / f"occ_{k}.png")


def read_sequence(directory) -> SequenceSample:
    d = Path(directory)
    n = 0
    while (d / f"frame_{n}.png").exists():
        n += 1
    if n < 2:
        raise FormatError(f"{d} holds fewer than two frames")
    frames = []
    for k in range(n):
        img = read_png(d / f"frame_{k}.png")
        frames.append(img.transpose(2, 0, 1) if img.ndim == 3 else img[None])
    labels = np.stack([read_png(d / f"labels_{k}.png", as_float=False).astype(np.int32) for k in range(n)])
    fwd = np.stack([read_flo(d / f"flow_fwd_{k}.flo").array[0] for k in range(n - 1)])
    bwd = np.stack([read_flo(d / f"flow_bwd_{k}.flo").array[0] for k in range(n - 1)])
    occ = np.stack([(read_png(d / f"occ_{k}.png", as_float=False) > 127).astype(np.uint8) for k in range(n - 1)])
    return SequenceSample(np.stack(frames).astype(np.float32), fwd, bwd, labels, occ)


def write_dataset(samples, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_sequence(s, root / f"seq_{i:04d}")


def read_dataset(root):
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not dirs:
        raise FormatError(f"no seq_* directories under {root}")
    return [read_sequence(p) for p in dirs]


def is_nonempty_dir(path):
    return os.path.isdir(path) and any(os.scandir(path))
