"""Flow-specific transforms: warping, packaging, ground-truth occlusion, colorization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .errors import UsageError

TEMPORAL_CHANNELS = 9
VALID_TOL = 1e-6


@dataclass
class FlowField:
    """Displacement in pixels, ``uv`` shaped (B, 2, H, W), u rightward and v downward.

    ``uv`` may be a :class:`~continualflow.diffgraph.Tensor` when the field is
    part of a differentiation graph.  ``valid`` is a {0, 1} array (B, 1, H, W).
    """

    uv: np.ndarray | dg.Tensor
    valid: np.ndarray

    @classmethod
    def from_uv(cls, uv, valid=None):
        arr = uv.data if isinstance(uv, dg.Tensor) else np.asarray(uv)
        if arr.ndim == 3:
            arr = arr[None]
            if not isinstance(uv, dg.Tensor):
                uv = arr
        if arr.ndim != 4 or arr.shape[1] != 2:
            raise UsageError(f"flow must be (B, 2, H, W), got {arr.shape}")
        b, _, h, w = arr.shape
        if valid is None:
            valid = np.ones((b, 1, h, w), dtype=arr.dtype)
        else:
            valid = np.asarray(valid, dtype=arr.dtype).reshape(b, 1, h, w)
        return cls(uv, valid)

    @property
    def array(self):
        return self.uv.data if isinstance(self.uv, dg.Tensor) else np.asarray(self.uv)

    @property
    def shape(self):
        return self.array.shape

    def spatial(self):
        return self.array.shape[2:]


@dataclass
class OcclusionMap:
    """Per-pixel probabilities of being occluded and not occluded."""

    p_occ: np.ndarray
    p_noc: np.ndarray

    @classmethod
    def from_binary(cls, occluded):
        occ = np.asarray(occluded).astype(np.float64)
        return cls(occ, 1.0 - occ)

    @classmethod
    def from_probs(cls, probs):
        """``probs`` is the 2-channel softmax output (occluded first)."""
        p = probs.data if isinstance(probs, dg.Tensor) else np.asarray(probs)
        return cls(p[:, 0], p[:, 1])

    @property
    def binary(self):
        return self.p_occ > 0.5


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def forward_warp(prev_flow: FlowField) -> FlowField:
    """Scatter each valid vector F(x) to x + round(F(x)).

    When several sources land on one target the vector with the larger L2
    norm wins; equal norms go to the source with the larger raster index.
    Targets that nothing lands on are invalid.  Not differentiable.
    """
    uv = prev_flow.array
    valid = np.asarray(prev_flow.valid)
    b, _, h, w = uv.shape
    out = np.zeros_like(uv)
    out_valid = np.zeros((b, 1, h, w), dtype=uv.dtype)
    gy, gx = np.mgrid[0:h, 0:w]
    raster = np.arange(h * w)
    for i in range(b):
        u, v = uv[i, 0], uv[i, 1]
        tx = gx + round_half_away(u).astype(np.int64)
        ty = gy + round_half_away(v).astype(np.int64)
        keep = (valid[i, 0] > 0.5) & (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        keep = keep.reshape(-1)
        if not keep.any():
            continue
        src = raster[keep]
        tgt = (ty * w + tx).reshape(-1)[keep]
        uf, vf = u.reshape(-1)[src], v.reshape(-1)[src]
        mag = uf.astype(np.float64) ** 2 + vf.astype(np.float64) ** 2
        order = np.lexsort((src, mag, tgt))
        tgt_sorted = tgt[order]
        last = np.ones(order.size, dtype=bool)
        last[:-1] = tgt_sorted[:-1] != tgt_sorted[1:]
        win = order[last]
        ty_win, tx_win = np.divmod(tgt[win], w)
        out[i, 0, ty_win, tx_win] = uf[win]
        out[i, 1, ty_win, tx_win] = vf[win]
        out_valid[i, 0, ty_win, tx_win] = 1.0
    return FlowField(out, out_valid)


def _wrap(x, dtype=None):
    if isinstance(x, dg.Tensor):
        return x, True
    return dg.Tensor(np.asarray(x), dtype=dtype), False


def backward_warp_prev_flow(prev_flow: FlowField, backward_flow: FlowField) -> FlowField:
    """Bring the previous flow into the current frame: F(x + B(x)), bilinearly.

    Differentiable when either ``uv`` is a graph tensor.  Invalid where the
    sample leaves the frame, touches invalid previous pixels, or where the
    backward flow itself is invalid.
    """
    if prev_flow.shape != backward_flow.shape:
        raise UsageError(f"shape mismatch {prev_flow.shape} vs {backward_flow.shape}")
    prev, prev_graph = _wrap(prev_flow.uv)
    back, back_graph = _wrap(backward_flow.uv, prev.dtype)
    sampled, inside = dg.grid_sample_bilinear(prev, back)
    with dg.no_grad():
        vs, _ = dg.grid_sample_bilinear(dg.Tensor(np.asarray(prev_flow.valid, dtype=prev.dtype)), dg.Tensor(back.data))
    valid = inside * (vs.data >= 1.0 - VALID_TOL) * (np.asarray(backward_flow.valid) > 0.5)
    valid = valid.astype(prev.dtype)
    uv = dg.mul(sampled, np.repeat(valid, 2, axis=1))
    if not (prev_graph or back_graph):
        uv = uv.data
    return FlowField(uv, valid)


def pack_temporal(fwd_warped=None, bwd_warped=None, backward=None, shape=None, dtype=np.float32):
    """Concatenate the temporal input into 9 channels.

    Order: forward-warped (u, v, valid), backward-warped (u, v, valid),
    backward flow (u, v, valid).  Absent parts are zero with zero validity.
    ``shape`` = (B, H, W) is needed only when every part is absent.
    """
    present = [f for f in (fwd_warped, bwd_warped, backward) if f is not None]
    shapes = {f.shape for f in present}
    if len(shapes) > 1:
        raise UsageError(f"temporal inputs disagree in shape: {sorted(shapes)}")
    if present:
        b, _, h, w = present[0].shape
        if shape is not None and tuple(shape) != (b, h, w):
            raise UsageError(f"temporal inputs have shape {(b, h, w)}, expected {tuple(shape)}")
        dtype = present[0].array.dtype
    elif shape is None:
        raise UsageError("shape is required when no temporal input is present")
    else:
        b, h, w = shape

    parts = []
    for f in (fwd_warped, bwd_warped, backward):
        if f is None:
            parts.append(dg.Tensor(np.zeros((b, 3, h, w), dtype=dtype)))
            continue
        valid = np.asarray(f.valid, dtype=dtype)
        uv = f.uv if isinstance(f.uv, dg.Tensor) else dg.Tensor(np.asarray(f.uv, dtype=dtype))
        parts.append(dg.mul(uv, np.repeat(valid, 2, axis=1)))
        parts.append(dg.Tensor(valid))
    return dg.concat(parts, axis=1)


def upsample_flow_x2(flow: FlowField) -> FlowField:
    """Bilinear x2 upsampling with displacement values doubled."""
    uv, graph = _wrap(flow.uv)
    up = dg.mul(dg.upsample_bilinear_x2(uv), 2.0)
    with dg.no_grad():
        vu = dg.upsample_bilinear_x2(dg.Tensor(np.asarray(flow.valid, dtype=uv.dtype))).data
    valid = (vu >= 1.0 - VALID_TOL).astype(uv.dtype)
    return FlowField(up if graph else up.data, valid)


def downsample_flow(uv, levels):
    """Average-pool by 2**levels, halving values at every step."""
    out = np.asarray(uv)
    for _ in range(levels):
        b, c, h, w = out.shape
        out = out.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)) * 0.5
    return out


def downsample_max(mask, levels):
    """Max-pool a (B, 1, H, W) map by 2**levels."""
    out = np.asarray(mask)
    for _ in range(levels):
        b, c, h, w = out.shape
        out = out.reshape(b, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    return out


def downsample_min(mask, levels):
    return -downsample_max(-np.asarray(mask), levels)


def occlusion_gt_oracle(fwd_gt, bwd_gt, labels_t, labels_t1, threshold=1.0) -> OcclusionMap:
    """Occlusion ground truth from flows and object labels of one frame pair.

    ``fwd_gt`` is the (2, H, W) flow t -> t+1 and ``bwd_gt`` the flow
    t+1 -> t in frame t+1 coordinates.  A pixel is occluded when its target
    leaves the frame, the label at the target (nearest pixel) differs, or
    the forward-backward residual exceeds ``threshold`` pixels in L2.
    """
    fwd = np.asarray(fwd_gt, dtype=np.float64)
    bwd = np.asarray(bwd_gt, dtype=np.float64)
    lt, lt1 = np.asarray(labels_t), np.asarray(labels_t1)
    if not (fwd.shape[1:] == bwd.shape[1:] == lt.shape == lt1.shape):
        raise UsageError("flows and labels must share spatial shape")
    h, w = lt.shape
    gy, gx = np.mgrid[0:h, 0:w]
    tx = gx + fwd[0]
    ty = gy + fwd[1]
    outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    nx = np.clip(np.floor(tx + 0.5), 0, w - 1).astype(np.int64)
    ny = np.clip(np.floor(ty + 0.5), 0, h - 1).astype(np.int64)
    label_change = lt1[ny, nx] != lt
    with dg.no_grad():
        back_at_target, _ = dg.grid_sample_bilinear(dg.Tensor(bwd[None]), dg.Tensor(fwd[None]))
    residual = np.hypot(*(fwd + back_at_target.data[0]))
    occluded = outside | label_change | (residual > threshold)
    return OcclusionMap.from_binary(occluded)


# Middlebury color wheel: red, yellow, green, cyan, blue, magenta segments
_WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel():
    ry, yg, gc, cb, bm, mr = _WHEEL_SEGMENTS
    wheel = np.zeros((sum(_WHEEL_SEGMENTS), 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(flow, max_magnitude=None, valid=None):
    """Encode a (2, H, W) flow as an (H, W, 3) uint8 image.

    Hue follows the direction, saturation grows with magnitude / max_magnitude
    (the largest valid magnitude when None).  Invalid pixels are black.
    """
    uv = np.asarray(flow.array[0] if isinstance(flow, FlowField) else flow, dtype=np.float64)
    if valid is None and isinstance(flow, FlowField):
        valid = np.asarray(flow.valid)[0, 0]
    valid = np.ones(uv.shape[1:], bool) if valid is None else np.asarray(valid) > 0.5
    u, v = uv[0], uv[1]
    rad = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = rad[valid].max() if valid.any() else 0.0
    max_magnitude = max(float(max_magnitude), 1e-12)
    u, v, rad = u / max_magnitude, v / max_magnitude, rad / max_magnitude

    wheel = color_wheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    inside = (rad <= 1)[..., None]
    col = np.where(inside, 1 - rad[..., None] * (1 - col), col * 0.75)
    img = np.floor(255 * col).astype(np.uint8)
    img[~valid] = 0
    return img
