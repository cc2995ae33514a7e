"""Slow, loop-based reference implementations used only by the tests.

Each function is written from the definition of the quantity, sharing no
code with the package.
"""
import math
import struct


def forward_warp_loops(u, v, valid=None):
    """Scatter (u, v) lists-of-lists to x + round(F(x)); keep larger magnitude, later raster index on ties."""
    h, w = len(u), len(u[0])
    out_u = [[0.0] * w for _ in range(h)]
    out_v = [[0.0] * w for _ in range(h)]
    out_ok = [[0] * w for _ in range(h)]
    best = [[None] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            if valid is not None and not valid[y][x]:
                continue
            fu, fv = u[y][x], v[y][x]
            tx = x + _round_half_away(fu)
            ty = y + _round_half_away(fv)
            if not (0 <= tx < w and 0 <= ty < h):
                continue
            mag = math.hypot(fu, fv)
            cur = best[ty][tx]
            if cur is None or mag >= cur:
                best[ty][tx] = mag
                out_u[ty][tx], out_v[ty][tx] = fu, fv
                out_ok[ty][tx] = 1
    return out_u, out_v, out_ok


def _round_half_away(a):
    r = math.floor(abs(a) + 0.5)
    return int(r if a >= 0 else -r)


def bilinear_at(img, x, y):
    """Bilinear value of a 2-D list at (x, y) with zeros outside."""
    h, w = len(img), len(img[0])
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    total = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img[yy][xx]
    return total


def occlusion_loops(fu, fv, bu, bv, lab_t, lab_t1, threshold=1.0):
    """Per-pixel occlusion decision from flows and labels, as nested lists."""
    h, w = len(fu), len(fu[0])
    occ = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            tx, ty = x + fu[y][x], y + fv[y][x]
            if tx < 0 or tx > w - 1 or ty < 0 or ty > h - 1:
                occ[y][x] = 1
                continue
            nx, ny = _round_half_away(tx), _round_half_away(ty)
            if lab_t[y][x] != lab_t1[ny][nx]:
                occ[y][x] = 1
                continue
            ru = fu[y][x] + bilinear_at(bu, tx, ty)
            rv = fv[y][x] + bilinear_at(bv, tx, ty)
            if math.hypot(ru, rv) > threshold:
                occ[y][x] = 1
    return occ


def flo_bytes(u_rows, v_rows):
    """Byte-level .flo encoding built with struct only."""
    h, w = len(u_rows), len(u_rows[0])
    out = bytearray(struct.pack("<f", 202021.25))
    out += struct.pack("<i", w) + struct.pack("<i", h)
    for y in range(h):
        for x in range(w):
            out += struct.pack("<f", u_rows[y][x]) + struct.pack("<f", v_rows[y][x])
    return bytes(out)


def _wheel():
    segs = [("ry", 15), ("yg", 6), ("gc", 4), ("cb", 11), ("bm", 13), ("mr", 6)]
    cols = []
    for name, n in segs:
        for i in range(n):
            ramp = math.floor(255 * i / n)
            cols.append({
                "ry": (255, ramp, 0),
                "yg": (255 - ramp, 255, 0),
                "gc": (0, 255, ramp),
                "cb": (0, 255 - ramp, 255),
                "bm": (ramp, 0, 255),
                "mr": (255, 0, 255 - ramp),
            }[name])
    return cols


def color_pixel(fu, fv, maxrad):
    """Reference color-wheel encoding of one flow vector; returns (r, g, b) ints."""
    wheel = _wheel()
    n = len(wheel)
    fu, fv = fu / maxrad, fv / maxrad
    rad = math.sqrt(fu * fu + fv * fv)
    a = math.atan2(-fv, -fu) / math.pi
    fk = (a + 1.0) / 2.0 * (n - 1)
    k0 = int(fk)
    k1 = (k0 + 1) % n
    f = fk - k0
    pix = []
    for b in range(3):
        col = ((1 - f) * wheel[k0][b] + f * wheel[k1][b]) / 255.0
        col = 1 - rad * (1 - col) if rad <= 1 else col * 0.75
        pix.append(int(255 * col))
    return tuple(pix)


def confusion_loops(pred, gt, rho, threshold=0.5):
    tp = fp = fn = 0
    for p, g, r in zip(pred, gt, rho):
        if not r:
            continue
        hit = p > threshold
        if hit and g:
            tp += 1
        elif hit:
            fp += 1
        elif g:
            fn += 1
    return tp, fp, fn
