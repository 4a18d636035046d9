"""Hot loops used by the engine, resampling and labeling code.

Every public function here dispatches to a numba kernel when numba is
available and not disabled, otherwise to a numpy implementation with the
same contract. The two paths agree to float rounding; im2col, col2im,
maxpool and labeling agree bit-for-bit because they accumulate in the
same order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import HAS_NUMBA, njit, prange

__all__ = [
    "im2col3d",
    "col2im3d",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "label26",
    "trilinear_sample",
]


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def _im2col_np(xp, kd, kh, kw, sd, sh, sw, do, ho, wo):
    c = xp.shape[0]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sd, ::sh, ::sw][:, :do, :ho, :wo]
    # (C, Do, Ho, Wo, kd, kh, kw) -> (C, kd, kh, kw, Do, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c * kd * kh * kw, do * ho * wo)


def _col2im_np(cols, c, dp, hp, wp, kd, kh, kw, sd, sh, sw, do, ho, wo):
    out = np.zeros((c, dp, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kd, kh, kw, do, ho, wo)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, a:a + sd * (do - 1) + 1:sd, b:b + sh * (ho - 1) + 1:sh, e:e + sw * (wo - 1) + 1:sw] += cols[:, a, b, e]
    return out


# outputs are allocated by numpy and filled in place: numpy's large-buffer
# allocator requests huge pages, which halves the first-touch cost

@njit(parallel=True, cache=True)
def _im2col_nb(xp, cols, kd, kh, kw, sd, sh, sw, do, ho, wo):
    nrows = cols.shape[0]
    for r in prange(nrows):
        e = r % kw
        b = (r // kw) % kh
        a = (r // (kw * kh)) % kd
        ch = r // (kw * kh * kd)
        col = 0
        for z in range(do):
            zz = z * sd + a
            for y in range(ho):
                yy = y * sh + b
                for x in range(wo):
                    cols[r, col] = xp[ch, zz, yy, x * sw + e]
                    col += 1


@njit(parallel=True, cache=True)
def _col2im_nb(cols, out, kd, kh, kw, sd, sh, sw, do, ho, wo):
    for ch in prange(out.shape[0]):
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    r = ((ch * kd + a) * kh + b) * kw + e
                    col = 0
                    for z in range(do):
                        zz = z * sd + a
                        for y in range(ho):
                            yy = y * sh + b
                            for x in range(wo):
                                out[ch, zz, yy, x * sw + e] += cols[r, col]
                                col += 1


def im2col3d(xp, kernel, stride, out_dims):
    """Unfold one padded sample ``xp`` of shape (C, D, H, W).

    Returns a (C*kd*kh*kw, Do*Ho*Wo) matrix whose row order matches
    ``weight.reshape(Cout, -1)``.
    """
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_dims
    xp = np.ascontiguousarray(xp)
    if HAS_NUMBA:
        cols = np.empty((xp.shape[0] * kd * kh * kw, do * ho * wo), dtype=xp.dtype)
        _im2col_nb(xp, cols, kd, kh, kw, sd, sh, sw, do, ho, wo)
        return cols
    return _im2col_np(xp, kd, kh, kw, sd, sh, sw, do, ho, wo)


def col2im3d(cols, channels, padded_dims, kernel, stride, out_dims):
    """Scatter-add the adjoint of :func:`im2col3d` back onto a padded grid."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    do, ho, wo = out_dims
    dp, hp, wp = padded_dims
    cols = np.ascontiguousarray(cols)
    if HAS_NUMBA:
        out = np.zeros((channels, dp, hp, wp), dtype=cols.dtype)
        _col2im_nb(cols, out, kd, kh, kw, sd, sh, sw, do, ho, wo)
        return out
    return _col2im_np(cols, channels, dp, hp, wp, kd, kh, kw, sd, sh, sw, do, ho, wo)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def _pool_out(n, k, s):
    return (n - k) // s + 1


def _maxpool_fwd_np(x, k, s):
    n, c, d, h, w = x.shape
    do, ho, wo = _pool_out(d, k, s), _pool_out(h, k, s), _pool_out(w, k, s)
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s][:, :, :do, :ho, :wo]
    win = win.reshape(n, c, do, ho, wo, k * k * k)
    # argmax returns the first maximum, i.e. the lowest flat index in the window
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    a, rem = np.divmod(arg, k * k)
    b, e = np.divmod(rem, k)
    zz = np.arange(do)[:, None, None] * s + a
    yy = np.arange(ho)[None, :, None] * s + b
    xx = np.arange(wo)[None, None, :] * s + e
    idx = (zz * h + yy) * w + xx
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _maxpool_bwd_np(gout, idx, in_shape):
    n, c, d, h, w = in_shape
    gin = np.zeros((n * c, d * h * w), dtype=gout.dtype)
    rows = np.repeat(np.arange(n * c), idx[0, 0].size)
    np.add.at(gin, (rows, idx.reshape(-1)), gout.reshape(-1))
    return gin.reshape(in_shape)


@njit(parallel=True, cache=True)
def _maxpool_fwd_nb(x, k, s):
    n, c, d, h, w = x.shape
    do = (d - k) // s + 1
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.empty((n, c, do, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, do, ho, wo), dtype=np.int64)
    for nc in prange(n * c):
        i = nc // c
        j = nc % c
        for z in range(do):
            for y in range(ho):
                for xo in range(wo):
                    best = x[i, j, z * s, y * s, xo * s]
                    bidx = ((z * s) * h + y * s) * w + xo * s
                    for a in range(k):
                        for b in range(k):
                            for e in range(k):
                                v = x[i, j, z * s + a, y * s + b, xo * s + e]
                                if v > best:
                                    best = v
                                    bidx = ((z * s + a) * h + y * s + b) * w + xo * s + e
                    out[i, j, z, y, xo] = best
                    idx[i, j, z, y, xo] = bidx
    return out, idx


@njit(parallel=True, cache=True)
def _maxpool_bwd_nb(gout, idx, n, c, d, h, w):
    gin = np.zeros((n, c, d * h * w), dtype=gout.dtype)
    do, ho, wo = gout.shape[2], gout.shape[3], gout.shape[4]
    for nc in prange(n * c):
        i = nc // c
        j = nc % c
        for z in range(do):
            for y in range(ho):
                for xo in range(wo):
                    gin[i, j, idx[i, j, z, y, xo]] += gout[i, j, z, y, xo]
    return gin.reshape((n, c, d, h, w))


def maxpool3d_forward(x, window, stride):
    """Return (pooled, argmax flat spatial index per output voxel)."""
    x = np.ascontiguousarray(x)
    if HAS_NUMBA:
        return _maxpool_fwd_nb(x, window, stride)
    return _maxpool_fwd_np(x, window, stride)


def maxpool3d_backward(gout, idx, in_shape):
    gout = np.ascontiguousarray(gout)
    if HAS_NUMBA:
        n, c, d, h, w = in_shape
        return _maxpool_bwd_nb(gout, np.ascontiguousarray(idx), n, c, d, h, w)
    return _maxpool_bwd_np(gout, idx, in_shape)


# ---------------------------------------------------------------------------
# 26-connected component labeling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _label26_nb(mask):
    d, h, w = mask.shape
    size = d * h * w
    flat = mask.reshape(size)
    parent = np.arange(size)
    for p in range(size):
        if not flat[p]:
            continue
        z = p // (h * w)
        y = (p // w) % h
        x = p % w
        # neighbours earlier in raster order
        for dz in range(-1, 1):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                        continue
                    zz = z + dz
                    yy = y + dy
                    xx = x + dx
                    if zz < 0 or yy < 0 or yy >= h or xx < 0 or xx >= w:
                        continue
                    q = (zz * h + yy) * w + xx
                    if flat[q]:
                        rp = _find(parent, p)
                        rq = _find(parent, q)
                        if rp != rq:
                            # keep the smaller index as root
                            if rp < rq:
                                parent[rq] = rp
                            else:
                                parent[rp] = rq
    labels = np.zeros(size, dtype=np.int32)
    root_label = np.zeros(size, dtype=np.int32)
    count = 0
    for p in range(size):
        if flat[p]:
            r = _find(parent, p)
            if root_label[r] == 0:
                count += 1
                root_label[r] = count
            labels[p] = root_label[r]
    return labels.reshape((d, h, w)), count


def _label26_np(mask):
    d, h, w = mask.shape
    big = np.iinfo(np.int64).max
    lab = np.where(mask, np.arange(mask.size, dtype=np.int64).reshape(mask.shape), big)
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    while True:
        padded = np.pad(lab, 1, constant_values=big)
        best = lab.copy()
        for a, b, c in offsets:
            np.minimum(best, padded[1 + a:1 + a + d, 1 + b:1 + b + h, 1 + c:1 + c + w], out=best)
        best = np.where(mask, best, big)
        # pointer jumping: follow each label to the label of its representative voxel
        fg = best != big
        best[fg] = lab.reshape(-1)[best[fg]]
        if np.array_equal(best, lab):
            break
        lab = best
    labels = np.zeros(mask.shape, dtype=np.int32)
    if not mask.any():
        return labels, 0
    # every component's label is its minimal flat index, so sorted order = first appearance
    uniq, inv = np.unique(lab[mask], return_inverse=True)
    labels[mask] = inv.astype(np.int32) + 1
    return labels, int(uniq.size)


def label26(mask):
    """Label 26-connected foreground components of a (D, H, W) boolean grid.

    Labels are 1..count in order of each component's first voxel in raster
    (x-fastest) order; background is 0.
    """
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3D mask, got shape {mask.shape}")
    if HAS_NUMBA:
        labels, count = _label26_nb(mask)
        return labels, int(count)
    return _label26_np(mask)


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------

def _trilinear_np(vol, z, y, x, zero_outside):
    d, h, w = vol.shape
    coords = [z, y, x]
    dims = [d, h, w]
    lo = []
    frac = []
    inside = np.ones(z.shape, dtype=bool)
    for c, n in zip(coords, dims):
        if zero_outside:
            inside &= (c >= -1e-6) & (c <= n - 1 + 1e-6)
        cc = np.clip(c, 0.0, n - 1)
        f = np.floor(cc)
        i0 = f.astype(np.int64)
        i0 = np.minimum(i0, max(n - 2, 0))
        lo.append(i0)
        frac.append(cc - i0 if n > 1 else np.zeros_like(cc))
    z0, y0, x0 = lo
    z1 = np.minimum(z0 + 1, d - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fz, fy, fx = frac
    c00 = vol[z0, y0, x0] * (1 - fx) + vol[z0, y0, x1] * fx
    c01 = vol[z0, y1, x0] * (1 - fx) + vol[z0, y1, x1] * fx
    c10 = vol[z1, y0, x0] * (1 - fx) + vol[z1, y0, x1] * fx
    c11 = vol[z1, y1, x0] * (1 - fx) + vol[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    if zero_outside:
        out = np.where(inside, out, 0.0)
    return out


@njit(parallel=True, cache=True)
def _trilinear_nb(vol, z, y, x, zero_outside):
    d, h, w = vol.shape
    m = z.shape[0]
    out = np.empty(m, dtype=np.float64)
    for i in prange(m):
        cz = z[i]
        cy = y[i]
        cx = x[i]
        if zero_outside and (cz < -1e-6 or cz > d - 1 + 1e-6 or cy < -1e-6 or cy > h - 1 + 1e-6
                             or cx < -1e-6 or cx > w - 1 + 1e-6):
            out[i] = 0.0
            continue
        cz = min(max(cz, 0.0), d - 1.0)
        cy = min(max(cy, 0.0), h - 1.0)
        cx = min(max(cx, 0.0), w - 1.0)
        z0 = min(int(np.floor(cz)), max(d - 2, 0))
        y0 = min(int(np.floor(cy)), max(h - 2, 0))
        x0 = min(int(np.floor(cx)), max(w - 2, 0))
        fz = cz - z0 if d > 1 else 0.0
        fy = cy - y0 if h > 1 else 0.0
        fx = cx - x0 if w > 1 else 0.0
        z1 = min(z0 + 1, d - 1)
        y1 = min(y0 + 1, h - 1)
        x1 = min(x0 + 1, w - 1)
        c00 = vol[z0, y0, x0] * (1 - fx) + vol[z0, y0, x1] * fx
        c01 = vol[z0, y1, x0] * (1 - fx) + vol[z0, y1, x1] * fx
        c10 = vol[z1, y0, x0] * (1 - fx) + vol[z1, y0, x1] * fx
        c11 = vol[z1, y1, x0] * (1 - fx) + vol[z1, y1, x1] * fx
        c0 = c00 * (1 - fy) + c01 * fy
        c1 = c10 * (1 - fy) + c11 * fy
        out[i] = c0 * (1 - fz) + c1 * fz
    return out


def trilinear_sample(vol, z, y, x, zero_outside=False):
    """Sample ``vol`` (D, H, W) at fractional voxel coordinates.

    Coordinates outside the grid are clamped to the edge, or produce 0 when
    ``zero_outside`` is set. Computation is in float64.
    """
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    shape = np.shape(z)
    z = np.ascontiguousarray(z, dtype=np.float64).reshape(-1)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if HAS_NUMBA:
        out = _trilinear_nb(vol, z, y, x, zero_outside)
    else:
        out = _trilinear_np(vol, z, y, x, zero_outside)
    return out.reshape(shape)
