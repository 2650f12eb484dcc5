"""Pure-numpy plane kernels (fallback backend).

Every function here has an identical twin in ``_kernels_numba``; the two
must be drop-in interchangeable.  Digital planes are 2-D uint8 arrays with
values in {0, 1}; analog planes are 2-D float64.  ``flag`` is a uint8
activity plane; when ``masked`` is true, elements with flag == 0 keep the
previous destination value.

Kernels never allocate when unmasked and never assume any particular plane
size.  Callers guarantee that ``dst`` does not alias ``src`` for gather
kernels (``transfer``); elementwise kernels are alias-safe.
"""

import numpy as np


def _blend(dst, computed, flag):
    np.copyto(dst, computed, where=flag.astype(bool))


def nor(dst, a, b, flag, masked):
    if masked:
        _blend(dst, (1 - (a | b)).astype(np.uint8), flag)
    else:
        np.bitwise_or(a, b, out=dst)
        np.subtract(1, dst, out=dst)


def and_(dst, a, b, flag, masked):
    if masked:
        _blend(dst, a & b, flag)
    else:
        np.bitwise_and(a, b, out=dst)


def or_(dst, a, b, flag, masked):
    if masked:
        _blend(dst, a | b, flag)
    else:
        np.bitwise_or(a, b, out=dst)


def xor(dst, a, b, flag, masked):
    if masked:
        _blend(dst, a ^ b, flag)
    else:
        np.bitwise_xor(a, b, out=dst)


def not_(dst, a, flag, masked):
    if masked:
        _blend(dst, (1 - a).astype(np.uint8), flag)
    else:
        np.subtract(1, a, out=dst)


def copy(dst, a, flag, masked):
    if masked:
        _blend(dst, a, flag)
    else:
        np.copyto(dst, a)


def fill(dst, value, flag, masked):
    if masked:
        _blend(dst, np.full_like(dst, value), flag)
    else:
        dst.fill(value)


def mask_clear(dst, pattern, flag, masked):
    if masked:
        _blend(dst, dst & (1 - pattern), flag)
    else:
        np.bitwise_and(dst, 1 - pattern, out=dst)


def check_directions(rn, rs, re, rw):
    """Number of PEs with more than one direction register set."""
    s = rn + rs
    s = s + re
    s = s + rw
    return int(np.count_nonzero(s > 1))


def transfer(dst, src, rn, rs, re, rw, flag, masked):
    """Neighbour transfer: each PE with a direction bit sends src to that
    neighbour; receivers OR incoming values; everyone else gets 0."""
    out = np.zeros_like(src)
    out[1:, :] |= src[:-1, :] & rs[:-1, :]
    out[:-1, :] |= src[1:, :] & rn[1:, :]
    out[:, 1:] |= src[:, :-1] & re[:, :-1]
    out[:, :-1] |= src[:, 1:] & rw[:, 1:]
    if masked:
        _blend(dst, out, flag)
    else:
        np.copyto(dst, out)


def transfer_periodic(dst, src, code, flag, masked):
    """transfer() specialized for 4x4-periodic direction planes; ``code``
    holds 0 (no send) or 1/2/3/4 for north/south/east/west per local cell."""
    h, w = dst.shape
    reps = (h // 4, w // 4)
    planes = [np.tile((code == k).astype(np.uint8), reps) for k in (1, 2, 3, 4)]
    transfer(dst, src, planes[0], planes[1], planes[2], planes[3], flag, masked)


def gather16(plane, gl):
    """Decode every 4x4 block to its 16-bit pattern; (h/4, w/4) int64.

    A uint32 view packs each block row's four {0,1} bytes into one word;
    the per-layout tables ``gl`` map those bytes to significance bits.
    """
    p32 = plane.view(np.uint32)
    W = (p32[0::4].astype(np.int64) | (p32[1::4].astype(np.int64) << 1)
         | (p32[2::4].astype(np.int64) << 2) | (p32[3::4].astype(np.int64) << 3))
    return (gl[0, W & 0xFF] | gl[1, (W >> 8) & 0xFF]
            | gl[2, (W >> 16) & 0xFF] | gl[3, (W >> 24) & 0xFF])


def scatter16(plane, sl, vals):
    """Write 16-bit patterns back into every 4x4 block."""
    p32 = plane.view(np.uint32)
    lo = vals & 0xFF
    hi = (vals >> 8) & 0xFF
    for lr in range(4):
        p32[lr::4] = sl[lr, 0, lo] | sl[lr, 1, hi]


def block_add16(a, b, t1, gl, sl):
    """Fused ripple-carry add over snake-encoded planes (see the numba twin)."""
    av = gather16(a, gl)
    bv = gather16(b, gl)
    tl = None
    iters = 0
    while bv.any():
        iters += 1
        tl = av & bv
        av ^= bv
        bv = (tl << 1) & 0xFFFF
    if iters > 0:
        scatter16(a, sl, av)
        scatter16(b, sl, bv)
        scatter16(t1, sl, tl)
    return iters


def block_sub16(a, b, t1, t2, gl, sl):
    av = gather16(a, gl)
    bv = gather16(b, gl)
    tl = nl = None
    iters = 0
    while bv.any():
        iters += 1
        nl = av ^ 0xFFFF
        tl = nl & bv
        av ^= bv
        bv = (tl << 1) & 0xFFFF
    if iters > 0:
        scatter16(a, sl, av)
        scatter16(b, sl, bv)
        scatter16(t1, sl, tl)
        scatter16(t2, sl, nl)
    return iters


def block_shift16(plane, gl, sl, n, up):
    """n single-bit block shifts collapsed into one gather/scatter pass."""
    u = gather16(plane, gl)
    if up:
        u = (u << n) & 0xFFFF
    else:
        u >>= n
    scatter16(plane, sl, u)


def global_or(a):
    return bool(a.any())


def analog_add(dst, a, b, lo, hi, flag, masked):
    if masked:
        _blend(dst, np.clip(a + b, lo, hi), flag)
    else:
        np.add(a, b, out=dst)
        np.clip(dst, lo, hi, out=dst)


def analog_sub(dst, a, b, lo, hi, flag, masked):
    if masked:
        _blend(dst, np.clip(a - b, lo, hi), flag)
    else:
        np.subtract(a, b, out=dst)
        np.clip(dst, lo, hi, out=dst)


def analog_copy(dst, a, flag, masked):
    if masked:
        _blend(dst, a, flag)
    else:
        np.copyto(dst, a)


def analog_max(dst, a, b, flag, masked):
    if masked:
        _blend(dst, np.maximum(a, b), flag)
    else:
        np.maximum(a, b, out=dst)


_GRIDS = {}


def _grid(shape):
    if shape not in _GRIDS:
        _GRIDS[shape] = np.indices(shape, dtype=np.float64)
    return _GRIDS[shape]


def warp_bilinear(dst, src, m00, m01, m02, m10, m11, m12):
    """Affine pull-warp with bilinear sampling, zero outside the source.

    Source coordinates of output pixel (r, c) are
    (m00*r + m01*c + m02, m10*r + m11*c + m12).
    """
    rr, cc = _grid(dst.shape)
    sr = m00 * rr + m01 * cc + m02
    sc = m10 * rr + m11 * cc + m12
    h, w = src.shape
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0

    def tap(ri, ci):
        valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        v = src[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        return np.where(valid, v, 0.0)

    v00 = tap(r0, c0)
    v01 = tap(r0, c0 + 1)
    v10 = tap(r0 + 1, c0)
    v11 = tap(r0 + 1, c0 + 1)
    top = v00 * (1.0 - fc) + v01 * fc
    bot = v10 * (1.0 - fc) + v11 * fc
    dst[:] = top * (1.0 - fr) + bot * fr
