"""Numba-jitted plane kernels (default backend).

Contract-identical to ``_kernels_numpy``; see that module for semantics.
All kernels are single-pass loops over the plane so a 256x256 call costs a
few microseconds.  ``cache=True`` persists the compiled code between
processes.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def nor(dst, a, b, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = 1 - (a[r, c] | b[r, c])


@njit(**_JIT)
def and_(dst, a, b, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = a[r, c] & b[r, c]


@njit(**_JIT)
def or_(dst, a, b, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = a[r, c] | b[r, c]


@njit(**_JIT)
def xor(dst, a, b, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = a[r, c] ^ b[r, c]


@njit(**_JIT)
def not_(dst, a, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = 1 - a[r, c]


@njit(**_JIT)
def copy(dst, a, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = a[r, c]


@njit(**_JIT)
def fill(dst, value, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = value


@njit(**_JIT)
def mask_clear(dst, pattern, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            if pattern[r, c]:
                dst[r, c] = 0


@njit(**_JIT)
def check_directions(rn, rs, re, rw):
    h, w = rn.shape
    bad = 0
    for r in range(h):
        for c in range(w):
            if rn[r, c] + rs[r, c] + re[r, c] + rw[r, c] > 1:
                bad += 1
    return bad


@njit(**_JIT)
def transfer(dst, src, rn, rs, re, rw, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            v = np.uint8(0)
            if r + 1 < h and rn[r + 1, c] and src[r + 1, c]:
                v = np.uint8(1)
            elif r > 0 and rs[r - 1, c] and src[r - 1, c]:
                v = np.uint8(1)
            elif c > 0 and re[r, c - 1] and src[r, c - 1]:
                v = np.uint8(1)
            elif c + 1 < w and rw[r, c + 1] and src[r, c + 1]:
                v = np.uint8(1)
            dst[r, c] = v


@njit(**_JIT)
def transfer_periodic(dst, src, code, flag, masked):
    """transfer() specialized for direction planes that tile a 4x4 block.

    ``code`` holds, per block-local cell, 0 (no send) or 1/2/3/4 for
    north/south/east/west.  Semantics match transfer() exactly.
    """
    h, w = dst.shape
    for r in range(h):
        rm = r & 3
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            v = np.uint8(0)
            if r + 1 < h and code[(r + 1) & 3, c & 3] == 1 and src[r + 1, c]:
                v = np.uint8(1)
            elif r > 0 and code[(r - 1) & 3, c & 3] == 2 and src[r - 1, c]:
                v = np.uint8(1)
            elif c > 0 and code[rm, (c - 1) & 3] == 3 and src[r, c - 1]:
                v = np.uint8(1)
            elif c + 1 < w and code[rm, (c + 1) & 3] == 4 and src[r, c + 1]:
                v = np.uint8(1)
            dst[r, c] = v


# Block gather/scatter run on a uint32 view of the plane: one 32-bit load
# covers a block row of four {0,1} bytes, four loads pack a whole block
# into one word W with cell (lr, lc) at bit 8*lc + lr, and 256-entry
# lookup tables (built per snake layout) turn W's bytes straight into the
# block's 16-bit value and back.

@njit(**_JIT)
def gather16(plane, gl):
    """Decode every 4x4 block to its 16-bit pattern; (h/4, w/4) int64."""
    h, w = plane.shape
    bw = w // 4
    p32 = plane.ravel().view(np.uint32)
    out = np.empty((h // 4, bw), np.int64)
    for i in range(h // 4):
        base = 4 * i * bw
        for j in range(bw):
            q = base + j
            W = (int(p32[q]) | (int(p32[q + bw]) << 1)
                 | (int(p32[q + 2 * bw]) << 2) | (int(p32[q + 3 * bw]) << 3))
            out[i, j] = (gl[0, W & 0xFF] | gl[1, (W >> 8) & 0xFF]
                         | gl[2, (W >> 16) & 0xFF] | gl[3, (W >> 24) & 0xFF])
    return out


@njit(**_JIT)
def scatter16(plane, sl, vals):
    """Write 16-bit patterns back into every 4x4 block."""
    h, w = plane.shape
    bw = w // 4
    p32 = plane.ravel().view(np.uint32)
    for i in range(h // 4):
        base = 4 * i * bw
        for j in range(bw):
            q = base + j
            u = vals[i, j]
            lo = u & 0xFF
            hi = (u >> 8) & 0xFF
            p32[q] = sl[0, 0, lo] | sl[0, 1, hi]
            p32[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
            p32[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
            p32[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]


@njit(**_JIT)
def block_add16(a, b, t1, gl, sl):
    """Fused ripple-carry add over snake-encoded planes.

    Runs the exact carry loop (carry = AND, sum = XOR, carry shifts one
    bit up, masked at the block edge) with each block's 16 bits held in a
    scalar, which is isomorphic to the per-instruction plane sequence.
    Blocks are independent (the carry leaving a block is always cleared),
    so each one's chain runs locally; the plane-level round count is the
    longest local chain, and a block's final t1 residue is its last carry
    if its chain ended on the last round, else the zero later rounds
    would have overwritten it with.  Returns the round count; leaves a, b
    and the t1 scratch exactly as the instruction sequence would.
    """
    h, w = a.shape
    bh, bw = h // 4, w // 4
    a32 = a.ravel().view(np.uint32)
    b32 = b.ravel().view(np.uint32)
    t32 = t1.ravel().view(np.uint32)
    xv = np.empty(bh * bw, np.int64)
    tl = np.empty(bh * bw, np.int64)
    rl = np.empty(bh * bw, np.int64)
    iters = 0
    p = 0
    for i in range(bh):
        base = 4 * i * bw
        for j in range(bw):
            q = base + j
            Wa = (int(a32[q]) | (int(a32[q + bw]) << 1)
                  | (int(a32[q + 2 * bw]) << 2) | (int(a32[q + 3 * bw]) << 3))
            Wb = (int(b32[q]) | (int(b32[q + bw]) << 1)
                  | (int(b32[q + 2 * bw]) << 2) | (int(b32[q + 3 * bw]) << 3))
            x = (gl[0, Wa & 0xFF] | gl[1, (Wa >> 8) & 0xFF]
                 | gl[2, (Wa >> 16) & 0xFF] | gl[3, (Wa >> 24) & 0xFF])
            y = (gl[0, Wb & 0xFF] | gl[1, (Wb >> 8) & 0xFF]
                 | gl[2, (Wb >> 16) & 0xFF] | gl[3, (Wb >> 24) & 0xFF])
            r = 0
            t = 0
            while y:
                r += 1
                t = x & y
                x ^= y
                y = (t << 1) & 0xFFFF
            xv[p] = x
            tl[p] = t
            rl[p] = r
            if r > iters:
                iters = r
            p += 1
    if iters > 0:
        p = 0
        for i in range(bh):
            base = 4 * i * bw
            for j in range(bw):
                q = base + j
                x = xv[p]
                t = tl[p] if rl[p] == iters else 0
                lo = x & 0xFF
                hi = (x >> 8) & 0xFF
                a32[q] = sl[0, 0, lo] | sl[0, 1, hi]
                a32[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
                a32[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
                a32[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]
                b32[q] = 0
                b32[q + bw] = 0
                b32[q + 2 * bw] = 0
                b32[q + 3 * bw] = 0
                lo = t & 0xFF
                hi = (t >> 8) & 0xFF
                t32[q] = sl[0, 0, lo] | sl[0, 1, hi]
                t32[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
                t32[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
                t32[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]
                p += 1
    return iters


@njit(**_JIT)
def block_sub16(a, b, t1, t2, gl, sl):
    """Fused ripple-borrow subtract; see block_add16.

    The t2 residue is the complement of a taken at the top of the final
    round: blocks already settled show the complement of their final
    value, the block(s) that finished last show the complement of their
    value before the last borrow was folded in.
    """
    h, w = a.shape
    bh, bw = h // 4, w // 4
    a32 = a.ravel().view(np.uint32)
    b32 = b.ravel().view(np.uint32)
    t132 = t1.ravel().view(np.uint32)
    t232 = t2.ravel().view(np.uint32)
    xv = np.empty(bh * bw, np.int64)
    tl = np.empty(bh * bw, np.int64)
    nl = np.empty(bh * bw, np.int64)
    rl = np.empty(bh * bw, np.int64)
    iters = 0
    p = 0
    for i in range(bh):
        base = 4 * i * bw
        for j in range(bw):
            q = base + j
            Wa = (int(a32[q]) | (int(a32[q + bw]) << 1)
                  | (int(a32[q + 2 * bw]) << 2) | (int(a32[q + 3 * bw]) << 3))
            Wb = (int(b32[q]) | (int(b32[q + bw]) << 1)
                  | (int(b32[q + 2 * bw]) << 2) | (int(b32[q + 3 * bw]) << 3))
            x = (gl[0, Wa & 0xFF] | gl[1, (Wa >> 8) & 0xFF]
                 | gl[2, (Wa >> 16) & 0xFF] | gl[3, (Wa >> 24) & 0xFF])
            y = (gl[0, Wb & 0xFF] | gl[1, (Wb >> 8) & 0xFF]
                 | gl[2, (Wb >> 16) & 0xFF] | gl[3, (Wb >> 24) & 0xFF])
            r = 0
            t = 0
            n = 0
            while y:
                r += 1
                n = x ^ 0xFFFF
                t = n & y
                x ^= y
                y = (t << 1) & 0xFFFF
            xv[p] = x
            tl[p] = t
            nl[p] = n
            rl[p] = r
            if r > iters:
                iters = r
            p += 1
    if iters > 0:
        p = 0
        for i in range(bh):
            base = 4 * i * bw
            for j in range(bw):
                q = base + j
                x = xv[p]
                if rl[p] == iters:
                    t = tl[p]
                    n = nl[p]
                else:
                    t = 0
                    n = x ^ 0xFFFF
                lo = x & 0xFF
                hi = (x >> 8) & 0xFF
                a32[q] = sl[0, 0, lo] | sl[0, 1, hi]
                a32[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
                a32[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
                a32[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]
                b32[q] = 0
                b32[q + bw] = 0
                b32[q + 2 * bw] = 0
                b32[q + 3 * bw] = 0
                lo = t & 0xFF
                hi = (t >> 8) & 0xFF
                t132[q] = sl[0, 0, lo] | sl[0, 1, hi]
                t132[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
                t132[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
                t132[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]
                lo = n & 0xFF
                hi = (n >> 8) & 0xFF
                t232[q] = sl[0, 0, lo] | sl[0, 1, hi]
                t232[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
                t232[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
                t232[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]
                p += 1
    return iters


@njit(**_JIT)
def block_shift16(plane, gl, sl, n, up):
    """n single-bit block shifts collapsed into one gather/scatter pass.

    Logical shifts with zero fill, exactly what n transfer+mask rounds
    produce; intermediate plane states are not observable between them.
    """
    h, w = plane.shape
    bw = w // 4
    p32 = plane.ravel().view(np.uint32)
    for i in range(h // 4):
        base = 4 * i * bw
        for j in range(bw):
            q = base + j
            W = (int(p32[q]) | (int(p32[q + bw]) << 1)
                 | (int(p32[q + 2 * bw]) << 2) | (int(p32[q + 3 * bw]) << 3))
            u = (gl[0, W & 0xFF] | gl[1, (W >> 8) & 0xFF]
                 | gl[2, (W >> 16) & 0xFF] | gl[3, (W >> 24) & 0xFF])
            if up:
                u = (u << n) & 0xFFFF
            else:
                u >>= n
            lo = u & 0xFF
            hi = (u >> 8) & 0xFF
            p32[q] = sl[0, 0, lo] | sl[0, 1, hi]
            p32[q + bw] = sl[1, 0, lo] | sl[1, 1, hi]
            p32[q + 2 * bw] = sl[2, 0, lo] | sl[2, 1, hi]
            p32[q + 3 * bw] = sl[3, 0, lo] | sl[3, 1, hi]


@njit(**_JIT)
def global_or(a):
    h, w = a.shape
    for r in range(h):
        for c in range(w):
            if a[r, c]:
                return True
    return False


@njit(**_JIT)
def analog_add(dst, a, b, lo, hi, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            v = a[r, c] + b[r, c]
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            dst[r, c] = v


@njit(**_JIT)
def analog_sub(dst, a, b, lo, hi, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            v = a[r, c] - b[r, c]
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            dst[r, c] = v


@njit(**_JIT)
def analog_copy(dst, a, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            dst[r, c] = a[r, c]


@njit(**_JIT)
def analog_max(dst, a, b, flag, masked):
    h, w = dst.shape
    for r in range(h):
        for c in range(w):
            if masked and flag[r, c] == 0:
                continue
            x = a[r, c]
            y = b[r, c]
            dst[r, c] = x if x > y else y


@njit(**_JIT)
def warp_bilinear(dst, src, m00, m01, m02, m10, m11, m12):
    h, w = src.shape
    oh, ow = dst.shape
    for r in range(oh):
        for c in range(ow):
            sr = m00 * r + m01 * c + m02
            sc = m10 * r + m11 * c + m12
            r0 = int(np.floor(sr))
            c0 = int(np.floor(sc))
            fr = sr - r0
            fc = sc - c0
            acc = 0.0
            for dr in range(2):
                ri = r0 + dr
                if ri < 0 or ri >= h:
                    continue
                wr = fr if dr else 1.0 - fr
                for dc in range(2):
                    ci = c0 + dc
                    if ci < 0 or ci >= w:
                        continue
                    wc = fc if dc else 1.0 - fc
                    acc += wr * wc * src[ri, ci]
            dst[r, c] = acc
