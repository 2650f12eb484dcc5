"""Ternary convolution and feature-map storage on the PE array.

A convolution with weights in {-1, 0, +1} needs no multiplies: the source
image (in 4x4-block 16-bit format) is shifted block-by-block across the
array and, at each displacement, added into a positive or a negative
accumulator or skipped, so the instruction count scales with the number of
nonzero weights.  The 16 resulting feature maps are rectified, scaled and
parked in one analog plane as a checkerboard (one map per (row, col) phase
modulo 4), pooled in parallel, and read out sparsely at the window anchors.

Displacement-to-weight mapping (frozen; the trainer uses the same one):
shifting the traversal copy ds blocks south and de blocks east and adding
it applies kernel weight [c0 - ds][c0 - de], c0 = K // 2, so the result
decodes to out[r, c] = sum_{u,v} w[u, v] * img[r + u - c0, c + v - c0]
with zero padding at the borders.
"""

from functools import lru_cache

import numpy as np

from . import block16
from .core import PlaneBudgetError, SimulationError


@lru_cache(maxsize=32)
def _phase_pattern(shape, pr, pc):
    # frozen so ArrayState can memoize its validation across frames
    pattern = np.zeros(shape, np.uint8)
    pattern[pr::4, pc::4] = 1
    pattern.flags.writeable = False
    return pattern


class TernaryKernel:
    """A K x K convolution kernel with weights restricted to {-1, 0, +1}."""

    def __init__(self, weights):
        w = np.asarray(weights)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("kernel must be square, got shape %r" % (w.shape,))
        if w.shape[0] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if not np.isin(w, (-1, 0, 1)).all():
            raise ValueError("kernel weights must be -1, 0 or +1")
        self.weights = w.astype(np.int8)
        self.weights.flags.writeable = False

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def nnz(self):
        return int(np.count_nonzero(self.weights))


class CheckerboardStore:
    """One analog plane holding 16 quarter-resolution maps, phase-interleaved.

    Slot k owns the pixels {(4i + k // 4, 4j + k % 4)}; the 16 slots are
    disjoint and cover the plane.  ``scale_shift`` is the number of bits
    dropped when a 16-bit block value is converted into the slot's analog
    pixel.
    """

    def __init__(self, plane, scale_shift=5):
        if not (0 <= scale_shift <= 15):
            raise ValueError("scale_shift must be in 0..15")
        self.plane = plane
        self.scale_shift = int(scale_shift)
        self.occupied = set()

    @staticmethod
    def phase(slot):
        if not 0 <= slot <= 15:
            raise ValueError("slot must be in 0..15")
        return slot // 4, slot % 4

    def reset(self):
        self.occupied.clear()


def convolve(state, img, kernel, acc_pos, acc_neg):
    """Cross-correlate ``img`` with a ternary kernel; result in ``acc_pos``.

    ``img`` is left intact.  Both accumulators are cleared first, every
    nonzero weight costs exactly one block add, and the block-shift walk
    over all K^2 displacements always runs in full so the shifting
    overhead is a fixed cost.  Each kernel row restarts from the pristine
    source (one vertical shift, then one eastward and one westward leg),
    which keeps data that a border would have clipped available to later
    displacements.  Returns ``acc_pos``; ``acc_neg`` is clobbered.
    """
    if not (img.layout.order == acc_pos.layout.order == acc_neg.layout.order):
        raise SimulationError("image and accumulator layouts differ")
    if len({img.plane, acc_pos.plane, acc_neg.plane}) != 3:
        raise PlaneBudgetError("img/acc_pos/acc_neg must be distinct planes")
    k = kernel.size
    c0 = k // 2
    if 4 * c0 >= min(state.height, state.width):
        raise SimulationError("kernel too large for the array")
    w = kernel.weights

    scratch = []
    try:
        for _ in range(5):
            scratch.append(state.alloc_digital())
        row_base, trav, addend, t1, t2 = scratch
        addend_img = block16.Block16Image(addend, img.layout)

        state.clear(acc_pos.plane)
        state.clear(acc_neg.plane)

        def station(ds, de):
            weight = w[c0 - ds, c0 - de]
            if weight:
                state.copy(addend, trav)
                acc = acc_pos if weight > 0 else acc_neg
                block16.block_add(state, acc, addend_img, t1, t2)

        for ds in range(-c0, c0 + 1):
            if ds == 0:
                state.copy(row_base, img.plane)
            else:
                state.shift_plane(row_base, img.plane,
                                  "south" if ds > 0 else "north", 4 * abs(ds))
            # east leg: displacements 0 .. c0
            state.copy(trav, row_base)
            station(ds, 0)
            for de in range(1, c0 + 1):
                state.shift_plane(trav, trav, "east", 4)
                station(ds, de)
            # west leg: displacements -1 .. -c0, from a fresh copy
            state.copy(trav, row_base)
            for de in range(-1, -c0 - 1, -1):
                state.shift_plane(trav, trav, "west", 4)
                station(ds, de)
        block16.block_sub(state, acc_pos, acc_neg, t1, t2)
    finally:
        for name in scratch:
            state.free_digital(name)
    return acc_pos


def relu_store(state, img, store, slot):
    """Rectify ``img`` on-array and park it in checkerboard ``slot``.

    Negative blocks are zeroed through the broadcast sign bit, the value
    is shifted down ``store.scale_shift`` bits, and the result is written
    into the slot's phase pixels of the analog plane, saturating to the
    analog range.  ``img`` is consumed (rectified and shifted in place).
    """
    if slot in store.occupied:
        raise SimulationError("checkerboard slot %d already holds a map" % slot)
    pr, pc = CheckerboardStore.phase(slot)

    scratch = []
    try:
        sign = state.alloc_digital()
        scratch.append(sign)
        scratch.append(state.alloc_digital())
        block16.sign_mask(state, img, sign, scratch[1])
        state.where_flag(sign)
        state.clear(img.plane)
        state.all_pe()
    finally:
        for name in scratch:
            state.free_digital(name)
    block16.bitshift_down_run(state, img, store.scale_shift)

    vals = block16.decode(state, img)  # non-negative after the rectify
    full = np.zeros(state.shape, np.float64)
    full[pr::4, pc::4] = vals
    state.where_flag(_phase_pattern(state.shape, pr, pc))
    state.dac_write(store.plane, full)
    state.all_pe()
    store.occupied.add(slot)


def checkerboard_maxpool(state, store, pool=4, scratch="a1"):
    """Max-pool all 16 stored maps at once with ``pool`` x ``pool`` windows.

    Log-reduction: shift the whole plane by 4 and 8 PEs (1 and 2 logical
    pixels, phase-preserving, so slots never mix) and take the running
    elementwise max, first across columns then across rows.  Afterwards the
    window maximum of every slot sits at the window's minimum-coordinate
    phase pixel.
    """
    if pool != 4:
        raise SimulationError("only 4x4 pooling windows are supported")
    if scratch == store.plane:
        raise PlaneBudgetError("maxpool scratch must differ from the store")
    for direction in ("west", "north"):
        for step in (4, 8):
            state.shift_plane(scratch, store.plane, direction, step)
            state.analog_max(store.plane, store.plane, scratch)


def anchor_coords(store, shape, slot, pool=4):
    """(row, col) anchors of every pooled window of one slot, row-major."""
    h, w = shape
    pr, pc = CheckerboardStore.phase(slot)
    span = 4 * pool
    return [(r + pr, c + pc)
            for r in range(0, h, span) for c in range(0, w, span)]


def readout_pooled(state, store, pool=4):
    """Sparse-read all pooled anchors; returns maps shaped (16, h', w').

    Map k is slot k's pooled feature map in row-major order; flattening
    the result gives the slot-major layout the classifier head expects.
    """
    h, w = state.shape
    n = h // (4 * pool)
    m = w // (4 * pool)
    coords = []
    for slot in range(16):
        coords.extend(anchor_coords(store, state.shape, slot, pool))
    vals = state.sparse_read(store.plane, coords)
    return np.asarray(vals, np.float64).reshape(16, n, m)
