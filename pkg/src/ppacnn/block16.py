"""4x4-block 16-bit image format on the PE array.

A full-resolution bit plane is reinterpreted as a quarter-resolution image
of 16-bit two's-complement integers: each 4x4 block of PEs stores one
value, its bits laid out along a "snake", a Hamiltonian path through the
block chosen so that consecutive significance bits sit in 4-adjacent PEs.
One neighbour transfer with the right direction patterns then bit-shifts
every block in the plane at once, and a ripple-carry loop built from
AND/XOR/shift adds whole planes of integers in parallel.

All functions here are stateless over a borrowed :class:`~.core.ArrayState`.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .backend import kernels
from .core import DirectionSet, PlaneBudgetError, SimulationError

# default snake: down column 0, up column 1, down column 2, up column 3;
# index 0 = LSB at (0,0), index 15 = MSB at (0,3)
SNAKE_ORDER = (
    (0, 0), (1, 0), (2, 0), (3, 0),
    (3, 1), (2, 1), (1, 1), (0, 1),
    (0, 2), (1, 2), (2, 2), (3, 2),
    (3, 3), (2, 3), (1, 3), (0, 3),
)

_DIR_OF_STEP = {(-1, 0): "north", (1, 0): "south", (0, 1): "east", (0, -1): "west"}


@dataclass(frozen=True)
class SnakeLayout:
    """Bit ordering of a 4x4 block, LSB first.

    ``order`` must be a Hamiltonian path over the 16 cells (consecutive
    indices 4-adjacent), and each end of the path must have a neighbouring
    cell, one block over, at the opposite end's local position, so the
    carry out of a bit-shift lands somewhere the post-shift mask clears.
    """

    order: tuple = SNAKE_ORDER

    def __post_init__(self):
        cells = tuple((int(r), int(c)) for r, c in self.order)
        object.__setattr__(self, "order", cells)
        if sorted(cells) != [(r, c) for r in range(4) for c in range(4)]:
            raise ValueError("order must be a permutation of the 4x4 cells")
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            if abs(r0 - r1) + abs(c0 - c1) != 1:
                raise ValueError(
                    "cells (%d,%d) and (%d,%d) are consecutive in "
                    "significance but not 4-adjacent" % (r0, c0, r1, c1))
        # both shift directions must exist or the layout is unusable
        _exit_direction(cells[-1], cells[0])
        _exit_direction(cells[0], cells[-1])


def _exit_direction(from_cell, to_local):
    """Direction whose step from ``from_cell`` lands on a cell whose
    block-local position is ``to_local`` (in this or an adjacent block)."""
    r, c = from_cell
    for (dr, dc), name in _DIR_OF_STEP.items():
        if ((r + dr) % 4, (c + dc) % 4) == to_local:
            return name
    raise ValueError(
        "no neighbour of cell (%d,%d) sits at local position (%d,%d); "
        "the shifted-out bit could not be masked" % (r, c, *to_local))


@lru_cache(maxsize=8)
def _tiles(order, shape):
    """Per-shape direction sets and clear masks for one snake layout.

    Returns (up_dirs, up_clear, down_dirs, down_clear).  up moves every
    bit one step toward the MSB; the MSB's outgoing bit lands on an
    (adjacent block's) LSB cell, which up_clear then zeroes, realising the
    discard-carry / shift-in-zero semantics.  down is the mirror image.
    """
    h, w = shape
    idx_of = {cell: k for k, cell in enumerate(order)}

    def build(step_to):  # step_to[k] = direction for the cell of index k
        planes = {d: np.zeros((4, 4), np.uint8) for d in _DIR_OF_STEP.values()}
        for k, cell in enumerate(order):
            planes[step_to[k]][cell] = 1
        tiled = {d: np.tile(p, (h // 4, w // 4)) for d, p in planes.items()}
        return DirectionSet(north=tiled["north"], south=tiled["south"],
                            east=tiled["east"], west=tiled["west"])

    up_steps, down_steps = {}, {}
    for k, cell in enumerate(order):
        up_steps[k] = (_DIR_OF_STEP[(order[k + 1][0] - cell[0],
                                     order[k + 1][1] - cell[1])]
                       if k < 15 else _exit_direction(cell, order[0]))
        down_steps[k] = (_DIR_OF_STEP[(order[k - 1][0] - cell[0],
                                       order[k - 1][1] - cell[1])]
                         if k > 0 else _exit_direction(cell, order[15]))

    def clear_mask(cell):
        m = np.zeros((4, 4), np.uint8)
        m[cell] = 1
        tiled = np.tile(m, (h // 4, w // 4))
        tiled.flags.writeable = False  # stable id, so validation memoizes
        return tiled

    return (build(up_steps), clear_mask(order[0]),
            build(down_steps), clear_mask(order[15]))


@lru_cache(maxsize=8)
def _keep_cell_mask(cell, shape):
    """Clear-mask over every block cell except ``cell`` (frozen array)."""
    m = np.ones((4, 4), np.uint8)
    m[cell] = 0
    tiled = np.tile(m, (shape[0] // 4, shape[1] // 4))
    tiled.flags.writeable = False
    return tiled


@dataclass
class Block16Image:
    """A bit plane interpreted as a 16-bit block image."""

    plane: str
    layout: SnakeLayout = field(default_factory=SnakeLayout)


def encode(state, img, values):
    """Load a (h/4, w/4) int16 grid into ``img``'s plane, one block each."""
    vals = np.asarray(values)
    bh, bw = state.height // 4, state.width // 4
    if vals.shape != (bh, bw):
        raise SimulationError("value grid shape %r, expected (%d, %d)"
                              % (vals.shape, bh, bw))
    if vals.min() < -32768 or vals.max() > 32767:
        raise ValueError("values outside the 16-bit two's-complement range")
    u = vals.astype(np.int64)  # two's complement bit patterns
    bits = np.zeros(state.shape, np.uint8)
    _, sl = _order_tables(img.layout.order)
    kernels.scatter16(bits, sl, u & 0xFFFF)
    state.load_plane(img.plane, bits)


def decode(state, img):
    """Read ``img``'s plane back into a (h/4, w/4) int16 grid."""
    bits = state.read_plane(img.plane)
    gl, _ = _order_tables(img.layout.order)
    u = kernels.gather16(bits, gl)
    return u.astype(np.uint16).view(np.int16)


def _shift_up_into(state, layout, dst, src):
    # one dir-load + one transfer + one mask, the whole point of the snake
    up_dirs, up_clear, _, _ = _tiles(layout.order, state.shape)
    state.load_directions(up_dirs)
    state.transfer(dst, src)
    state.mask(dst, up_clear)


def bitshift_up(state, img):
    """Double every block value (mod 2^16); zero enters at the LSB."""
    _shift_up_into(state, img.layout, img.plane, img.plane)


def bitshift_down(state, img):
    """Halve every block's 16-bit pattern; zero enters at the MSB.

    This is a logical (unsigned) right shift of the stored pattern, which
    is floor division by 2 for non-negative values; the LSB is discarded.
    """
    _, _, down_dirs, down_clear = _tiles(img.layout.order, state.shape)
    state.load_directions(down_dirs)
    state.transfer(img.plane, img.plane)
    state.mask(img.plane, down_clear)


def bitshift_down_run(state, img, n, fused=True):
    """n bitshift_downs; one backend kernel pass when nothing observes
    the intermediate planes (i.e. unless a flag restriction is engaged)."""
    if n <= 0:
        return
    if fused and not state.flag_engaged:
        gl, sl = _order_tables(img.layout.order)
        kernels.block_shift16(state._bit(img.plane), gl, sl, n, False)
        _, _, down_dirs, _ = _tiles(img.layout.order, state.shape)
        state.load_directions(down_dirs)
        state.cost.add("dir_load", n - 1)
        state.cost.add("transfer", n)
        state.cost.add("mask", n)
        return
    for _ in range(n):
        bitshift_down(state, img)


def _check_planes(state, a, b, t1, t2):
    if a.layout.order != b.layout.order:
        raise SimulationError("operand layouts differ")
    names = (a.plane, b.plane, t1, t2)
    if len(set(names)) != len(names):
        raise PlaneBudgetError("need 4 distinct planes, got %r" % (names,))


@lru_cache(maxsize=8)
def _order_tables(order):
    """Byte lookup tables the backend block kernels run on.

    gl[lc][byte]: a block column's four cells (packed one per byte bit)
    mapped to their significance bits under this layout.  sl[lr][half][byte]:
    a half of a 16-bit value mapped to block row lr's uint32 word, one
    {0,1} byte per column.
    """
    sig = {cell: k for k, cell in enumerate(order)}
    gl = np.zeros((4, 256), np.int64)
    for lc in range(4):
        for byte in range(256):
            v = 0
            for lr in range(4):
                if (byte >> lr) & 1:
                    v |= 1 << sig[(lr, lc)]
            gl[lc, byte] = v
    sl = np.zeros((4, 2, 256), np.uint32)
    for lr in range(4):
        for half in range(2):
            for byte in range(256):
                v = 0
                for bit in range(8):
                    if (byte >> bit) & 1:
                        r, c = order[half * 8 + bit]
                        if r == lr:
                            v |= 1 << (8 * c)
                sl[lr, half, byte] = v
    gl.flags.writeable = False
    sl.flags.writeable = False
    return gl, sl


def _charge_rounds(state, layout, iters, per_round):
    """Book the cost of ``iters`` carry rounds run by a fused kernel.

    The fused kernels compute the same plane states the instruction loop
    would, so the instruction tally is reconstructed here: the loop-head
    readout fires iters + 1 times, and each round issues the ops in
    ``per_round`` plus one dir-load / transfer / mask for the bit shift.
    """
    state.cost.add("readout", iters + 1)
    if iters == 0:
        return
    for kind, n in per_round.items():
        state.cost.add(kind, n * iters)
    up_dirs, _, _, _ = _tiles(layout.order, state.shape)
    state.load_directions(up_dirs)  # latches the up pattern, 1 dir_load
    state.cost.add("dir_load", iters - 1)
    state.cost.add("transfer", iters)
    state.cost.add("mask", iters)


def block_add(state, a, b, t1, t2, fused=True):
    """a <- (a + b) mod 2^16 per block; b is clobbered (carry plane).

    Ripple-carry loop: carry = AND(a, b); a = XOR(a, b); b = carry shifted
    up one bit; repeat until the global OR of b reports no carry left.
    Needs the two scratch planes ``t1``/``t2`` (``t2`` is only touched by
    the subtract variant but both are reserved so the two ops have the
    same plane budget).

    With ``fused`` (the default, off while a flag restriction is engaged)
    the rounds run inside one backend kernel instead of op by op; planes
    and cost come out identical.
    """
    _check_planes(state, a, b, t1, t2)
    if fused and not state.flag_engaged:
        gl, sl = _order_tables(a.layout.order)
        iters = kernels.block_add16(state._bit(a.plane), state._bit(b.plane),
                                    state._bit(t1), gl, sl)
        _charge_rounds(state, a.layout, iters, {"and": 3, "xor": 4})
        return
    rounds = 0
    while state.global_or(b.plane):
        rounds += 1
        if rounds > 16:
            raise SimulationError("carry chain failed to clear in 16 rounds")
        state.and_(t1, a.plane, b.plane)
        state.xor(a.plane, a.plane, b.plane)
        _shift_up_into(state, a.layout, b.plane, t1)


def block_sub(state, a, b, t1, t2, fused=True):
    """a <- (a - b) mod 2^16 per block; b is clobbered (borrow plane)."""
    _check_planes(state, a, b, t1, t2)
    if fused and not state.flag_engaged:
        gl, sl = _order_tables(a.layout.order)
        iters = kernels.block_sub16(state._bit(a.plane), state._bit(b.plane),
                                    state._bit(t1), state._bit(t2), gl, sl)
        _charge_rounds(state, a.layout, iters, {"not": 1, "and": 3, "xor": 4})
        return
    rounds = 0
    while state.global_or(b.plane):
        rounds += 1
        if rounds > 16:
            raise SimulationError("borrow chain failed to clear in 16 rounds")
        state.not_(t2, a.plane)
        state.and_(t1, t2, b.plane)
        state.xor(a.plane, a.plane, b.plane)
        _shift_up_into(state, a.layout, b.plane, t1)


def sign_mask(state, img, dst, scratch):
    """Fill ``dst`` with 1 across every block whose value is negative.

    Isolates the MSB cell of each block and broadcasts it to the block's
    other 15 cells with three west and three south shift/OR rounds (the
    MSB sits at the block's north-east corner in the default layout; the
    general case broadcasts away from the MSB corner).
    """
    if len({img.plane, dst, scratch}) != 3:
        raise PlaneBudgetError("sign_mask needs 3 distinct planes")
    h, w = state.shape
    mr, mc = img.layout.order[15]
    if mr not in (0, 3) or mc not in (0, 3):
        raise SimulationError(
            "sign broadcast needs the MSB at a block corner, not (%d,%d)"
            % (mr, mc))
    state.copy(dst, img.plane)
    state.mask(dst, _keep_cell_mask((mr, mc), state.shape))
    # spread column-wise then row-wise; shifts move away from the MSB
    # corner so nothing leaks into neighbouring blocks mid-broadcast
    col_dir = "west" if mc == 3 else "east"
    row_dir = "south" if mr == 0 else "north"
    for _ in range(3):
        state.shift_plane(scratch, dst, col_dir, 1)
        state.or_(dst, dst, scratch)
    for _ in range(3):
        state.shift_plane(scratch, dst, row_dir, 1)
        state.or_(dst, dst, scratch)
    return dst
