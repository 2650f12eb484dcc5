"""Register-level simulator of a pixel-processor array.

The simulated chip is a 2-D grid of processing elements (PEs).  Every PE
owns 13 one-bit digital registers (``d0`` .. ``d12``), 7 analog registers
(``a0`` .. ``a6``, signed reals saturating to a configurable range), four
dedicated direction registers (``R_NORTH``/``R_SOUTH``/``R_EAST``/``R_WEST``)
steering neighbour transfers, and an activity flag (``FLAG``).  An
:class:`ArrayState` holds one such grid; its methods are the SIMD
instruction set, each applied to all PEs at once.

Instructions where the flag is engaged leave the destination of inactive
PEs (flag = 0) untouched.  Every public instruction bumps the
:class:`CostCounter`; composite instructions (``and_``, ``or_``, ``xor``,
``analog_max``) charge their native expansion so the counter stays a
faithful proxy for execution time on the real device.
"""

import numpy as np

from .backend import kernels


class SimulationError(Exception):
    """Base class for simulator contract violations."""


class UnknownPlaneError(SimulationError):
    """A register name does not exist or has the wrong domain."""


class DirectionConflictError(SimulationError):
    """Some PE has more than one direction register set during a transfer."""


class PlaneBudgetError(SimulationError):
    """No free digital register is left (or scratch planes collide)."""


class CoordinateError(SimulationError):
    """A readout coordinate lies outside the array."""


# one counter event per native instruction; composites charge their
# NOR/NOT expansion (and=3, or=2, xor=4) and analog max a compare+copy
_EXPANSION = {"and": 3, "or": 2, "xor": 4, "analog_max": 2}


class CostCounter:
    """Per-kind native-instruction counts; ``total`` is their plain sum."""

    __slots__ = ("counts",)

    def __init__(self):
        self.counts = {}

    def add(self, kind, n=1):
        self.counts[kind] = self.counts.get(kind, 0) + n

    @property
    def total(self):
        return sum(self.counts.values())

    def snapshot(self):
        return dict(self.counts)

    def diff(self, older):
        """Per-kind change since an earlier :meth:`snapshot` (zeros omitted)."""
        keys = set(self.counts) | set(older)
        out = {}
        for k in keys:
            d = self.counts.get(k, 0) - older.get(k, 0)
            if d:
                out[k] = d
        return out

    def reset(self):
        self.counts.clear()

    def as_csv(self):
        lines = ["kind,count"]
        for kind in sorted(self.counts):
            lines.append("%s,%d" % (kind, self.counts[kind]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.as_csv())

    def __repr__(self):
        return "CostCounter(total=%d, kinds=%d)" % (self.total, len(self.counts))


class DirectionSet:
    """Immutable, pre-validated contents for the four direction registers.

    Loading direction patterns is on the critical path of every bit-shift,
    so the at-most-one-direction-per-PE check runs once here instead of on
    every transfer.  The arrays are frozen; reuse one instance freely.

    Patterns that tile a 4x4 block exactly (every pattern in this package
    does) are detected at construction and compiled to a 16-cell code so
    transfers can dispatch to a cheaper kernel.
    """

    __slots__ = ("north", "south", "east", "west", "periodic_code")

    def __init__(self, north=None, south=None, east=None, west=None, shape=None):
        planes = []
        for p in (north, south, east, west):
            if p is None:
                if shape is None:
                    raise ValueError("shape required when a direction is omitted")
                arr = np.zeros(shape, np.uint8)
            else:
                arr = np.ascontiguousarray(p, np.uint8)
            planes.append(arr)
        shapes = {p.shape for p in planes}
        if len(shapes) != 1:
            raise ValueError("direction planes disagree on shape: %r" % shapes)
        bad = kernels.check_directions(*planes)
        if bad:
            raise DirectionConflictError(
                "%d PEs have more than one direction register set" % bad
            )
        for p in planes:
            p.flags.writeable = False
        self.north, self.south, self.east, self.west = planes
        self.periodic_code = self._compile_periodic()

    def _compile_periodic(self):
        h, w = self.north.shape
        if h % 4 or w % 4:
            return None
        code = np.zeros((4, 4), np.int8)
        for k, p in enumerate((self.north, self.south, self.east, self.west), 1):
            tile = p[:4, :4]
            if not np.array_equal(p, np.tile(tile, (h // 4, w // 4))):
                return None
            code += k * tile.astype(np.int8)
        code.flags.writeable = False
        return code

    @property
    def shape(self):
        return self.north.shape


def _as_bits(values, shape):
    arr = np.asarray(values)
    if arr.shape != shape:
        raise SimulationError("plane shape %r, expected %r" % (arr.shape, shape))
    out = np.ascontiguousarray(arr, np.uint8)
    if out.max(initial=0) > 1:
        raise SimulationError("digital plane values must be 0 or 1")
    return out


_SHIFT_DIRS = ("north", "south", "east", "west")


class ArrayState:
    """One simulated PE array: registers plus the instruction set.

    Operations are strictly sequential; SIMD is semantic, not concurrent.
    Distinct instances share nothing and may run in parallel contexts.

    Register names: ``d0``..``d12`` digital, ``a0``..``a6`` analog,
    ``R_NORTH``/``R_SOUTH``/``R_EAST``/``R_WEST``, ``FLAG``.  The optional
    noise hook perturbs analog add/sub/copy results with zero-mean Gaussian
    noise of the given sigma; it defaults to off so runs are deterministic.
    """

    N_DIGITAL = 13
    N_ANALOG = 7

    def __init__(self, height=256, width=256, *, a_min=-128.0, a_max=127.0,
                 noise_sigma=0.0, rng=None):
        if height <= 0 or width <= 0 or height % 4 or width % 4:
            raise SimulationError(
                "array dimensions must be positive multiples of 4, got %dx%d"
                % (height, width)
            )
        self.height = height
        self.width = width
        self.shape = (height, width)
        self.a_min = float(a_min)
        self.a_max = float(a_max)
        self.noise_sigma = float(noise_sigma)
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self.cost = CostCounter()

        self._digital = {"d%d" % i: np.zeros(self.shape, np.uint8)
                         for i in range(self.N_DIGITAL)}
        self._analog = {"a%d" % i: np.zeros(self.shape, np.float64)
                        for i in range(self.N_ANALOG)}
        self._dirs = {name: np.zeros(self.shape, np.uint8)
                      for name in ("R_NORTH", "R_SOUTH", "R_EAST", "R_WEST")}
        self._flag = np.ones(self.shape, np.uint8)
        self._masked = False
        self._dirs_valid = True
        self._dir_code = None
        # frozen, already-validated broadcast masks, pinned so ids stay unique
        self._trusted_patterns = {}

        # free-list allocator so algorithms can audit the 13-plane budget
        self._free = ["d%d" % i for i in range(self.N_DIGITAL)]
        self._allocated = set()

        # simulator-internal buffers (alias handling, shifts); not registers
        self._sbuf = np.zeros(self.shape, np.uint8)
        self._abuf = np.zeros(self.shape, np.float64)

    # -- plane lookup -----------------------------------------------------

    def _bit(self, name):
        p = self._digital.get(name)
        if p is None:
            p = self._dirs.get(name)
            if p is None:
                if name == "FLAG":
                    return self._flag
                raise UnknownPlaneError("no digital plane named %r" % name)
        return p

    def _ana(self, name):
        p = self._analog.get(name)
        if p is None:
            raise UnknownPlaneError("no analog plane named %r" % name)
        return p

    def is_analog(self, name):
        return name in self._analog

    @property
    def flag_engaged(self):
        """True while a where_flag() restriction is in effect."""
        return self._masked

    def _pattern(self, pattern):
        # validation of broadcast patterns is memoized for frozen arrays,
        # since block-format shifts reuse the same cached masks constantly
        if (isinstance(pattern, np.ndarray) and not pattern.flags.writeable
                and id(pattern) in self._trusted_patterns):
            return pattern
        arr = _as_bits(pattern, self.shape)
        if isinstance(pattern, np.ndarray) and not pattern.flags.writeable \
                and arr is pattern:
            self._trusted_patterns[id(pattern)] = pattern
        return arr

    # -- digital plane allocator ------------------------------------------

    def alloc_digital(self):
        if not self._free:
            raise PlaneBudgetError("all %d digital planes are allocated"
                                   % self.N_DIGITAL)
        name = self._free.pop(0)
        self._allocated.add(name)
        return name

    def free_digital(self, name):
        if name not in self._allocated:
            raise PlaneBudgetError("plane %r is not currently allocated" % name)
        self._allocated.discard(name)
        self._free.append(name)

    # -- flag engagement ----------------------------------------------------

    def where_flag(self, src):
        """Restrict subsequent instructions to PEs where ``src`` is 1.

        ``src`` is a digital register name or a controller-broadcast {0,1}
        pattern of the array shape.  The flag register takes a snapshot.
        """
        if isinstance(src, str):
            pat = self._bit(src)
        else:
            pat = self._pattern(src)
        np.copyto(self._flag, pat)
        self._masked = True
        self.cost.add("flag")

    def all_pe(self):
        """Re-activate every PE."""
        self._flag.fill(1)
        self._masked = False
        self.cost.add("flag")

    # -- digital logic ------------------------------------------------------

    def nor(self, dst, a, b):
        kernels.nor(self._bit(dst), self._bit(a), self._bit(b),
                    self._flag, self._masked)
        self.cost.add("nor")

    def not_(self, dst, a):
        kernels.not_(self._bit(dst), self._bit(a), self._flag, self._masked)
        self.cost.add("not")

    def and_(self, dst, a, b):
        kernels.and_(self._bit(dst), self._bit(a), self._bit(b),
                     self._flag, self._masked)
        self.cost.add("and", _EXPANSION["and"])

    def or_(self, dst, a, b):
        kernels.or_(self._bit(dst), self._bit(a), self._bit(b),
                    self._flag, self._masked)
        self.cost.add("or", _EXPANSION["or"])

    def xor(self, dst, a, b):
        kernels.xor(self._bit(dst), self._bit(a), self._bit(b),
                    self._flag, self._masked)
        self.cost.add("xor", _EXPANSION["xor"])

    def copy(self, dst, a):
        kernels.copy(self._bit(dst), self._bit(a), self._flag, self._masked)
        self.cost.add("copy")

    def clear(self, dst):
        kernels.fill(self._bit(dst), 0, self._flag, self._masked)
        self.cost.add("clear")

    def set_(self, dst):
        kernels.fill(self._bit(dst), 1, self._flag, self._masked)
        self.cost.add("set")

    def mask(self, dst, pattern):
        """Clear the cells of ``dst`` selected by the broadcast ``pattern``."""
        kernels.mask_clear(self._bit(dst), self._pattern(pattern),
                           self._flag, self._masked)
        self.cost.add("mask")

    # -- neighbour transfers --------------------------------------------------

    def load_directions(self, dirs):
        """Load all four direction registers from a :class:`DirectionSet`."""
        if dirs.shape != self.shape:
            raise SimulationError("direction set shape %r, expected %r"
                                  % (dirs.shape, self.shape))
        self._dirs["R_NORTH"] = dirs.north
        self._dirs["R_SOUTH"] = dirs.south
        self._dirs["R_EAST"] = dirs.east
        self._dirs["R_WEST"] = dirs.west
        self._dirs_valid = True
        self._dir_code = dirs.periodic_code
        self.cost.add("dir_load")

    def transfer(self, dst, src):
        """Each PE with a direction bit sends ``src`` to that neighbour.

        Receivers OR the incoming bits; PEs receiving nothing get 0; bits
        pushed over the border vanish and borders shift in 0.  The write is
        flag-conditional.
        """
        if not self._dirs_valid:
            bad = kernels.check_directions(
                self._dirs["R_NORTH"], self._dirs["R_SOUTH"],
                self._dirs["R_EAST"], self._dirs["R_WEST"])
            if bad:
                raise DirectionConflictError(
                    "%d PEs have more than one direction register set" % bad)
            self._dirs_valid = True
        s = self._bit(src)
        d = self._bit(dst)
        if d is s:
            np.copyto(self._sbuf, s)  # registers latch before the move
            s = self._sbuf
        if self._dir_code is not None:
            kernels.transfer_periodic(d, s, self._dir_code,
                                      self._flag, self._masked)
        else:
            kernels.transfer(d, s,
                             self._dirs["R_NORTH"], self._dirs["R_SOUTH"],
                             self._dirs["R_EAST"], self._dirs["R_WEST"],
                             self._flag, self._masked)
        self.cost.add("transfer")

    def shift_plane(self, dst, src, direction, distance):
        """Uniform whole-plane shift, zero-filled at the borders.

        Works on digital or analog planes (both names must share the
        domain).  Costs ``distance`` transfers plus one direction load; the
        simulator moves the data in one step, which is exactly the
        composition of ``distance`` single-PE transfers with a uniform
        direction pattern.  Direction register contents are unaffected.
        """
        direction = direction.lower()
        if direction not in _SHIFT_DIRS:
            raise SimulationError("unknown direction %r" % direction)
        distance = int(distance)
        if distance < 1:
            raise SimulationError("shift distance must be >= 1")
        if self.is_analog(src) or self.is_analog(dst):
            s, d, buf = self._ana(src), self._ana(dst), self._abuf
        else:
            s, d, buf = self._bit(src), self._bit(dst), self._sbuf
        buf.fill(0)
        k = distance
        if direction == "north":
            if k < self.height:
                buf[:-k, :] = s[k:, :]
        elif direction == "south":
            if k < self.height:
                buf[k:, :] = s[:-k, :]
        elif direction == "east":
            if k < self.width:
                buf[:, k:] = s[:, :-k]
        else:
            if k < self.width:
                buf[:, :-k] = s[:, k:]
        if self._masked:
            np.copyto(d, buf, where=self._flag.astype(bool))
        else:
            np.copyto(d, buf)
        self.cost.add("dir_load")
        self.cost.add("transfer", distance)

    # -- global readout -------------------------------------------------------

    def global_or(self, a):
        """True iff any bit of ``a`` is set (chip-wide wired-OR readout)."""
        self.cost.add("readout")
        return bool(kernels.global_or(self._bit(a)))

    def sparse_read(self, a, coords):
        """Read analog values at ``coords`` (row, col), in order."""
        plane = self._ana(a)
        out = []
        for r, c in coords:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise CoordinateError("coordinate (%d, %d) outside %dx%d array"
                                      % (r, c, self.height, self.width))
            out.append(float(plane[r, c]))
        self.cost.add("sparse_read")
        self.cost.add("readout", len(out))
        return out

    # -- analog arithmetic ------------------------------------------------------

    def _noise(self, dst):
        if self.noise_sigma > 0.0:
            d = self._ana(dst)
            n = self._rng.normal(0.0, self.noise_sigma, self.shape)
            if self._masked:
                n *= self._flag
            np.clip(d + n, self.a_min, self.a_max, out=d)

    def analog_add(self, dst, a, b):
        kernels.analog_add(self._ana(dst), self._ana(a), self._ana(b),
                           self.a_min, self.a_max, self._flag, self._masked)
        self.cost.add("analog_add")
        self._noise(dst)

    def analog_sub(self, dst, a, b):
        kernels.analog_sub(self._ana(dst), self._ana(a), self._ana(b),
                           self.a_min, self.a_max, self._flag, self._masked)
        self.cost.add("analog_sub")
        self._noise(dst)

    def analog_copy(self, dst, a):
        kernels.analog_copy(self._ana(dst), self._ana(a),
                            self._flag, self._masked)
        self.cost.add("analog_copy")
        self._noise(dst)

    def analog_max(self, dst, a, b):
        # compare + conditional copy on the device, hence 2 instructions
        kernels.analog_max(self._ana(dst), self._ana(a), self._ana(b),
                           self._flag, self._masked)
        self.cost.add("analog_max", _EXPANSION["analog_max"])

    # -- controller-side plane IO ------------------------------------------------

    def load_plane(self, name, values):
        """Controller write of a full plane (digital {0,1} or analog reals)."""
        if name in self._analog:
            arr = np.asarray(values, np.float64)
            if arr.shape != self.shape:
                raise SimulationError("plane shape %r, expected %r"
                                      % (arr.shape, self.shape))
            np.clip(arr, self.a_min, self.a_max, out=self._analog[name])
        elif name in self._dirs:
            self._dirs[name] = _as_bits(values, self.shape).copy()
            self._dirs_valid = False
            self._dir_code = None
        elif name == "FLAG":
            np.copyto(self._flag, _as_bits(values, self.shape))
            self._masked = True
        else:
            p = self._digital.get(name)
            if p is None:
                raise UnknownPlaneError("no plane named %r" % name)
            np.copyto(p, _as_bits(values, self.shape))
        self.cost.add("load")

    def read_plane(self, name):
        """Controller read of a full plane; returns a copy."""
        self.cost.add("readout")
        if name in self._analog:
            return self._analog[name].copy()
        return self._bit(name).copy()

    def dac_write(self, dst, values):
        """Digital-to-analog conversion write, flag-conditional, saturating.

        Models the on-array D->A path as one native conversion instruction:
        the controller supplies the converted plane and active PEs latch it
        into the analog register ``dst``.
        """
        arr = np.asarray(values, np.float64)
        if arr.shape != self.shape:
            raise SimulationError("plane shape %r, expected %r"
                                  % (arr.shape, self.shape))
        d = self._ana(dst)
        clipped = np.clip(arr, self.a_min, self.a_max)
        if self._masked:
            np.copyto(d, clipped, where=self._flag.astype(bool))
        else:
            np.copyto(d, clipped)
        self.cost.add("dac_write")

    # -- diagnostics ----------------------------------------------------------

    def dump_pgm(self, name, path):
        """Dump a plane as binary PGM: bits as 0/255, analog mapped affinely."""
        if name in self._analog:
            v = self.read_plane(name)
            span = self.a_max - self.a_min
            img = np.clip(np.rint((v - self.a_min) / span * 255.0), 0, 255)
            write_pgm(path, img.astype(np.uint8))
        else:
            write_pgm(path, self.read_plane(name) * np.uint8(255))


# -- PGM interchange (binary, 8-bit) ---------------------------------------------


def write_pgm(path, image):
    """Write a 2-D uint8 array as a binary (P5) PGM file."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("PGM values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pgm(path):
    """Read a binary (P5) 8-bit PGM file into a 2-D uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("%s: not a binary PGM (P5) file" % path)
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments running to end of line
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("%s: truncated PGM header" % path)
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise ValueError("%s: malformed PGM header" % path)
    if maxval <= 0 or maxval > 255:
        raise ValueError("%s: only 8-bit PGM supported (maxval %d)" % (path, maxval))
    n = width * height
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise ValueError("%s: PGM raster truncated (%d of %d bytes)"
                         % (path, len(raster), n))
    return np.frombuffer(raster, np.uint8).reshape(height, width).copy()
