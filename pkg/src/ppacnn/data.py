"""Dataset handling: IDX digit files, canvas placement and augmentation,
and the procedural car-scene generator.

The network consumes 64x64 grayscale canvases with values in [0, 255].
Digits come from the standard 28x28 IDX files, doubled in size and
centred; car scenes are synthesized: a fixed clutter mat, a parametric
car sprite at random pose, and a thresholded gradient-magnitude edge
image, labelled with the 20-bin coordinates of the car centre.
"""

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .backend import kernels

CANVAS = 64
N_BINS = 20
BIN_PX = CANVAS / N_BINS


class DataError(Exception):
    """A dataset file is missing or malformed."""


@dataclass
class TrainSample:
    """One 64x64 training canvas plus its task label.

    MNIST samples carry ``label``; car scenes carry the 40 target
    activations (x bins 0..19 then y bins 20..39) and the true bin pair.
    """

    image: np.ndarray
    label: int = -1
    target: np.ndarray = None
    bin_x: int = -1
    bin_y: int = -1


# -- IDX ingestion -------------------------------------------------------------

_IDX_MAGIC = {0x00000803: 3, 0x00000801: 1}


def load_idx(path):
    """Read one big-endian IDX array (images 0x803 or labels 0x801)."""
    path = str(path)
    try:
        opener = gzip.open if path.endswith(".gz") else open
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError("%s: %s" % (path, e)) from e
    if len(raw) < 8:
        raise DataError("%s: truncated IDX header" % path)
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = _IDX_MAGIC.get(magic)
    if ndim is None:
        raise DataError("%s: bad IDX magic 0x%08x" % (path, magic))
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError("%s: truncated IDX dimensions" % path)
    dims = struct.unpack(">%dI" % ndim, raw[4:header])
    n = int(np.prod(dims))
    body = np.frombuffer(raw, np.uint8, offset=header)
    if body.size != n:
        raise DataError("%s: expected %d data bytes, found %d"
                        % (path, n, body.size))
    return body.reshape(dims).copy()


def load_mnist(root, split="train"):
    """(images (n,28,28) uint8, labels (n,) uint8) from an MNIST directory."""
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ValueError("split must be 'train' or 'test'")

    def find(stem):
        from pathlib import Path
        for cand in (Path(root) / stem, Path(root) / (stem + ".gz")):
            if cand.exists():
                return cand
        raise DataError("%s: no %s(.gz) found" % (root, stem))

    images = load_idx(find(prefix + "-images-idx3-ubyte"))
    labels = load_idx(find(prefix + "-labels-idx1-ubyte"))
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise DataError("image file is not 28x28: shape %r" % (images.shape,))
    if labels.ndim != 1 or len(labels) != len(images):
        raise DataError("label count %d does not match %d images"
                        % (len(labels), len(images)))
    return images, labels


# -- canvas placement and augmentation --------------------------------------------

# the canonical warp doubles the digit and centres it: source coordinate
# of canvas pixel d is 13.5 + (d - 31.5) / 2 on both axes
_CANON_SCALE = 0.5
_CANON_OFF = 13.5 - 0.5 * 31.5


def place_canonical(image):
    """Double a 28x28 digit and centre it on the 64x64 canvas."""
    src = np.ascontiguousarray(image, np.float64)
    out = np.zeros((CANVAS, CANVAS), np.float64)
    kernels.warp_bilinear(out, src, _CANON_SCALE, 0.0, _CANON_OFF,
                          0.0, _CANON_SCALE, _CANON_OFF)
    return out


def augment_mnist(image, rng):
    """Randomly perturbed canonical placement of a 28x28 digit.

    Translation up to 2 source pixels, rotation uniform in +-20 degrees,
    independent per-axis rescale by +-10%, all in a single bilinear warp.
    """
    tr, tc = rng.uniform(-2.0, 2.0, 2)
    phi = rng.uniform(-20.0, 20.0) * (np.pi / 180.0)
    sr, sc = rng.uniform(0.9, 1.1, 2)
    cosp, sinp = np.cos(phi), np.sin(phi)
    # pull mapping: src = S^-1 R(-phi) (dest - centre64) + centre28 + t
    m = np.array([[cosp / (2 * sr), sinp / (2 * sr)],
                  [-sinp / (2 * sc), cosp / (2 * sc)]])
    off = np.array([13.5 + tr, 13.5 + tc]) - m @ (31.5, 31.5)
    src = np.ascontiguousarray(image, np.float64)
    out = np.zeros((CANVAS, CANVAS), np.float64)
    kernels.warp_bilinear(out, src, m[0, 0], m[0, 1], off[0],
                          m[1, 0], m[1, 1], off[1])
    return out


# -- car scenes ----------------------------------------------------------------

# sprite geometry in pixels at scale 1; the circumradius bounds how close
# to the border a car centre may fall (it must stay fully in frame)
_BODY_L, _BODY_W = 4.8, 3.0
_WHEEL_R = 0.5
_WHEELS = ((1.7, 1.5), (1.7, -1.5), (-1.7, 1.5), (-1.7, -1.5))
_SPRITE_RADIUS = float(np.hypot(_BODY_L / 2, _BODY_W / 2))  # 2.83
_SCALE_LO, _SCALE_HI = 0.9, 1.1
_MARGIN = 3.15  # > radius * 1.1, < one bin (3.2) so every bin stays reachable

_EDGE_THRESHOLD = 160.0
_MAT_SIZE = 192
_mat_cache = {}


def _play_mat():
    """The fixed clutter background, built once from a pinned seed."""
    mat = _mat_cache.get(_MAT_SIZE)
    if mat is not None:
        return mat
    r = np.random.default_rng(1861)
    base = ndimage.gaussian_filter(r.normal(0.0, 1.0, (_MAT_SIZE, _MAT_SIZE)), 6.0)
    lo, hi = base.min(), base.max()
    mat = 70.0 + 110.0 * (base - lo) / (hi - lo)
    yy, xx = np.mgrid[0:_MAT_SIZE, 0:_MAT_SIZE].astype(np.float64)
    for _ in range(6):  # roads: dark straight bands
        ang = r.uniform(0, np.pi)
        y0, x0 = r.uniform(0, _MAT_SIZE, 2)
        d = np.abs(np.cos(ang) * (xx - x0) + np.sin(ang) * (yy - y0))
        mat[d < 1.6] = 45.0
    for _ in range(8):  # bright rectangular patches
        h, w = r.integers(6, 20, 2)
        y0 = r.integers(0, _MAT_SIZE - h)
        x0 = r.integers(0, _MAT_SIZE - w)
        mat[y0:y0 + h, x0:x0 + w] = 215.0
    mat.flags.writeable = False
    _mat_cache[_MAT_SIZE] = mat
    return mat


def _paint_car(img, cy, cx, theta, s):
    lim = _SPRITE_RADIUS * s + 1.5
    r0 = max(int(cy - lim), 0)
    r1 = min(int(cy + lim) + 2, img.shape[0])
    c0 = max(int(cx - lim), 0)
    c1 = min(int(cx + lim) + 2, img.shape[1])
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / s    # along the length
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / s   # across the width
    win = img[r0:r1, c0:c1]
    win[(np.abs(u) <= _BODY_L / 2) & (np.abs(v) <= _BODY_W / 2)] = 225.0
    win[(np.abs(u + 0.4) <= 1.0) & (np.abs(v) <= 1.1)] = 140.0  # cabin
    for wu, wv in _WHEELS:
        win[(u - wu) ** 2 + (v - wv) ** 2 <= _WHEEL_R ** 2] = 15.0


def edge_image(img):
    """Thresholded gradient magnitude, values in {0, 255}."""
    gy = ndimage.sobel(img, axis=0)
    gx = ndimage.sobel(img, axis=1)
    return np.where(np.hypot(gy, gx) > _EDGE_THRESHOLD, 255.0, 0.0)


def bin_targets(i_true, n=N_BINS):
    """Per-bin activation targets, 1/(1+d) at distance d from the true bin."""
    return 1.0 / (1.0 + np.abs(np.arange(n) - i_true))


def _bin_centre(rng, b):
    lo = max(b * BIN_PX, _MARGIN)
    hi = min((b + 1) * BIN_PX, CANVAS - _MARGIN)
    return rng.uniform(lo, hi)


def gen_car_scene(rng):
    """One labelled car scene as an edge image.

    The background is a random window of the fixed mat; the car centre is
    drawn bin-stratified (a uniform bin, then a position within it) so the
    20x20 true-bin distribution is exactly uniform despite the in-frame
    margin; orientation is uniform and scale jitters by +-10%.
    """
    mat = _play_mat()
    oy, ox = rng.integers(0, _MAT_SIZE - CANVAS, 2)
    rot = rng.integers(0, 4)
    canvas = np.rot90(mat[oy:oy + CANVAS, ox:ox + CANVAS], rot).copy()
    bx = int(rng.integers(0, N_BINS))
    by = int(rng.integers(0, N_BINS))
    cx = _bin_centre(rng, bx)
    cy = _bin_centre(rng, by)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    s = rng.uniform(_SCALE_LO, _SCALE_HI)
    _paint_car(canvas, cy, cx, theta, s)
    edges = edge_image(canvas)
    ix = int(cx / CANVAS * N_BINS)
    iy = int(cy / CANVAS * N_BINS)
    target = np.concatenate([bin_targets(ix), bin_targets(iy)])
    return TrainSample(edges, target=target, bin_x=ix, bin_y=iy)
