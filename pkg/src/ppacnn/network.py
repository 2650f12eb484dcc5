"""Float training of the single-conv-layer network with stochastic
ternary weights.

The real-valued conv weights live in [-1, 1].  Every training pass draws
a ternary snapshot (per-weight, one uniform draw split into three
intervals so E[snapshot] equals the real weight), runs forward and
backward with the snapshot, and applies the gradients straight through
to the real weights.  The fully connected head trains in real values and
is only quantized at export.

The forward pass mirrors the on-array pipeline: zero-padded ternary
cross-correlation, ReLU, 4x4 max-pool, slot-major flatten, then a
bias-free linear layer.  Pooled features are scaled by 2^-scale_shift so
the head trains at the same operating point the analog store produces.
"""

import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as datasets

N_FILTERS = 16
POOL = 4
N_FEATURES = N_FILTERS * 16 * 16
TASKS = ("mnist", "car")


class ModelFormatError(Exception):
    """A model file failed to parse; message carries file:line."""


def hard_sigmoid(x):
    """clamp(x, 0, 1); the ternary sampling probability curve."""
    return np.clip(x, 0.0, 1.0)


def sample_ternary(w, rng):
    """Draw {-1, 0, +1} per weight: +1 w.p. sigma(w), -1 w.p. sigma(-w).

    Unbiased: E[result] = w for w in [-1, 1].  Accepts scalars or arrays;
    a single uniform draw per weight is split into the three intervals.
    """
    arr = np.asarray(w, np.float64)
    if arr.size and np.abs(arr).max() > 1.0 + 1e-9:
        raise ValueError("weights must lie in [-1, 1]")
    u = rng.random(arr.shape)
    p_plus = hard_sigmoid(arr)
    plus = u < p_plus
    minus = ~plus & (u < p_plus + hard_sigmoid(-arr))
    out = plus.astype(np.int8) - minus.astype(np.int8)
    if np.isscalar(w) or np.ndim(w) == 0:
        return int(out)
    return out


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 1.0  # per-epoch multiplier; 1.0 = constant lr
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    kernel_size: int = 5
    scale_shift: int = 5
    scenes: int = 8000  # car task corpus size


@dataclass
class NetworkModel:
    """Real-valued shadow weights plus training hyperparameters."""

    task: str
    conv_real: np.ndarray  # (16, K, K), clipped to [-1, 1]
    fc_real: np.ndarray    # (4096, n_out)
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def n_out(self):
        return self.fc_real.shape[1]

    @property
    def kernel_size(self):
        return self.conv_real.shape[1]

    @classmethod
    def initial(cls, task, config=None):
        config = config or TrainConfig()
        if task not in TASKS:
            raise ValueError("task must be one of %r" % (TASKS,))
        n_out = 10 if task == "mnist" else 40
        k = config.kernel_size
        rng = np.random.default_rng([config.seed, 0])
        conv = rng.uniform(-0.7, 0.7, (N_FILTERS, k, k)).astype(np.float32)
        fc = rng.normal(0.0, 1.0 / np.sqrt(N_FEATURES),
                        (N_FEATURES, n_out)).astype(np.float32)
        return cls(task, conv, fc, config)


# -- forward / backward ---------------------------------------------------------


def _im2col(images, k):
    """(B, H, W) -> (B, H*W, k*k) zero-padded sliding patches."""
    b, h, w = images.shape
    pad = k // 2
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return win.reshape(b, h * w, k * k)


def _batch_forward(conv_w, fc_w, images, scale_shift, want_cache=False):
    """Shared forward pass; images (B, 64, 64).

    Returns activations (B, n_out) and, if requested, the intermediate
    cache the backward pass needs.
    """
    # float32 in the training hot path; promotes to float64 when any input
    # is float64 so gradient checks can run at full precision
    dt = np.result_type(np.float32, conv_w, fc_w, np.asarray(images))
    images = np.asarray(images, dt)
    b = images.shape[0]
    k = conv_w.shape[-1]
    cols = _im2col(images, k)                          # (B, P, k*k)
    w2 = np.ascontiguousarray(conv_w.reshape(N_FILTERS, k * k), dt)
    conv = cols @ w2.T                                  # (B, P, 16)
    maps = conv.transpose(0, 2, 1).reshape(b, N_FILTERS, 64, 64)
    maps = np.maximum(maps, 0.0)
    win = maps.reshape(b, N_FILTERS, 16, POOL, 16, POOL)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, N_FILTERS, 16, 16, 16)
    amax = win.argmax(-1)
    pooled = np.take_along_axis(win, amax[..., None], -1)[..., 0]
    feats = pooled.reshape(b, N_FEATURES) * dt.type(2.0 ** -scale_shift)
    acts = feats @ fc_w
    if not want_cache:
        return acts, None
    return acts, (cols, maps, amax, feats)


def forward(model, snapshot, image, scale_shift=None):
    """Reference float forward pass for one image or a batch.

    ``snapshot`` is the (16, K, K) conv weight array used this pass
    (a ternary sample during training, a ternarized model at inference,
    or the real weights for shadow evaluation).  Returns the linear
    output activations; the task heads (softmax / ReLU) belong to the
    losses, not to the activations.
    """
    if scale_shift is None:
        scale_shift = model.config.scale_shift
    img = np.asarray(image)
    single = img.ndim == 2
    if single:
        img = img[None]
    acts, _ = _batch_forward(np.asarray(snapshot), model.fc_real,
                             img, scale_shift)
    return acts[0] if single else acts


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batch_gradients(model, snapshot, images, targets):
    """Loss and (conv, fc) gradients for one batch through a snapshot.

    ``targets``: int class labels (MNIST) or (B, 40) activation targets
    (car).  Gradients w.r.t. the ternary conv values pass straight
    through to the real weights.
    """
    cfg = model.config
    snapshot = np.asarray(snapshot)
    images = np.asarray(images)
    b = images.shape[0]

    acts, (cols, maps, amax, feats) = _batch_forward(
        snapshot, model.fc_real, images, cfg.scale_shift, want_cache=True)

    if model.task == "mnist":
        labels = np.asarray(targets)
        p = _softmax(acts.astype(np.float64))
        loss = float(-np.log(np.maximum(p[np.arange(b), labels], 1e-30)).mean())
        dacts = p.astype(feats.dtype)
        dacts[np.arange(b), labels] -= 1.0
        dacts /= b
    else:
        t = np.asarray(targets, feats.dtype)
        out = np.maximum(acts, 0.0)
        diff = out - t
        loss = float((diff ** 2).mean())
        dacts = (2.0 / diff.size) * diff * (acts > 0)

    d_fc = feats.T @ dacts
    d_feats = dacts @ model.fc_real.T
    d_pooled = d_feats.reshape(b, N_FILTERS, 16, 16) \
        * feats.dtype.type(2.0 ** -cfg.scale_shift)

    d_win = np.zeros((b, N_FILTERS, 16, 16, 16), feats.dtype)
    np.put_along_axis(d_win, amax[..., None], d_pooled[..., None], -1)
    d_maps = d_win.reshape(b, N_FILTERS, 16, 16, POOL, POOL) \
        .transpose(0, 1, 2, 4, 3, 5).reshape(b, N_FILTERS, 64, 64)
    d_maps *= maps > 0
    d_flat = d_maps.reshape(b, N_FILTERS, 64 * 64)
    d_conv = np.tensordot(d_flat, cols, axes=([0, 2], [0, 1]))  # (16, k*k)
    return loss, d_conv.reshape(model.conv_real.shape), d_fc


def backward_and_update(model, snapshot, images, targets, velocity,
                        lr=None, momentum=None):
    """One SGD-with-momentum step through a ternary snapshot.

    ``velocity`` is the (conv, fc) momentum state, updated in place.
    The real conv weights are clipped to [-1, 1] after the step.
    Returns the scalar batch loss.
    """
    cfg = model.config
    lr = cfg.lr if lr is None else lr
    momentum = cfg.momentum if momentum is None else momentum
    loss, d_conv, d_fc = batch_gradients(model, snapshot, images, targets)

    v_conv, v_fc = velocity
    v_conv *= momentum
    v_conv += d_conv
    v_fc *= momentum
    v_fc += d_fc
    model.conv_real -= np.asarray(lr * v_conv, model.conv_real.dtype)
    np.clip(model.conv_real, -1.0, 1.0, out=model.conv_real)
    model.fc_real -= np.asarray(lr * v_fc, model.fc_real.dtype)
    return loss


# -- training loop -----------------------------------------------------------------


def _mnist_batches(images, labels, rng, aug_rng, batch_size):
    order = rng.permutation(len(images))
    for lo in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[lo:lo + batch_size]
        batch = np.stack([datasets.augment_mnist(images[i], aug_rng)
                          for i in idx])
        yield batch, labels[idx]


def _car_batches(samples, rng, batch_size):
    order = rng.permutation(len(samples))
    for lo in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[lo:lo + batch_size]
        yield (np.stack([samples[i].image for i in idx]),
               np.stack([samples[i].target for i in idx]))


def train(task, config=None, mnist_root=None, progress=None):
    """Train a fresh model; deterministic for a fixed config seed."""
    config = config or TrainConfig()
    model = NetworkModel.initial(task, config)
    rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])

    if task == "mnist":
        if mnist_root is None:
            raise ValueError("mnist training needs a data directory")
        images, labels = datasets.load_mnist(mnist_root, "train")
    else:
        scene_rng = np.random.default_rng([config.seed, 3])
        samples = [datasets.gen_car_scene(scene_rng)
                   for _ in range(config.scenes)]

    velocity = (np.zeros_like(model.conv_real), np.zeros_like(model.fc_real))
    for epoch in range(config.epochs):
        if task == "mnist":
            batches = _mnist_batches(images, labels, rng, aug_rng,
                                     config.batch_size)
        else:
            batches = _car_batches(samples, rng, config.batch_size)
        total, count = 0.0, 0
        # cancel the 2^-scale_shift feature factor and put intensities on
        # [0,1]: pooled features then sit at O(1), where the default lr and
        # momentum behave.  The bias-free linear head makes raw-intensity
        # evaluation a pure rescale of the activations, so this is invisible
        # to argmax decisions.
        gain = np.float32(2.0 ** config.scale_shift / 255.0)
        for batch_images, batch_targets in batches:
            snapshot = sample_ternary(model.conv_real, rng)
            total += backward_and_update(model, snapshot,
                                         batch_images * gain,
                                         batch_targets, velocity)
            count += 1
        if progress is not None:
            progress(epoch, total / max(count, 1))
    return model


def evaluate_float(model, images64, labels):
    """Shadow-network accuracy: real conv weights, canonical images."""
    correct = 0
    for lo in range(0, len(images64), 256):
        acts = forward(model, model.conv_real, images64[lo:lo + 256])
        correct += int((acts.argmax(axis=1) == labels[lo:lo + 256]).sum())
    return correct / len(images64)


# -- model file IO -----------------------------------------------------------------


def model_digest(model):
    import hashlib
    h = hashlib.sha256()
    h.update(model.task.encode())
    h.update(np.ascontiguousarray(model.conv_real, np.float32).tobytes())
    h.update(np.ascontiguousarray(model.fc_real, np.float32).tobytes())
    return h.hexdigest()


def _fmt_reals(row):
    return " ".join("%.9g" % float(v) for v in row)


def atomic_write_text(path, text):
    """Write via a temp file and rename; no partial files on failure."""
    path = str(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    """Write the real-weight model: header, conv reals, fc reals.

    Reals are printed at 9 significant digits, which round-trips float32
    exactly, so save -> load -> save is byte-identical.
    """
    lines = ["TWNET 1 %s" % model.task]
    n, k = model.conv_real.shape[0], model.kernel_size
    lines.append("conv %d %d" % (n, k))
    for f in range(n):
        lines.append(_fmt_reals(model.conv_real[f].reshape(-1)))
    lines.append("fc %d %d" % model.fc_real.shape)
    for row in model.fc_real:
        lines.append(_fmt_reals(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        self.path = str(path)
        try:
            with open(self.path) as fh:
                self.lines = fh.read().splitlines()
        except OSError as e:
            raise ModelFormatError("%s: %s" % (path, e)) from e
        self.pos = 0

    def next(self, what):
        while self.pos < len(self.lines):
            line = self.lines[self.pos]
            self.pos += 1
            if line.strip():
                return line
        raise ModelFormatError("%s:%d: missing %s"
                               % (self.path, self.pos + 1, what))

    def fail(self, msg):
        raise ModelFormatError("%s:%d: %s" % (self.path, self.pos, msg))

    def reals(self, count, what, dtype=np.float32):
        toks = self.next(what).split()
        if len(toks) != count:
            self.fail("expected %d values for %s, got %d"
                      % (count, what, len(toks)))
        try:
            return np.array([float(t) for t in toks], dtype)
        except ValueError:
            self.fail("non-numeric value in %s" % what)

    def ints(self, count, what):
        toks = self.next(what).split()
        if len(toks) != count:
            self.fail("expected %d values for %s, got %d"
                      % (count, what, len(toks)))
        try:
            return np.array([int(t) for t in toks], np.int64)
        except ValueError:
            self.fail("non-integer value in %s" % what)


def load_model(path):
    """Parse a real-weight model file; errors carry file:line."""
    r = _LineReader(path)
    head = r.next("header").split()
    if len(head) != 3 or head[0] != "TWNET" or head[1] != "1":
        r.fail("expected header 'TWNET 1 <task>'")
    task = head[2]
    if task not in TASKS:
        r.fail("unknown task %r" % task)
    conv_head = r.next("conv section").split()
    if len(conv_head) != 3 or conv_head[0] != "conv":
        r.fail("expected 'conv <n> <k>'")
    try:
        n, k = int(conv_head[1]), int(conv_head[2])
    except ValueError:
        r.fail("bad conv dimensions")
    if n != N_FILTERS or k % 2 == 0 or k < 1:
        r.fail("unsupported conv geometry %dx%dx%d" % (n, k, k))
    conv = np.stack([r.reals(k * k, "conv kernel %d" % f).reshape(k, k)
                     for f in range(n)])
    if np.abs(conv).max() > 1.0:
        r.fail("conv weights outside [-1, 1]")
    fc_head = r.next("fc section").split()
    if len(fc_head) != 3 or fc_head[0] != "fc":
        r.fail("expected 'fc <in> <out>'")
    try:
        n_in, n_out = int(fc_head[1]), int(fc_head[2])
    except ValueError:
        r.fail("bad fc dimensions")
    if n_in != N_FEATURES or n_out not in (10, 40):
        r.fail("unsupported fc geometry %dx%d" % (n_in, n_out))
    if (task == "mnist") != (n_out == 10):
        r.fail("fc width %d does not fit task %s" % (n_out, task))
    fc = np.stack([r.reals(n_out, "fc row %d" % i) for i in range(n_in)])
    cfg = replace(TrainConfig(), kernel_size=k)
    return NetworkModel(task, conv, fc, cfg)
