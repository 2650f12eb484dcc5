"""Trainer tests: ternary sampling, gradients, the training loop, model IO,
augmentation, and agreement between the float forward pass and the on-array
pipeline."""

import numpy as np
import pytest

import oracles
from ppacnn import data as datasets
from ppacnn import network as nw
from ppacnn import (
    ArrayState,
    Block16Image,
    CheckerboardStore,
    TernaryKernel,
    checkerboard_maxpool,
    convolve,
    encode,
    readout_pooled,
    relu_store,
)

RNG = np.random.default_rng(515)


# -- ternary sampling ---------------------------------------------------------------


def test_hard_sigmoid_examples():
    assert nw.hard_sigmoid(0.5) == 0.5
    assert nw.hard_sigmoid(2.0) == 1.0
    assert nw.hard_sigmoid(-1.0) == 0.0
    assert np.array_equal(nw.hard_sigmoid(np.array([-3.0, 0.25, 9.0])),
                          [0.0, 0.25, 1.0])


def test_sample_ternary_deterministic_extremes():
    rng = np.random.default_rng(1)
    assert all(nw.sample_ternary(1.0, rng) == 1 for _ in range(50))
    assert all(nw.sample_ternary(-1.0, rng) == -1 for _ in range(50))
    assert all(nw.sample_ternary(0.0, rng) == 0 for _ in range(50))


def test_sample_ternary_frequencies_at_0p3():
    n = 100_000
    draws = nw.sample_ternary(np.full(n, 0.3), np.random.default_rng(7))
    f_plus = (draws == 1).mean()
    f_zero = (draws == 0).mean()
    sigma = np.sqrt(0.3 * 0.7 / n)
    assert abs(f_plus - 0.3) < 3 * sigma
    assert abs(f_zero - 0.7) < 3 * sigma
    assert not (draws == -1).any()  # sigma(-0.3) clamps to zero


def test_sample_ternary_unbiased():
    n = 100_000
    rng = np.random.default_rng(11)
    for w in (-1.0, -0.5, 0.0, 0.3, 0.8, 1.0):
        draws = nw.sample_ternary(np.full(n, w), rng)
        var = abs(w) - w * w  # E[T^2] - w^2 with sigma(|w|) = |w|
        tol = 3 * np.sqrt(var / n) + 1e-12
        assert abs(draws.mean() - w) <= tol, w


def test_sample_ternary_rejects_out_of_range():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        nw.sample_ternary(1.5, rng)
    with pytest.raises(ValueError):
        nw.sample_ternary(np.array([0.0, -1.01]), rng)


def test_sample_ternary_scalar_returns_int():
    v = nw.sample_ternary(0.5, np.random.default_rng(3))
    assert isinstance(v, int) and v in (-1, 0, 1)


# -- gradients -----------------------------------------------------------------------


def _fd_setup(task, seed=3):
    cfg = nw.TrainConfig(seed=seed)
    model = nw.NetworkModel.initial(task, cfg)
    model.conv_real = model.conv_real.astype(np.float64)
    model.fc_real = model.fc_real.astype(np.float64)
    rng = np.random.default_rng(seed + 100)
    snap = nw.sample_ternary(model.conv_real, rng).astype(np.float64)
    # continuous intensities keep pooling argmaxes tie-free, so central
    # differences see the same linear piece the analytic gradient lives on
    images = rng.uniform(0.0, 1.0, size=(2, 64, 64))
    if task == "mnist":
        targets = rng.integers(0, 10, size=2)
    else:
        targets = rng.uniform(0.0, 1.0, size=(2, 40))
    return model, snap, images, targets


@pytest.mark.parametrize("task", ["mnist", "car"])
def test_fc_gradient_matches_central_differences(task):
    model, snap, images, targets = _fd_setup(task)
    _, _, d_fc = nw.batch_gradients(model, snap, images, targets)
    rng = np.random.default_rng(20)
    h = 1e-5
    worst = 0.0
    for i, j in zip(rng.integers(0, nw.N_FEATURES, 25),
                    rng.integers(0, model.n_out, 25)):
        saved = model.fc_real[i, j]
        model.fc_real[i, j] = saved + h
        lp, *_ = nw.batch_gradients(model, snap, images, targets)
        model.fc_real[i, j] = saved - h
        lm, *_ = nw.batch_gradients(model, snap, images, targets)
        model.fc_real[i, j] = saved
        g = (lp - lm) / (2 * h)
        a = d_fc[i, j]
        worst = max(worst, abs(g - a) / max(abs(g), abs(a), 1e-9))
    assert worst < 1e-4, worst


def test_conv_gradient_matches_central_differences():
    model, snap, images, targets = _fd_setup("mnist")
    _, d_conv, _ = nw.batch_gradients(model, snap, images, targets)
    rng = np.random.default_rng(21)
    h = 1e-5
    rels = []
    for f, r, c in zip(rng.integers(0, 16, 40), rng.integers(0, 5, 40),
                       rng.integers(0, 5, 40)):
        a = d_conv[f, r, c]
        if abs(a) < 1e-7:
            continue
        saved = snap[f, r, c]
        snap[f, r, c] = saved + h
        lp, *_ = nw.batch_gradients(model, snap, images, targets)
        snap[f, r, c] = saved - h
        lm, *_ = nw.batch_gradients(model, snap, images, targets)
        snap[f, r, c] = saved
        g = (lp - lm) / (2 * h)
        rels.append(abs(g - a) / max(abs(g), abs(a)))
    rels = np.sort(rels)
    # a stray near-tie in some pooling window can put one coordinate on a
    # kink; the bulk of the coordinates must match tightly
    assert np.median(rels) < 1e-6
    assert rels[int(0.9 * len(rels))] < 1e-4


def test_zero_lr_step_leaves_weights_unchanged():
    model, snap, images, targets = _fd_setup("mnist")
    conv0, fc0 = model.conv_real.copy(), model.fc_real.copy()
    vel = (np.zeros_like(conv0), np.zeros_like(fc0))
    loss = nw.backward_and_update(model, snap, images, targets, vel, lr=0.0)
    assert loss > 0
    assert np.array_equal(model.conv_real, conv0)
    assert np.array_equal(model.fc_real, fc0)
    assert np.abs(vel[1]).max() > 0  # velocity still accumulates


def _toy_batch(rng):
    """Ten linearly separable classes: a bright block per class position."""
    images = np.zeros((10, 64, 64), np.float32)
    for c in range(10):
        r, col = divmod(c, 4)
        images[c, 8 + 14 * r: 16 + 14 * r, 8 + 14 * col: 16 + 14 * col] = 1.0
    images += rng.uniform(0.0, 0.05, images.shape).astype(np.float32)
    return images, np.arange(10)


def test_loss_decreases_over_training_steps():
    improvements = []
    for seed in range(10):
        cfg = nw.TrainConfig(seed=seed)
        model = nw.NetworkModel.initial("mnist", cfg)
        rng = np.random.default_rng([seed, 77])
        images, labels = _toy_batch(rng)
        vel = (np.zeros_like(model.conv_real), np.zeros_like(model.fc_real))
        losses = []
        for _ in range(100):
            snap = nw.sample_ternary(model.conv_real, rng)
            losses.append(nw.backward_and_update(model, snap, images,
                                                 labels, vel))
        improvements.append(np.mean(losses[:10]) - np.mean(losses[-10:]))
        assert np.abs(model.conv_real).max() <= 1.0  # clip invariant
    assert np.median(improvements) > 0


def test_car_loss_is_relu_mse():
    model, snap, images, targets = _fd_setup("car")
    loss, _, _ = nw.batch_gradients(model, snap, images, targets)
    acts = nw.forward(model, snap, images)
    expect = np.mean((np.maximum(acts, 0.0) - targets) ** 2)
    assert loss == pytest.approx(expect, rel=1e-9)


def test_mnist_loss_is_softmax_cross_entropy():
    model, snap, images, targets = _fd_setup("mnist")
    loss, _, _ = nw.batch_gradients(model, snap, images, targets)
    acts = nw.forward(model, snap, images)
    p = oracles.softmax(acts)
    expect = -np.log(p[np.arange(2), targets]).mean()
    assert loss == pytest.approx(expect, rel=1e-6)


# -- forward pass --------------------------------------------------------------------


def test_forward_matches_reference_network():
    cfg = nw.TrainConfig(seed=8)
    model = nw.NetworkModel.initial("mnist", cfg)
    rng = np.random.default_rng(40)
    snap = nw.sample_ternary(model.conv_real, rng)
    img = rng.integers(0, 256, (64, 64)).astype(np.float64)
    acts = nw.forward(model, snap, img, scale_shift=0)
    expect, _ = oracles.forward_reference(img, snap, model.fc_real)
    assert np.allclose(acts, expect, rtol=1e-6, atol=1e-6)


def test_forward_scale_shift_rescales_linearly():
    cfg = nw.TrainConfig(seed=8)
    model = nw.NetworkModel.initial("mnist", cfg)
    rng = np.random.default_rng(41)
    snap = nw.sample_ternary(model.conv_real, rng)
    img = rng.integers(0, 256, (64, 64)).astype(np.float64)
    a0 = nw.forward(model, snap, img, scale_shift=0)
    a5 = nw.forward(model, snap, img, scale_shift=5)
    assert np.allclose(a5, a0 / 32.0, rtol=1e-6, atol=1e-9)


def test_forward_zero_image_gives_zero_activations():
    model = nw.NetworkModel.initial("mnist", nw.TrainConfig(seed=1))
    acts = nw.forward(model, model.conv_real, np.zeros((64, 64)))
    assert np.array_equal(acts, np.zeros(10))


def test_forward_batch_matches_singles():
    model = nw.NetworkModel.initial("car", nw.TrainConfig(seed=2))
    rng = np.random.default_rng(42)
    imgs = rng.integers(0, 2, (3, 64, 64)).astype(np.float32) * 255
    batch = nw.forward(model, model.conv_real, imgs)
    assert batch.shape == (3, 40)
    for i in range(3):
        one = nw.forward(model, model.conv_real, imgs[i])
        # single-image and batched matmuls sum in different orders
        assert np.allclose(batch[i], one, rtol=1e-4, atol=1e-3)


def test_forward_agrees_with_array_pipeline():
    """Integer inputs, shift 0, no saturation: the float forward pass and
    the full on-array pipeline must agree exactly."""
    rng = np.random.default_rng(90)
    cfg = nw.TrainConfig(seed=9, scale_shift=0)
    model = nw.NetworkModel.initial("mnist", cfg)
    snap = nw.sample_ternary(model.conv_real, rng)
    # |conv| <= 5 * 25 = 125 keeps every value inside the analog range
    grid = rng.integers(0, 6, (64, 64)).astype(np.int64)

    state = ArrayState(256, 256)
    img = Block16Image(state.alloc_digital())
    pos = Block16Image(state.alloc_digital())
    neg = Block16Image(state.alloc_digital())
    store = CheckerboardStore("a0", scale_shift=0)
    for slot in range(16):
        encode(state, img, grid)
        convolve(state, img, TernaryKernel(snap[slot]), pos, neg)
        relu_store(state, pos, store, slot)
    checkerboard_maxpool(state, store)
    flat_array = readout_pooled(state, store).reshape(-1)

    acts_float = nw.forward(model, snap, grid.astype(np.float64))
    expect, flat_ref = oracles.forward_reference(grid, snap, model.fc_real)
    assert np.array_equal(flat_array, flat_ref)
    assert np.allclose(acts_float, expect, rtol=1e-6, atol=1e-6)


# -- training loop -------------------------------------------------------------------


def test_train_is_deterministic_for_fixed_seed():
    cfg = nw.TrainConfig(seed=11, epochs=1, batch_size=8, scenes=40)
    m1 = nw.train("car", cfg)
    m2 = nw.train("car", cfg)
    assert np.array_equal(m1.conv_real, m2.conv_real)
    assert np.array_equal(m1.fc_real, m2.fc_real)


def test_train_seed_changes_model():
    base = nw.TrainConfig(seed=11, epochs=1, batch_size=8, scenes=40)
    other = nw.TrainConfig(seed=12, epochs=1, batch_size=8, scenes=40)
    m1 = nw.train("car", base)
    m2 = nw.train("car", other)
    assert not np.array_equal(m1.conv_real, m2.conv_real)


def test_train_requires_mnist_root():
    with pytest.raises(ValueError):
        nw.train("mnist", nw.TrainConfig(epochs=1))


def test_default_hyperparameters():
    cfg = nw.TrainConfig()
    assert cfg.lr == 0.01
    assert cfg.momentum == 0.9
    assert cfg.batch_size == 32
    assert cfg.epochs == 10


def test_initial_model_shapes_and_ranges():
    m = nw.NetworkModel.initial("car", nw.TrainConfig(seed=5, kernel_size=3))
    assert m.conv_real.shape == (16, 3, 3)
    assert m.fc_real.shape == (4096, 40)
    assert m.n_out == 40 and m.kernel_size == 3
    assert np.abs(m.conv_real).max() <= 1.0
    with pytest.raises(ValueError):
        nw.NetworkModel.initial("pedestrian")


# -- model files ---------------------------------------------------------------------


def test_save_load_round_trip_is_exact(tmp_path):
    model = nw.NetworkModel.initial("mnist", nw.TrainConfig(seed=6))
    p = tmp_path / "m.twnet"
    nw.save_model(model, p)
    loaded = nw.load_model(p)
    assert loaded.task == "mnist"
    assert np.array_equal(loaded.conv_real, model.conv_real)
    assert np.array_equal(loaded.fc_real, model.fc_real)
    p2 = tmp_path / "m2.twnet"
    nw.save_model(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))  # atomic write leaves no temps


def test_model_digest_tracks_weights():
    m1 = nw.NetworkModel.initial("mnist", nw.TrainConfig(seed=6))
    m2 = nw.NetworkModel.initial("mnist", nw.TrainConfig(seed=6))
    assert nw.model_digest(m1) == nw.model_digest(m2)
    m2.fc_real[0, 0] += 0.25
    assert nw.model_digest(m1) != nw.model_digest(m2)


def _write(tmp_path, text, name="bad.twnet"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_rejects_bad_header_with_line_number(tmp_path):
    p = _write(tmp_path, "TWNET 2 mnist\n")
    with pytest.raises(nw.ModelFormatError, match=r":1:"):
        nw.load_model(p)


def test_load_rejects_unknown_task(tmp_path):
    p = _write(tmp_path, "TWNET 1 pedestrian\n")
    with pytest.raises(nw.ModelFormatError, match="pedestrian"):
        nw.load_model(p)


def test_load_rejects_short_kernel_line(tmp_path):
    lines = ["TWNET 1 mnist", "conv 16 3", "0 0 0 0 0 0 0 0"]
    p = _write(tmp_path, "\n".join(lines) + "\n")
    with pytest.raises(nw.ModelFormatError, match=r":3:.*expected 9"):
        nw.load_model(p)


def test_load_rejects_non_numeric(tmp_path):
    lines = ["TWNET 1 mnist", "conv 16 3", "0 0 0 0 x 0 0 0 0"]
    p = _write(tmp_path, "\n".join(lines) + "\n")
    with pytest.raises(nw.ModelFormatError, match=r":3:.*non-numeric"):
        nw.load_model(p)


def test_load_rejects_conv_weight_out_of_range(tmp_path):
    k = " ".join(["0"] * 8 + ["1.5"])
    lines = ["TWNET 1 mnist", "conv 16 3"] + [k] * 16
    p = _write(tmp_path, "\n".join(lines) + "\n")
    with pytest.raises(nw.ModelFormatError, match=r"outside \[-1, 1\]"):
        nw.load_model(p)


def test_load_rejects_fc_width_task_mismatch(tmp_path):
    k = " ".join(["0"] * 9)
    lines = ["TWNET 1 mnist", "conv 16 3"] + [k] * 16 + ["fc 4096 40"]
    p = _write(tmp_path, "\n".join(lines) + "\n")
    with pytest.raises(nw.ModelFormatError, match="does not fit task"):
        nw.load_model(p)


def test_load_rejects_empty_file(tmp_path):
    p = _write(tmp_path, "")
    with pytest.raises(nw.ModelFormatError, match="missing header"):
        nw.load_model(p)


def test_load_tolerates_blank_lines(tmp_path):
    model = nw.NetworkModel.initial("mnist", nw.TrainConfig(seed=6))
    p = tmp_path / "m.twnet"
    nw.save_model(model, p)
    spaced = p.read_text().replace("\nfc", "\n\n\nfc")
    p2 = _write(tmp_path, spaced, "spaced.twnet")
    loaded = nw.load_model(p2)
    assert np.array_equal(loaded.fc_real, model.fc_real)


# -- augmentation and scenes ---------------------------------------------------------


class _MidpointRng:
    """Stand-in rng whose every uniform draw is the interval midpoint."""

    def uniform(self, lo, hi, size=None):
        mid = (lo + hi) / 2.0
        if size is None:
            return mid
        return np.full(size, mid)


def test_augment_identity_draw_is_canonical_placement():
    img = (RNG.random((28, 28)) * 255).astype(np.float64)
    out = datasets.augment_mnist(img, _MidpointRng())
    assert np.array_equal(out, datasets.place_canonical(img))


def test_augment_preserves_mean_intensity():
    r, c = np.mgrid[0:28, 0:28]
    img = 255.0 * np.exp(-(((r - 13.5) ** 2 + (c - 13.5) ** 2) / 40.0))
    base = datasets.place_canonical(img).mean()
    rng = np.random.default_rng(123)
    means = [datasets.augment_mnist(img, rng).mean() for _ in range(1000)]
    assert abs(np.mean(means) - base) / base < 0.15


def test_augment_varies_between_draws():
    img = (RNG.random((28, 28)) * 255).astype(np.float64)
    rng = np.random.default_rng(9)
    a = datasets.augment_mnist(img, rng)
    b = datasets.augment_mnist(img, rng)
    assert not np.array_equal(a, b)


def test_place_canonical_geometry():
    img = np.zeros((28, 28))
    img[0, 0] = 200.0
    img[27, 27] = 200.0
    out = datasets.place_canonical(img)
    assert out.shape == (64, 64)
    nz = np.argwhere(out > 0)
    assert nz.min() >= 3 and nz.max() <= 60  # 2x letterbox, 4 px margins
    total = datasets.place_canonical(np.full((28, 28), 100.0)).sum()
    assert total == pytest.approx(4 * 28 * 28 * 100.0, rel=0.05)


def test_car_scene_bins_are_uniform():
    rng = np.random.default_rng(4242)
    counts_x = np.zeros(20, int)
    counts_y = np.zeros(20, int)
    n = 10_000
    for _ in range(n):
        s = datasets.gen_car_scene(rng)
        counts_x[s.bin_x] += 1
        counts_y[s.bin_y] += 1
    e = n / 20.0
    chi2_x = ((counts_x - e) ** 2 / e).sum()
    chi2_y = ((counts_y - e) ** 2 / e).sum()
    crit = 36.191  # chi-square df=19 at the 1% level
    assert chi2_x < crit and chi2_y < crit


def test_car_scene_shapes_and_targets():
    rng = np.random.default_rng(5)
    s = datasets.gen_car_scene(rng)
    assert s.image.shape == (64, 64)
    assert set(np.unique(s.image)) <= {0, 255}
    assert s.target.shape == (40,)
    assert s.target[s.bin_x] == 1.0
    assert s.target[20 + s.bin_y] == 1.0
    assert s.target.argmax() == s.bin_x or s.target[s.bin_x] == s.target.max()


def test_bin_targets_decay():
    t = datasets.bin_targets(7)
    assert t.shape == (20,)
    assert t[7] == 1.0
    assert t[6] == t[8] == 0.5
    assert t[0] == pytest.approx(1.0 / 8.0)
    assert np.all(np.diff(t[:8]) > 0) and np.all(np.diff(t[7:]) < 0)
