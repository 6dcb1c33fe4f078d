import math

import numpy as np
import pytest

from retinaseg.attention import grid_entropy
from retinaseg.errors import ConfigError, DataError, NumericError
from retinaseg.grid import GridPmf, build_grid, encode_targets
from retinaseg.predictor import (PredictorConfig, TrainingSample,
                                 baseline_classify, format_arch, init_state,
                                 load_checkpoint, loss, loss_gradient,
                                 make_center_samples, make_grid_samples,
                                 oracle_predictor, parse_arch, predict,
                                 predict_probs, sample_patch_positions,
                                 save_checkpoint, train, training_loss)

from conftest import constant_labels, one_hot_pmf, vsplit_labels

TINY = PredictorConfig(subarea=16, level=1, classes=2, channels=3,
                       conv_stages=((4, 1), (6, 1)), dense=(12,),
                       dtype="float64", seed=3)


def tiny_samples(rng, n=4, config=TINY):
    d, k, nc = config.subarea, config.classes, config.n_cells
    out = []
    for _ in range(n):
        patch = rng.random((d, d, config.channels))
        pmfs = rng.random((nc, k)) + 1e-9
        pmfs /= pmfs.sum(axis=1, keepdims=True)
        masked = np.zeros(nc, dtype=bool)
        masked[0] = True
        pmfs[0] = 1.0 / k
        out.append(TrainingSample(patch, GridPmf(pmfs, masked)))
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_zero_weights_predict_uniform(rng):
    state = init_state(TINY)
    state.weights[:] = 0.0
    pmf = predict(state, TINY, rng.random((16, 16, 3)))
    np.testing.assert_allclose(pmf.pmfs, 0.5, atol=1e-12)
    assert not pmf.masked.any()


def test_softmax_rows_sum_to_one(rng):
    cfg = PredictorConfig(subarea=16, level=2, classes=3,
                          conv_stages=((4, 1),), dense=(8,), dtype="float32",
                          seed=11)
    state = init_state(cfg)
    state.weights = (rng.standard_normal(state.weights.size) * 2.0).astype(
        np.float32)
    for _ in range(50):
        probs = predict_probs(state, cfg, rng.random((16, 16, 3)))
        np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-6)
        assert (probs >= 0).all()


def test_predict_rejects_bad_shape(rng):
    state = init_state(TINY)
    with pytest.raises(DataError):
        predict(state, TINY, rng.random((8, 8, 3)))


def test_nonfinite_weights_name_the_layer(rng):
    state = init_state(TINY)
    state.weights[:] = np.nan
    with pytest.raises(NumericError, match="conv3x3"):
        predict(state, TINY, rng.random((16, 16, 3)))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_zero_on_exact_one_hot():
    target = one_hot_pmf(16, 3, cls=2)
    pred = one_hot_pmf(16, 3, cls=2)
    assert loss(pred, target) == 0.0


def test_loss_uniform_prediction_closed_form():
    n = 16
    target = one_hot_pmf(n, 3, cls=0)
    pred = GridPmf(np.full((n, 3), 1 / 3), np.zeros(n, dtype=bool))
    assert abs(loss(pred, target) - n * math.log(3)) <= 1e-9


def test_loss_masked_cells_contribute_nothing(rng):
    n = 16
    target = one_hot_pmf(n, 3, cls=0)
    target.masked[:8] = True
    pred_a = GridPmf(rng.random((n, 3)), np.zeros(n, dtype=bool))
    pred_b = GridPmf(pred_a.pmfs.copy(), np.zeros(n, dtype=bool))
    pred_b.pmfs[:8] = rng.random((8, 3))  # garbage under the mask
    assert loss(pred_a, target) == loss(pred_b, target)


def test_loss_bounded_by_clip():
    n = 16
    target = one_hot_pmf(n, 3, cls=0)
    worst = one_hot_pmf(n, 3, cls=1)  # confident and wrong everywhere
    val = loss(worst, target)
    assert 0.0 <= val <= -n * math.log(1e-7) + 1e-6
    assert abs(val - n * -math.log(1e-7)) <= 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(DataError):
        loss(one_hot_pmf(16, 3, 0), one_hot_pmf(28, 3, 0))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_matches_finite_differences(rng):
    state = init_state(TINY)
    batch = tiny_samples(rng, n=2)
    grad = loss_gradient(state, TINY, batch)
    assert grad.shape == state.weights.shape
    h = 1e-4
    coords = rng.choice(state.weights.size, 50, replace=False)
    for i in coords:
        wp = state.weights.copy()
        wp[i] += h
        wm = state.weights.copy()
        wm[i] -= h
        fd = (training_loss(wp, TINY, batch)
              - training_loss(wm, TINY, batch)) / (2 * h)
        rel = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8)
        assert rel <= 1e-4, f"coordinate {i}: analytic {grad[i]} vs fd {fd}"


def test_gradient_is_additive_over_samples(rng):
    state = init_state(TINY)
    s1, s2 = tiny_samples(rng, n=2)
    g_both = loss_gradient(state, TINY, [s1, s2])
    g_sum = loss_gradient(state, TINY, [s1]) + loss_gradient(state, TINY, [s2])
    np.testing.assert_allclose(g_both, g_sum, rtol=1e-9, atol=1e-12)


def test_gradient_zero_at_saturated_exact_fit(rng):
    cfg = TINY
    state = init_state(cfg)
    state.weights[:] = 0.0
    net = cfg.network()
    head = net.slices[-1]
    bias = np.zeros(cfg.head_dim)
    # large enough that exp(-logit gap) underflows to exactly 0.0
    bias.reshape(cfg.n_cells, cfg.classes)[:, 0] = 800.0
    state.weights[head.stop - cfg.head_dim:head.stop] = bias
    patch = rng.random((16, 16, 3))
    probs = predict_probs(state, cfg, patch)
    np.testing.assert_array_equal(probs[0, :, 0], 1.0)
    target = one_hot_pmf(cfg.n_cells, cfg.classes, cls=0)
    g = loss_gradient(state, cfg, [TrainingSample(patch, target)])
    assert np.all(g == 0.0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_training_is_deterministic(rng):
    batch = tiny_samples(rng, n=10)
    cfg = PredictorConfig(subarea=16, level=1, classes=2, channels=3,
                          conv_stages=((4, 1),), dense=(8,), dtype="float32",
                          seed=5, epochs=3, batch_size=4)
    s1 = train(cfg, batch)
    s2 = train(cfg, batch)
    assert s1.weights.tobytes() == s2.weights.tobytes()


def test_training_memorizes_small_set(rng, tmp_path):
    # 10 patches whose brightness determines the (one-hot) target class
    batch = []
    for i in range(10):
        level = 0.15 if i % 2 == 0 else 0.85
        patch = level + 0.05 * rng.standard_normal((16, 16, 3))
        batch.append(TrainingSample(np.clip(patch, 0, 1),
                                    one_hot_pmf(16, 2, cls=i % 2)))
    cfg = PredictorConfig(subarea=16, level=1, classes=2, channels=3,
                          conv_stages=((4, 1), (8, 1)), dense=(16,),
                          dtype="float32", seed=5, epochs=40, batch_size=5,
                          learning_rate=0.003)
    log = tmp_path / "train.log"
    before = training_loss(init_state(cfg).weights, cfg, batch)
    state = train(cfg, batch, log_path=log)
    after = training_loss(state.weights, cfg, batch)
    assert after <= 0.5 * before
    lines = [l for l in log.read_text().splitlines() if l.startswith("epoch=")]
    assert len(lines) == cfg.epochs
    assert "mean_loss=" in lines[0] and "wall_time=" in lines[0]


def test_training_aborts_on_divergence(rng):
    batch = tiny_samples(rng, n=4)
    batch[0].patch = np.full_like(batch[0].patch, np.nan)
    cfg = PredictorConfig(subarea=16, level=1, classes=2, channels=3,
                          conv_stages=((4, 1),), dense=(8,), dtype="float32",
                          seed=5, epochs=2, batch_size=8)
    state = train(cfg, batch)
    assert state.diverged
    np.testing.assert_array_equal(state.weights,
                                  init_state(cfg).weights)  # last finite


def test_train_empty_dataset_rejected():
    with pytest.raises(DataError):
        train(TINY, [])


def test_trained_model_nails_pure_class_patches(rng):
    # synthetic micro-set: patch brightness identifies the class; after
    # training, every cell of a pure-class patch must argmax to that class
    cfg = PredictorConfig(subarea=16, level=2, classes=3, channels=3,
                          conv_stages=((6, 1), (12, 1)), dense=(24,),
                          dtype="float32", seed=1, epochs=60, batch_size=8,
                          learning_rate=0.003)
    levels = (0.1, 0.5, 0.9)
    batch = []
    for i in range(24):
        cls = i % 3
        patch = levels[cls] + 0.04 * rng.standard_normal((16, 16, 3))
        batch.append(TrainingSample(np.clip(patch, 0, 1),
                                    one_hot_pmf(cfg.n_cells, 3, cls)))
    state = train(cfg, batch)
    for cls in range(3):
        fresh = np.clip(levels[cls]
                        + 0.04 * rng.standard_normal((16, 16, 3)), 0, 1)
        pmf = predict(state, cfg, fresh)
        assert (pmf.pmfs.argmax(axis=1) == cls).all()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    state = init_state(TINY)
    state.weights = rng.standard_normal(state.weights.size)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, state, TINY)
    loaded, cfg = load_checkpoint(path)
    assert cfg == TINY
    np.testing.assert_array_equal(loaded.weights, state.weights)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_checkpoint_bytes_deterministic(tmp_path, rng):
    batch = tiny_samples(rng, n=6)
    cfg = PredictorConfig(subarea=16, level=1, classes=2, channels=3,
                          conv_stages=((4, 1),), dense=(8,), dtype="float32",
                          seed=9, epochs=2, batch_size=3)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, train(cfg, batch), cfg)
    save_checkpoint(p2, train(cfg, batch), cfg)
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# oracle predictor and sampling
# ---------------------------------------------------------------------------

def test_oracle_predictor_equals_encoded_truth(rng):
    labels = vsplit_labels(64, 29)
    grid = build_grid(32, 2)
    fn = oracle_predictor(labels, grid, 3)
    image = np.zeros((64, 64, 3))
    got = fn(image, 10, 20)
    want = encode_targets(labels.crop(10, 20, 32), grid, 3)
    np.testing.assert_array_equal(got.pmfs, want.pmfs)
    np.testing.assert_array_equal(got.masked, want.masked)


def test_oracle_entropy_zero_on_pure_region():
    labels = constant_labels(64, cls=1)
    grid = build_grid(32, 2)
    fn = oracle_predictor(labels, grid, 3)
    assert grid_entropy(fn(np.zeros((64, 64, 3)), 0, 0)) == 0.0


def test_oracle_rejects_out_of_bounds():
    labels = constant_labels(64)
    grid = build_grid(32, 1)
    fn = oracle_predictor(labels, grid, 3)
    with pytest.raises(DataError):
        fn(np.zeros((64, 64, 3)), 40, 0)


def test_sample_positions_respect_bounds_and_boundary_ratio(rng):
    labels = vsplit_labels(96, 41)
    grid = build_grid(32, 1)
    pos = sample_patch_positions(labels, grid, 3, 64, rng, boundary_ratio=1.0)
    for x, y in pos:
        assert 0 <= x <= 64 and 0 <= y <= 64
    # with ratio 1 every patch must see the boundary
    for x, y in pos:
        target = encode_targets(labels.crop(x, y, 32), grid, 3)
        assert grid_entropy(target) > 0.0


def test_make_center_samples_take_center_class():
    labels = vsplit_labels(64, 32)
    image = np.zeros((64, 64, 3))
    positions = [(0, 0), (16, 10), (32, 0)]
    samples = make_center_samples(image, labels, 32, 3, positions)
    for (x, y), s in zip(positions, samples):
        cls = int(labels.classes[y + 16, x + 16])
        assert s.target.pmfs[0, cls] == 1.0
        assert s.target.pmfs.shape == (1, 3)


def test_grid_samples_match_manual_encoding(rng):
    labels = vsplit_labels(64, 21)
    image = rng.random((64, 64, 3))
    grid = build_grid(32, 2)
    samples = make_grid_samples(image, labels, grid, 3, [(5, 7)])
    want = encode_targets(labels.crop(5, 7, 32), grid, 3)
    np.testing.assert_array_equal(samples[0].target.pmfs, want.pmfs)
    np.testing.assert_array_equal(samples[0].patch, image[7:39, 5:37])


# ---------------------------------------------------------------------------
# patch-center baseline
# ---------------------------------------------------------------------------

def _trained_center_model(rng, d=16, k=2):
    cfg = PredictorConfig(subarea=d, level=1, classes=k, channels=3,
                          conv_stages=((4, 1),), dense=(8,), head="center",
                          dtype="float32", seed=2, epochs=30, batch_size=8,
                          learning_rate=0.005)
    labels = vsplit_labels(64, 32)
    image = np.zeros((64, 64, 3))
    image[:, 32:] = 1.0  # class 1 region is bright
    positions = [(int(x), int(y)) for x, y in
                 rng.integers(0, 64 - d + 1, size=(80, 2))]
    samples = make_center_samples(image, labels, d, k, positions)
    return cfg, train(cfg, samples), image, labels


def test_baseline_learns_center_class(rng):
    cfg, state, image, labels = _trained_center_model(rng)
    seg = baseline_classify(state, cfg, image, stride=4)
    inner = (slice(16, 48), slice(8, 24))
    assert (seg[inner] == 0).mean() > 0.9
    inner_right = (slice(16, 48), slice(40, 56))
    assert (seg[inner_right] == 1).mean() > 0.9
    assert seg.shape == labels.shape


def test_baseline_vote_fill(rng):
    cfg, state, image, _ = _trained_center_model(rng)
    seg = baseline_classify(state, cfg, image, stride=8, fill="vote")
    assert seg.shape == (64, 64)
    assert set(np.unique(seg)) <= {0, 1}


def test_baseline_requires_center_head(rng):
    state = init_state(TINY)
    with pytest.raises(ConfigError):
        baseline_classify(state, TINY, np.zeros((32, 32, 3)))


def test_baseline_unknown_fill_rejected(rng):
    cfg, state, image, _ = _trained_center_model(rng)
    with pytest.raises(ConfigError):
        baseline_classify(state, cfg, image, fill="mystery")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_arch_descriptor_roundtrip():
    stages, dense = parse_arch("16x2-32x2-64x2+128")
    assert stages == ((16, 2), (32, 2), (64, 2))
    assert dense == (128,)
    assert format_arch(stages, dense) == "16x2-32x2-64x2+128"
    stages, dense = parse_arch("8-16+32,16")
    assert stages == ((8, 1), (16, 1))
    assert dense == (32, 16)
    assert parse_arch("8x1")[1] == ()


def test_arch_descriptor_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_arch("banana")
    with pytest.raises(ConfigError):
        parse_arch("")


def test_config_validation():
    with pytest.raises(ConfigError):
        PredictorConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        PredictorConfig(head="sideways")
    with pytest.raises(ConfigError):
        PredictorConfig(dtype="float16")
    with pytest.raises(ConfigError):
        PredictorConfig(subarea=96, level=5).network()  # 96 % 64 != 0


def test_config_json_roundtrip():
    text = TINY.to_json()
    assert PredictorConfig.from_json(text) == TINY
    assert PredictorConfig.from_json(text).hash() == TINY.hash()


def test_reference_training_defaults():
    cfg = PredictorConfig()
    assert cfg.learning_rate == 0.0001
    assert cfg.batch_size == 16
    assert cfg.epochs == 20
    assert cfg.conv_stages == ((16, 2), (32, 2), (64, 2))


def test_grayscale_channel_support(rng):
    cfg = PredictorConfig(subarea=16, level=1, classes=2, channels=1,
                          conv_stages=((4, 1),), dense=(8,), dtype="float32",
                          seed=2, epochs=2, batch_size=4)
    batch = [TrainingSample(rng.random((16, 16, 1)), one_hot_pmf(16, 2, 0))
             for _ in range(4)]
    state = train(cfg, batch)
    pmf = predict(state, cfg, rng.random((16, 16, 1)))
    assert pmf.pmfs.shape == (16, 2)
