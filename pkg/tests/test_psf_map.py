import numpy as np
import pytest

from svpsf import PsfModel, PsfParams, default_ranges, render_psf
from svpsf.errors import ConfigError, InfillError, SizeError
from svpsf.psf_map import (
    MapConfig,
    grid_shape,
    infill_invalid,
    load_param_map,
    map_from_cells,
    map_params,
    psfs_from_map,
    save_param_map,
)


def make_map(a1_grid, a0_grid, model=PsfModel.GAUSSIAN1, patch=64, stride=32):
    cfg = MapConfig(patch, patch, stride)
    a1 = np.asarray(a1_grid, dtype=float)
    gh, gw = a1.shape
    cells = [
        [PsfParams(model, (a1[r, c],), a0=float(a0_grid[r][c])) for c in range(gw)]
        for r in range(gh)
    ]
    shape = ((gh - 1) * stride + patch, (gw - 1) * stride + patch)
    return map_from_cells(model, cells, cfg, shape)


def test_grid_formula_large_image():
    cfg = MapConfig(128, 128, 64)
    assert grid_shape(1024, 1024, cfg) == (15, 15)


def test_grid_formula_exact_patch():
    cfg = MapConfig(64, 64, 32)
    assert grid_shape(64, 64, cfg) == (1, 1)


def test_grid_formula_matches_counting_loop():
    rng = np.random.default_rng(0)
    for _ in range(40):
        patch = int(rng.integers(8, 65))
        stride = int(rng.integers(1, patch + 1))
        w = int(rng.integers(patch, 300))
        h = int(rng.integers(patch, 300))
        cfg = MapConfig(patch, patch, stride)
        gw, gh = grid_shape(w, h, cfg)
        count_w = sum(1 for x in range(0, w, stride) if x + patch <= w)
        count_h = sum(1 for y in range(0, h, stride) if y + patch <= h)
        assert (gw, gh) == (count_w, count_h)


def test_grid_rejects_small_image():
    with pytest.raises(SizeError):
        grid_shape(32, 32, MapConfig(64, 64, 32))


def test_map_config_requires_overlap():
    with pytest.raises(ConfigError):
        MapConfig(64, 64, 65)


def test_infill_four_neighbors_mean():
    a1 = [[0.0, 1.0, 0.0],
          [2.0, 9.9, 3.0],
          [0.0, 4.0, 0.0]]
    a0 = [[0, 0, 0], [0, 1, 0], [0, 0, 0]]
    filled = infill_invalid(make_map(a1, a0))
    assert filled.a[1, 1, 0] == pytest.approx((1 + 2 + 3 + 4) / 4)
    assert filled.a0[1, 1] == 0.0


def test_infill_inverse_distance_weights():
    # a 1x3 strip: invalid corner with valid cells at distances 1 and 2
    a1 = [[9.9, 1.0, 4.0]]
    a0 = [[1, 0, 0]]
    filled = infill_invalid(make_map(a1, a0))
    expected = (1.0 * 1.0 + 0.5 * 4.0) / 1.5
    assert filled.a[0, 0, 0] == pytest.approx(expected)


def test_infill_fully_valid_is_noop():
    a1 = [[1.0, 2.0], [3.0, 4.0]]
    pmap = make_map(a1, [[0, 0], [0, 0]])
    filled = infill_invalid(pmap)
    assert np.array_equal(filled.a, pmap.a)
    assert np.array_equal(filled.a0, pmap.a0)


def test_infill_idempotent():
    rng = np.random.default_rng(1)
    a1 = rng.uniform(1, 10, size=(5, 5))
    a0 = (rng.random((5, 5)) < 0.4).astype(float)
    a0[2, 2] = 0.0
    pmap = make_map(a1, a0)
    once = infill_invalid(pmap)
    twice = infill_invalid(once)
    assert np.array_equal(once.a, twice.a)
    assert np.array_equal(once.a0, twice.a0)


def test_infill_range_preservation():
    rng = np.random.default_rng(2)
    a1 = rng.uniform(1, 10, size=(6, 6))
    a0 = np.zeros((6, 6))
    a0[2:4, 2:4] = 1.0
    pmap = make_map(a1, a0)
    filled = infill_invalid(pmap)
    valid_vals = a1[a0 == 0]
    filled_vals = filled.a[a0 == 1.0]
    assert filled_vals.min() >= valid_vals.min() - 1e-12
    assert filled_vals.max() <= valid_vals.max() + 1e-12


def test_infill_reads_only_original_validity():
    # a chain of invalids: each must interpolate from originally valid
    # cells, never from freshly filled ones
    a1 = [[1.0, 9.9, 9.9, 4.0]]
    a0 = [[0, 1, 1, 0]]
    filled = infill_invalid(make_map(a1, a0))
    # cell 1: valid at distances 1 (value 1) and 2 (value 4)
    assert filled.a[0, 1, 0] == pytest.approx((1.0 * 1 + 0.5 * 4) / 1.5)
    # cell 2 mirrors it
    assert filled.a[0, 2, 0] == pytest.approx((1.0 * 4 + 0.5 * 1) / 1.5)


def test_infill_all_invalid_raises():
    with pytest.raises(InfillError):
        infill_invalid(make_map([[1.0, 2.0]], [[1, 1]]))


def test_infill_far_cells_fall_back_to_global_mean():
    a1 = np.full((1, 12), 9.9)
    a0 = np.ones((1, 12))
    a1[0, 0], a0[0, 0] = 2.0, 0
    a1[0, 1], a0[0, 1] = 4.0, 0
    pmap = make_map(a1, a0, stride=16, patch=16)
    filled = infill_invalid(pmap, max_ring=3)
    assert filled.a[0, 11, 0] == pytest.approx(3.0)  # beyond ring 3: global mean


def test_psfs_from_map_uniform_bank():
    pmap = make_map([[2.0, 2.0], [2.0, 2.0]], [[0, 0], [0, 0]])
    bank = psfs_from_map(pmap, 21)
    assert bank.shape == (4, 21, 21)
    reference = render_psf(PsfParams(PsfModel.GAUSSIAN1, (2.0,)), 21)
    for m in range(4):
        assert np.array_equal(bank[m], reference)


def test_psfs_from_map_requires_infill():
    pmap = make_map([[2.0, 9.9]], [[0, 1]])
    with pytest.raises(InfillError):
        psfs_from_map(pmap, 21)


def test_param_map_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    a1 = rng.uniform(1, 10, size=(3, 4))
    a0 = (rng.random((3, 4)) < 0.3).astype(float)
    pmap = make_map(a1, a0)
    path = tmp_path / "map.csv"
    save_param_map(pmap, path)
    back = load_param_map(path)
    assert back.model is pmap.model
    assert np.array_equal(back.a, pmap.a)
    assert np.array_equal(back.a0, pmap.a0)
    assert np.array_equal(back.anchors_x, pmap.anchors_x)
    assert tuple(back.image_shape) == tuple(pmap.image_shape)
    assert back.cfg == pmap.cfg


def test_map_params_with_regressor():
    # a quickly trained small model: checks geometry, determinism, validity
    # flagging, and a monotone blur response; the tight cross-cell
    # consistency probe lives in the acceptance suite where the full-size
    # model is available
    from svpsf.degrade import NoiseConfig, build_source_pool, convolve, generate_dataset, synth_points
    from svpsf.estimator import TrainConfig, train

    pool = build_source_pool(kinds=("poi",), n_each=8, size=96, seed=0)
    noise = NoiseConfig(beta=1.0, sigma=5.0, seed=0)
    arch = dict(stem=8, blocks=(8, 16), dense=16)
    ts = generate_dataset(pool, PsfModel.GAUSSIAN1, 400, 32, noise, seed=0,
                          kernel_side=21, peak=1000.0)
    val = generate_dataset(pool, PsfModel.GAUSSIAN1, 80, 32, noise, seed=900,
                           kernel_side=21, peak=1000.0)
    model = train(ts, val, TrainConfig(learning_rate=0.003, epochs=25, seed=0), arch=arch)

    with pytest.raises(ConfigError):
        map_params(np.zeros((96, 96)), model, MapConfig(64, 64, 32))

    scene = synth_points(180, 160, seed=5)
    cfg = MapConfig(32, 32, 32)
    means = {}
    for var in (3.0, 10.0):
        blurred = convolve(scene * 1000.0, render_psf(PsfParams(PsfModel.GAUSSIAN1, (var,)), 21))
        pmap = map_params(blurred, model, cfg)
        assert (pmap.grid_h, pmap.grid_w) == (5, 5)
        assert np.array_equal(pmap.a, map_params(blurred, model, cfg).a)
        valid = pmap.valid_mask()
        assert valid.sum() >= 4
        means[var] = pmap.a[valid][:, 0].mean()
    print(f"mean estimated variance under uniform blur: {means}")
    assert means[3.0] < means[10.0]

    # an untextured scene must be flagged invalid everywhere
    flat = np.full((96, 96), 500.0)
    pmap = map_params(flat, model, cfg)
    assert not pmap.valid_mask().any()
