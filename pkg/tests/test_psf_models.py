import numpy as np
import pytest

from svpsf import (
    ParamRanges,
    PsfModel,
    PsfParams,
    PupilConfig,
    default_ranges,
    gaussian_psf,
    psf_from_pupil,
    render_psf,
    zernike_phase,
)
from svpsf.errors import (
    DegeneratePupilError,
    DomainError,
    InvalidSampleError,
    ModelMismatchError,
    SizeError,
)
from svpsf.psf_models import gaussian_density, load_psf, save_psf


def test_zero_coefficients_give_zero_phase():
    grid = zernike_phase(PsfParams(PsfModel.ZERNIKE3, (0.0, 0.0, 1.0)))
    assert np.all(grid.phase == 0.0)


def test_defocus_only_phase_is_radial():
    phase = zernike_phase(PsfParams(PsfModel.ZERNIKE3, (0.5, 0.0, 0.3))).phase
    # a radial field is symmetric under transposition and point reflection
    # (index 0 of the even grid has no mirror partner, hence the 1: slices)
    assert np.allclose(phase, phase.T, atol=1e-12)
    core = phase[1:, 1:]
    assert np.allclose(core, core[::-1, ::-1], atol=1e-12)


def test_axis_quarter_turn_flips_astigmatic_term():
    base = zernike_phase(PsfParams(PsfModel.ZERNIKE2, (0.3, 0.5)))
    flipped = zernike_phase(PsfParams(PsfModel.ZERNIKE2, (0.3, 0.5 + np.pi / 2)))
    assert np.allclose(flipped.phase, -base.phase, atol=1e-12)


def test_zernike_phase_rejects_gaussian_model():
    with pytest.raises(ModelMismatchError):
        zernike_phase(PsfParams(PsfModel.GAUSSIAN1, (1.0,)))


def test_zernike_phase_rejects_axis_outside_open_interval():
    with pytest.raises(DomainError):
        zernike_phase(PsfParams(PsfModel.ZERNIKE2, (0.3, np.pi)))
    with pytest.raises(DomainError):
        zernike_phase(PsfParams(PsfModel.ZERNIKE2, (0.3, -0.1)))


def test_phase_zero_outside_aperture():
    cfg = PupilConfig(side=64, aperture_radius=0.5)
    grid = zernike_phase(PsfParams(PsfModel.ZERNIKE1, (2.0,)), cfg)
    yy, xx = np.mgrid[0:64, 0:64] - 32.0
    outside = np.hypot(xx, yy) > 0.5 * 32.0
    assert np.all(grid.phase[outside] == 0.0)


def test_airy_pattern_is_fourfold_symmetric():
    kernel = render_psf(PsfParams(PsfModel.ZERNIKE3, (0.0, 0.0, 1.0)), 63)
    assert np.abs(kernel - np.rot90(kernel)).max() < 1e-6
    c = (63 - 1) // 2
    assert np.unravel_index(kernel.argmax(), kernel.shape) == (c, c)


def test_defocus_sign_invariance():
    ka = psf_from_pupil(zernike_phase(PsfParams(PsfModel.ZERNIKE1, (2.0,))), 63)
    kb = psf_from_pupil(zernike_phase(PsfParams(PsfModel.ZERNIKE1, (-2.0,))), 63)
    assert np.abs(ka - kb).max() < 1e-9


def test_axis_quarter_turn_rotates_kernel_on_grid():
    # 90 degrees maps the square grid onto itself, so the rotation is exact
    k1 = render_psf(PsfParams(PsfModel.ZERNIKE3, (1.0, 2.0, 0.7)), 63)
    k2 = render_psf(PsfParams(PsfModel.ZERNIKE3, (1.0, 2.0, 0.7 + np.pi / 2)), 63)
    assert np.abs(k2 - np.rot90(k1)).max() < 1e-3  # interpolation-free: ~1e-16
    assert np.abs(k2 - np.rot90(k1)).max() < 1e-12


def test_kernel_side_validation():
    grid = zernike_phase(PsfParams(PsfModel.ZERNIKE1, (1.0,)))
    with pytest.raises(SizeError):
        psf_from_pupil(grid, 64)  # even
    with pytest.raises(SizeError):
        psf_from_pupil(grid, 255)  # > side/2


def test_degenerate_pupil():
    cfg = PupilConfig(side=8, aperture_radius=1e-3)
    grid = zernike_phase(PsfParams(PsfModel.ZERNIKE1, (0.0,)), cfg)
    with pytest.raises(DegeneratePupilError):
        psf_from_pupil(grid, 3)


def test_crop_energy_guard():
    # tiny crop of a strongly defocused kernel drops more than 1% of energy
    grid = zernike_phase(PsfParams(PsfModel.ZERNIKE1, (6.0,)))
    with pytest.raises(DomainError):
        psf_from_pupil(grid, 11)


def test_gaussian_density_closed_forms():
    d = gaussian_density(1.0, 1.0, 21)
    assert d[10, 10] == pytest.approx(1.0 / (2.0 * np.pi), abs=1e-12)
    d2 = gaussian_density(4.0, 1.0, 21)
    # two pixels along x with variance 4: exp(-0.5 * 4 / 4)
    assert d2[10, 12] / d2[10, 10] == pytest.approx(np.exp(-0.5), abs=1e-12)
    # and along y the variance is 1
    assert d2[12, 10] / d2[10, 10] == pytest.approx(np.exp(-2.0), abs=1e-12)


def test_gaussian_point_symmetry():
    k = gaussian_psf(PsfParams(PsfModel.GAUSSIAN2, (3.0, 1.2)), 31)
    assert np.array_equal(k, k[::-1, ::-1])


def test_gaussian_separability_pre_normalization():
    d = gaussian_density(2.5, 7.0, 25)
    gx = d[12, :]
    gy = d[:, 12]
    assert np.abs(np.outer(gy, gx) / d[12, 12] - d).max() < 1e-12


def test_gaussian_rejects_nonpositive_variance():
    with pytest.raises(DomainError):
        gaussian_psf(PsfParams(PsfModel.GAUSSIAN1, (0.0,)), 21)
    with pytest.raises(DomainError):
        gaussian_density(-1.0, 1.0, 21)


def test_render_dispatch_model_embeddings():
    g1 = render_psf(PsfParams(PsfModel.GAUSSIAN1, (1.0,)), 21)
    g2 = render_psf(PsfParams(PsfModel.GAUSSIAN2, (1.0, 1.0)), 21)
    assert np.array_equal(g1, g2)

    z1 = render_psf(PsfParams(PsfModel.ZERNIKE1, (0.8,)), 63)
    z3 = render_psf(PsfParams(PsfModel.ZERNIKE3, (0.8, 0.0, np.pi / 2)), 63)
    assert np.abs(z1 - z3).max() < 1e-12


def test_render_rejects_invalid_samples():
    with pytest.raises(InvalidSampleError):
        render_psf(PsfParams(PsfModel.GAUSSIAN1, (1.0,), a0=1.0), 21)


@pytest.mark.parametrize(
    "params",
    [
        PsfParams(PsfModel.GAUSSIAN1, (0.5,)),
        PsfParams(PsfModel.GAUSSIAN2, (16.0, 0.5)),
        PsfParams(PsfModel.ZERNIKE1, (6.0,)),
        PsfParams(PsfModel.ZERNIKE2, (3.0, 2.0)),
        PsfParams(PsfModel.ZERNIKE3, (6.0, 3.0, 0.4)),
    ],
)
def test_every_kernel_is_normalized_and_nonnegative(params):
    kernel = render_psf(params, 63)
    assert kernel.min() >= 0.0
    assert abs(kernel.sum() - 1.0) < 1e-9


def test_gaussian_spread_monotone_in_variance():
    ranges = default_ranges()
    lo, hi = ranges.for_model(PsfModel.GAUSSIAN1)[0]
    c = (63 - 1) // 2
    y, x = np.mgrid[0:63, 0:63]
    r2 = (x - c) ** 2 + (y - c) ** 2
    moments = []
    for v in np.linspace(lo, hi, 9):
        k = render_psf(PsfParams(PsfModel.GAUSSIAN1, (v,)), 63)
        moments.append(float((k * r2).sum()))
    assert np.all(np.diff(moments) > 0)


def test_param_ranges_round_trip():
    ranges = ParamRanges()
    rng = np.random.default_rng(7)
    for model in PsfModel:
        p = ranges.draw(model, rng)
        p.validate()
        u = ranges.normalize(p)
        assert np.all(u >= 0.0) and np.all(u <= 1.0)
        back = ranges.denormalize(model, u)
        assert np.allclose(back.a, p.a, atol=1e-12)
    d = ranges.to_dict()
    assert ParamRanges.from_dict(d).to_dict() == d


def test_param_vector_length_checked():
    with pytest.raises(ModelMismatchError):
        PsfParams(PsfModel.ZERNIKE3, (1.0, 2.0))


def test_psf_binary_round_trip(tmp_path):
    kernel = render_psf(PsfParams(PsfModel.GAUSSIAN2, (2.0, 5.0)), 31)
    path = tmp_path / "kernel.psf"
    save_psf(kernel, path)
    back = load_psf(path)
    assert back.shape == kernel.shape
    assert np.abs(back - kernel).max() < 1e-7  # f32 storage
    raw = path.read_bytes()
    assert raw[:4] == b"PSF1"
    assert len(raw) == 4 + 4 + 4 * 31 * 31
