import numpy as np
import pytest
import torch

from skei.errors import ConfigError, ShapeError
from skei.linops import (CTModel, IdentityModel, MatrixModel, MeasurementModel, MRIModel, adjoint_test,
                         ct_fbp, ct_forward, fft2c, ifft2c, make_cartesian_mask, mri_forward, mri_pinv,
                         n_detectors, sq_norm, to_channels, to_complex, uniform_angles)
from skei.analysis import psnr
from skei.phantoms import make_coil_maps, make_phantom


def _disk(size, radius):
    # 8x supersampled uniform disk centred on the grid centre
    n = size * 8
    c = (np.arange(n) + 0.5) / 8 - size / 2
    xx, yy = np.meshgrid(c, c)
    fine = (xx**2 + yy**2 <= radius**2).astype(float)
    return fine.reshape(size, 8, size, 8).mean(axis=(1, 3))


# ---------------------------------------------------------------- CT


def test_ct_zero_image_gives_zero_sinogram():
    s = ct_forward(np.zeros((64, 64)), uniform_angles(60))
    assert s.shape == (60, n_detectors(64))
    assert torch.count_nonzero(s) == 0


def test_ct_center_pixel_has_unit_mass_per_angle():
    img = np.zeros((65, 65))
    img[32, 32] = 1.0
    s = ct_forward(img, [0.0, 13.0, 45.0, 90.0, 122.5, 179.0])
    np.testing.assert_allclose(s.sum(-1).numpy(), 1.0, atol=1e-12)
    # The detector count is even, so the centre falls halfway between two bins.
    mid = s.shape[1] // 2
    np.testing.assert_allclose(s[0, mid - 1: mid + 1].numpy(), [0.5, 0.5], atol=1e-12)


def test_ct_disk_projection_sums_match_analytic_area():
    size, r = 64, 20.0
    img = _disk(size, r)
    s = ct_forward(img, uniform_angles(45))
    area = np.pi * r * r
    np.testing.assert_allclose(s.sum(-1).numpy(), area, rtol=1e-3)


def test_ct_disk_projection_profile_matches_chord_length():
    size, r = 128, 40.0
    s = ct_forward(_disk(size, r), [0.0, 30.0, 60.0, 90.0]).numpy()
    t = np.arange(s.shape[1]) - (s.shape[1] - 1) / 2.0
    chord = 2 * np.sqrt(np.clip(r * r - t * t, 0, None))
    inner = np.abs(t) < r - 3
    for row in s:
        rel = np.linalg.norm(row[inner] - chord[inner]) / np.linalg.norm(chord[inner])
        assert rel < 0.02


def test_ct_non_square_and_bad_angles_rejected():
    with pytest.raises(ShapeError):
        ct_forward(np.zeros((32, 40)), uniform_angles(10))
    with pytest.raises(ConfigError):
        ct_forward(np.zeros((32, 32)), [])
    with pytest.raises(ConfigError):
        CTModel(32, [10.0, 5.0])
    with pytest.raises(ConfigError):
        CTModel(32, [0.0, 180.0])


def test_ct_fbp_zero_and_linearity():
    angles = uniform_angles(40)
    assert torch.count_nonzero(ct_fbp(torch.zeros(40, n_detectors(32)), angles, 32)) == 0
    gen = np.random.default_rng(1)
    s1, s2 = (torch.from_numpy(gen.standard_normal((40, n_detectors(32)))) for _ in range(2))
    a, b = 1.7, -0.4
    lhs = ct_fbp(a * s1 + b * s2, angles, 32)
    rhs = a * ct_fbp(s1, angles, 32) + b * ct_fbp(s2, angles, 32)
    assert float(torch.linalg.norm(lhs - rhs) / torch.linalg.norm(rhs)) < 1e-5


def test_ct_fbp_angle_count_mismatch():
    with pytest.raises(ShapeError):
        ct_fbp(torch.zeros(10, n_detectors(32)), uniform_angles(12), 32)


def test_ct_fbp_reconstructs_shepp_logan():
    x = torch.from_numpy(make_phantom("shepp-logan", 128))
    angles = uniform_angles(180)
    rec = ct_fbp(ct_forward(x, angles), angles, 128)
    assert psnr(rec, x) >= 25.0


def test_ct_forward_is_linear():
    m = CTModel(32, uniform_angles(20))
    gen = np.random.default_rng(2)
    x1, x2 = m.random_image(gen), m.random_image(gen)
    lhs = m.apply(0.3 * x1 - 2.0 * x2)
    rhs = 0.3 * m.apply(x1) - 2.0 * m.apply(x2)
    assert float(torch.linalg.norm(lhs - rhs) / torch.linalg.norm(rhs)) < 1e-5


def test_ct_adjoint_defect():
    assert adjoint_test(CTModel(64, uniform_angles(30)), trials=10, rng=0) <= 1e-4


def test_ct_restricted_fbp_uses_subset_weight():
    m = CTModel(32, uniform_angles(20))
    sub = m.restrict(np.arange(0, 20, 4))
    assert sub.fbp_weight == pytest.approx(np.pi / 5)
    np.testing.assert_allclose(sub.angles, m.angles[::4])


# ---------------------------------------------------------------- MRI


def test_mri_single_unit_coil_full_mask_is_fft():
    gen = np.random.default_rng(3)
    img = gen.standard_normal((16, 16)) + 1j * gen.standard_normal((16, 16))
    maps = np.ones((1, 16, 16), complex)
    mask = np.ones((16, 16), bool)
    k = mri_forward(torch.from_numpy(img), torch.from_numpy(maps), torch.from_numpy(mask))
    oracle = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img), norm="ortho"))
    np.testing.assert_allclose(k[0].numpy(), oracle, atol=1e-12)
    assert float(sq_norm(k)) == pytest.approx(float(np.sum(np.abs(img) ** 2)), rel=1e-6)
    back = mri_pinv(k, torch.from_numpy(maps), torch.from_numpy(mask))
    np.testing.assert_allclose(back.numpy(), img, atol=1e-6)


def test_mri_zero_inputs():
    maps = torch.from_numpy(make_coil_maps(3, 16))
    mask = make_cartesian_mask((16, 16), 4, 4)
    assert torch.count_nonzero(mri_forward(torch.zeros(16, 16, dtype=torch.complex128), maps, mask)) == 0
    assert torch.count_nonzero(mri_pinv(torch.zeros(3, 16, 16, dtype=torch.complex128), maps, mask)) == 0


def test_mri_multicoil_full_mask_round_trip():
    size = 64
    maps = torch.from_numpy(make_coil_maps(4, size))
    x = torch.from_numpy(make_phantom("shepp-logan", size).astype(complex))
    full = torch.ones(size, size, dtype=torch.bool)
    back = mri_pinv(mri_forward(x, maps, full), maps, full)
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    interior = torch.from_numpy(xx**2 + yy**2 < (0.45 * size) ** 2)
    assert psnr(back.abs()[interior], x.abs()[interior]) >= 60.0


def test_mri_zero_sensitivity_pixels_are_zeroed_and_counted():
    maps = torch.from_numpy(make_coil_maps(2, 16))
    maps[:, :2, :] = 0
    model = MRIModel(maps, torch.ones(16, 16, dtype=torch.bool))
    assert model.zero_sensitivity_pixels == 32
    x = torch.ones(1, 2, 16, 16, dtype=torch.float64)
    back = model.pinv(model.apply(x))
    assert torch.count_nonzero(back[..., :2, :]) == 0


def test_mri_adjoint_defect_with_mask():
    maps = torch.from_numpy(make_coil_maps(4, 64))
    model = MRIModel(maps, make_cartesian_mask((64, 64), 4, 16))
    assert adjoint_test(model, trials=10, rng=0) <= 1e-5
    one = MRIModel(torch.ones(1, 16, 16, dtype=torch.complex128), torch.ones(16, 16, dtype=torch.bool))
    assert adjoint_test(one, trials=5, rng=1) <= 1e-6


def test_mri_shape_errors():
    maps = torch.from_numpy(make_coil_maps(2, 16))
    with pytest.raises(ShapeError):
        mri_forward(torch.zeros(8, 8, dtype=torch.complex128), maps, torch.ones(16, 16, dtype=torch.bool))
    with pytest.raises(ShapeError):
        mri_pinv(torch.zeros(3, 16, 16, dtype=torch.complex128), maps)
    with pytest.raises(ShapeError):
        MRIModel(maps, torch.ones(8, 8, dtype=torch.bool))


def test_cartesian_mask_layout():
    mask = make_cartesian_mask((32, 64), acceleration=4, acs_lines=16)
    cols = mask[0].numpy()
    assert mask.all(0).equal(mask[0])
    assert cols[32 - 8: 32 + 8].all()
    outside = np.r_[0:24, 40:64]
    assert np.array_equal(cols[outside], (outside - 32) % 4 == 0)


def test_complex_channel_conversion_round_trip():
    z = torch.randn(2, 5, 7, dtype=torch.complex128)
    assert torch.equal(to_complex(to_channels(z)), z)
    k = torch.randn(3, 8, 8, dtype=torch.complex128)
    assert torch.allclose(ifft2c(fft2c(k)), k)


# ---------------------------------------------------------------- negative control and helpers


class _TransposedAdjoint(MeasurementModel):
    """Deliberately wrong adjoint: applies A instead of A^T on a non-symmetric matrix."""

    def __init__(self, mat):
        self.mat = torch.as_tensor(mat)
        self.image_shape = (1, 1, mat.shape[1])
        self.measurement_shape = (mat.shape[0],)

    def apply(self, x):
        return x.reshape(x.shape[0], -1) @ self.mat.T

    def adjoint(self, y):
        return (y @ self.mat).reshape(y.shape[0], 1, 1, -1).flip(-1)


def test_adjoint_test_flags_wrong_adjoint():
    gen = np.random.default_rng(4)
    assert adjoint_test(_TransposedAdjoint(gen.standard_normal((6, 6))), trials=10, rng=0) >= 0.1


def test_identity_and_matrix_models():
    ident = IdentityModel((1, 4, 4))
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(ident.apply(x), x) and torch.equal(ident.pinv(x), x)
    gen = np.random.default_rng(5)
    mat = gen.standard_normal((10, 16))
    mm = MatrixModel(mat, (1, 4, 4))
    assert adjoint_test(mm, trials=5, rng=0) < 1e-12
    y = mm.apply(x)
    np.testing.assert_allclose(mm.apply(mm.pinv(y)).numpy(), y.numpy(), atol=1e-10)
