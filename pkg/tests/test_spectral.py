"""Spectral feature pipeline tests: band geometry, pixel-loop oracles,
feature bounds, and the channel-profile loss."""

import numpy as np
import pytest

from ssmseg.gradcheck import finite_difference, relative_errors
from ssmseg.spectral import (band_energies, build_band_partition,
                             channel_info_loss, fft2d, magnitude, pad_to_pow2,
                             spectrum_features)
from ssmseg.tensor import Tensor, set_default_dtype, tsum


@pytest.fixture(autouse=True)
def f64_default():
    set_default_dtype("f64")
    yield
    set_default_dtype("f32")


def features_pixel_loop(x, bands, high_bands, eps=1e-8):
    """Independent recomputation: library FFT, explicit loops over pixels."""
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    flat = x.reshape((-1, h, w))
    out = np.empty(flat.shape[0])
    ys = (np.arange(h) - h / 2.0) / h
    xs = (np.arange(w) - w / 2.0) / w
    for i in range(flat.shape[0]):
        spec = np.fft.fftshift(np.fft.fft2(flat[i]))
        energy = np.zeros(bands)
        for r in range(h):
            for c in range(w):
                radius = np.hypot(ys[r], xs[c])
                k = min(int(radius * bands), bands - 1)
                energy[k] += np.abs(spec[r, c])
        normalized = energy / (energy.sum() + eps)
        out[i] = normalized[bands - high_bands:].sum()
    return out.reshape(lead) if lead else out[0]


class TestBandPartition:
    def test_center_bin_is_band_zero(self):
        part = build_band_partition(8, 8, 4)
        assert part.radius[4, 4] == 0.0
        assert part.masks[0, 4, 4] == 1.0

    def test_corner_radius_and_band(self):
        part = build_band_partition(8, 8, 4)
        np.testing.assert_allclose(part.radius[0, 0], np.sqrt(0.5), rtol=1e-12)
        # sqrt(0.5) ~ 0.707 lands in [0.5, 0.75), the third of four rings
        assert part.masks[2, 0, 0] == 1.0

    def test_every_bin_in_exactly_one_band(self):
        part = build_band_partition(16, 32, 5)
        np.testing.assert_array_equal(part.masks.sum(axis=0), np.ones((16, 32)))

    def test_occupancy_matches_brute_force(self):
        bands = 8
        part = build_band_partition(32, 32, bands)
        counts = np.zeros(bands, dtype=int)
        for h in range(32):
            for w in range(32):
                r = np.sqrt(((h - 16) / 32.0) ** 2 + ((w - 16) / 32.0) ** 2)
                counts[min(int(r * bands), bands - 1)] += 1
        np.testing.assert_array_equal(part.masks.sum(axis=(1, 2)).astype(int), counts)

    def test_band_count_validation(self):
        with pytest.raises(ValueError):
            build_band_partition(8, 8, 1)


class TestFftOps:
    def test_fft2d_matches_library(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8, 8))
        planes = fft2d(Tensor(x))
        want = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
        np.testing.assert_allclose(planes.re.data, want.real, atol=1e-10)
        np.testing.assert_allclose(planes.im.data, want.imag, atol=1e-10)

    def test_fft2d_rejects_non_pow2(self):
        with pytest.raises(ValueError):
            fft2d(Tensor(np.zeros((5, 8))))

    def test_fft2d_adjoint_via_fd(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

        def build():
            planes = fft2d(x)
            return tsum(magnitude(planes) * magnitude(planes))

        build().backward()
        fd = finite_difference(lambda: float(build().item()), x, step=1e-6)
        assert relative_errors(x.grad, fd).max() < 1e-6

    def test_magnitude_zero_bin_keeps_finite_gradient(self):
        x = Tensor(np.zeros((4, 4)), requires_grad=True)
        tsum(magnitude(fft2d(x))).backward()
        assert np.all(np.isfinite(x.grad))

    def test_pad_to_pow2(self):
        x = Tensor(np.ones((2, 5, 6)))
        padded = pad_to_pow2(x)
        assert padded.shape == (2, 8, 8)
        assert np.all(padded.data[:, :5, :6] == 1.0)
        assert padded.data.sum() == 2 * 5 * 6

    def test_pad_noop_when_already_pow2(self):
        x = Tensor(np.ones((4, 8)))
        assert pad_to_pow2(x) is x


class TestSpectrumFeatures:
    def test_matches_pixel_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 16, 16))
        part = build_band_partition(16, 16, 6)
        got = spectrum_features(Tensor(x), part, 2).data
        want = features_pixel_loop(x, 6, 2)
        assert np.abs(got - want).max() < 1e-9

    def test_constant_image_gives_zero(self):
        part = build_band_partition(8, 8, 4)
        x = Tensor(np.full((3, 8, 8), 2.0))
        feats = spectrum_features(x, part, 2).data
        np.testing.assert_allclose(feats, 0.0, atol=1e-12)

    def test_all_zero_channel_gives_zero_not_nan(self):
        part = build_band_partition(8, 8, 4)
        feats = spectrum_features(Tensor(np.zeros((2, 8, 8))), part, 2).data
        np.testing.assert_array_equal(feats, 0.0)

    def test_checkerboard_concentrates_high(self):
        part = build_band_partition(8, 8, 4)
        yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        board = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
        # whole-spectrum oracle: the only nonzero bin is Nyquist in both
        # axes, radius sqrt(0.5), band floor(0.7071*4) = 2, inside the top 2
        spec = np.fft.fftshift(np.fft.fft2(board))
        hot = np.unravel_index(np.abs(spec).argmax(), spec.shape)
        assert part.masks[2][hot] == 1.0
        feats = spectrum_features(Tensor(board[None]), part, 2).data
        np.testing.assert_allclose(feats, 1.0, rtol=1e-9)

    def test_feature_range(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 8, 8))
        part = build_band_partition(8, 8, 5)
        feats = spectrum_features(Tensor(x), part, 2).data
        assert np.all(feats >= 0.0) and np.all(feats <= 1.0 + 1e-12)

    def test_normalized_distribution_sums_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 16, 16))
        part = build_band_partition(16, 16, 6)
        mag = magnitude(fft2d(Tensor(x)))
        e = band_energies(mag, part).data
        sums = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(sums.sum(axis=-1), 1.0, atol=1e-6)

    def test_monotone_in_high_band_count(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 8, 8)))
        part = build_band_partition(8, 8, 5)
        prev = np.zeros(3)
        for hb in range(1, 5):
            feats = spectrum_features(x, part, hb).data
            assert np.all(feats >= prev - 1e-12)
            prev = feats

    def test_validates_high_band_range(self):
        part = build_band_partition(8, 8, 4)
        x = Tensor(np.zeros((8, 8)))
        with pytest.raises(ValueError):
            spectrum_features(x, part, 0)
        with pytest.raises(ValueError):
            spectrum_features(x, part, 4)

    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        part = build_band_partition(8, 8, 4)

        def build():
            return tsum(spectrum_features(x, part, 2))

        build().backward()
        fd = finite_difference(lambda: float(build().item()), x, step=1e-6)
        assert relative_errors(x.grad, fd).max() < 1e-5


class TestChannelInfoLoss:
    def test_identical_rows_give_near_zero(self):
        row = np.random.default_rng(7).uniform(0.1, 1.0, size=8)
        feats = Tensor(np.tile(row, (4, 1)))
        loss = float(channel_info_loss(feats).item())
        assert loss < 1e-6

    def test_orthogonal_rows_approach_upper_end(self):
        feats = Tensor(np.eye(4))
        loss = float(channel_info_loss(feats).item())
        np.testing.assert_allclose(loss, 1.0 - 1.0 / 4.0, atol=1e-9)

    def test_bounded_on_nonnegative_features(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            feats = Tensor(rng.uniform(0.0, 1.0, size=(5, 7)))
            loss = float(channel_info_loss(feats).item())
            assert 0.0 <= loss <= 1.0 + 1e-12

    def test_matches_manual_similarity_mean(self):
        rng = np.random.default_rng(9)
        f = rng.uniform(0.0, 1.0, size=(4, 6))
        unit = f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-8)
        sim = unit @ unit.T
        want = 1.0 - sim.mean()
        got = float(channel_info_loss(Tensor(f)).item())
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_diagonal_convention_regression(self):
        # The mean includes the N diagonal entries (each ~1). Equivalent
        # form: 1 - (sum_offdiag + sum_diag)/N^2. Guard against silently
        # switching to an off-diagonal-only mean.
        rng = np.random.default_rng(10)
        f = rng.uniform(0.1, 1.0, size=(3, 5))
        unit = f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-8)
        sim = unit @ unit.T
        n = 3
        off_mean = (sim.sum() - np.trace(sim)) / (n * n - n)
        all_mean = sim.sum() / (n * n)
        got = float(channel_info_loss(Tensor(f)).item())
        np.testing.assert_allclose(got, 1.0 - all_mean, rtol=1e-12)
        assert abs((1.0 - all_mean) - (1.0 - off_mean)) > 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(11)
        f = Tensor(rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
        channel_info_loss(f).backward()
        fd = finite_difference(lambda: float(channel_info_loss(f).item()), f,
                               step=1e-7)
        assert relative_errors(f.grad, fd).max() < 1e-5

    def test_detached_features_carry_no_graph(self):
        f = Tensor(np.random.default_rng(12).uniform(size=(3, 4)),
                   requires_grad=True)
        loss = channel_info_loss(f.detach())
        assert loss.creator is None

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            channel_info_loss(Tensor(np.zeros((2, 3, 4))))
