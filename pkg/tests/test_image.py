import numpy as np
import pytest

from lesionforge.image import (
    build_content_image,
    detect_hair_mask,
    from_uint8,
    load_image,
    median_filter,
    remove_hair,
    resize_bilinear,
    save_image,
    shades_of_gray,
    to_uint8,
)


def bilinear_oracle(img, out_h, out_w):
    """Independent two-pass (rows then columns) interpolation."""

    def interp_axis(arr, n_out, axis):
        n_in = arr.shape[axis]
        scale = n_in / n_out
        src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        a = np.take(arr, lo, axis=axis)
        b = np.take(arr, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = n_out
        f = frac.reshape(shape)
        return a * (1 - f) + b * f

    rows = interp_axis(img, out_h, 0)
    return interp_axis(rows, out_w, 1)


class TestResize:
    def test_constant(self):
        img = np.full((5, 7, 3), 0.4)
        out = resize_bilinear(img, 13, 3)
        np.testing.assert_allclose(out, 0.4)

    def test_ramp_rows(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])[:, :, None]
        out = resize_bilinear(img, 4, 4)[:, :, 0]
        for row in out:
            np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0])
        assert (np.diff(out, axis=1) >= 0).all()

    def test_matches_separable_oracle(self, rng):
        img = rng.random((7, 5, 3))
        got = resize_bilinear(img, 224, 224)
        want = bilinear_oracle(img, 224, 224)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_channel_permutation_commutes(self, rng):
        img = rng.random((6, 9, 3))
        perm = [2, 0, 1]
        np.testing.assert_allclose(
            resize_bilinear(img, 11, 4)[:, :, perm],
            resize_bilinear(img[:, :, perm], 11, 4),
            atol=1e-15,
        )

    def test_rejects_empty_output(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.zeros((4, 4, 1)), 0, 4)


def median_oracle(img, k):
    h, w, c = img.shape
    p = k // 2
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                vals = []
                for dy in range(-p, p + 1):
                    for dx in range(-p, p + 1):
                        yy = min(max(i + dy, 0), h - 1)
                        xx = min(max(j + dx, 0), w - 1)
                        vals.append(img[yy, xx, ch])
                out[i, j, ch] = sorted(vals)[len(vals) // 2]
    return out


class TestMedianFilter:
    def test_constant_unchanged(self):
        img = np.full((6, 6, 3), 0.7)
        np.testing.assert_array_equal(median_filter(img, 5), img)

    def test_impulse_rejected(self):
        img = np.zeros((7, 7, 1))
        img[3, 3, 0] = 1.0
        np.testing.assert_array_equal(median_filter(img, 5), np.zeros((7, 7, 1)))

    def test_matches_sort_oracle(self, rng):
        img = rng.random((9, 9, 3))
        np.testing.assert_array_equal(median_filter(img, 3), median_oracle(img, 3))

    def test_channel_permutation_commutes(self, rng):
        img = rng.random((8, 8, 3))
        perm = [1, 2, 0]
        np.testing.assert_array_equal(
            median_filter(img, 3)[:, :, perm], median_filter(img[:, :, perm], 3)
        )

    def test_rejects_even_window(self):
        with pytest.raises(ValueError):
            median_filter(np.zeros((4, 4, 1)), 4)


def _line_fixture(orient="h"):
    img = np.full((25, 25, 3), 0.6)
    if orient == "h":
        img[12, 2:23, :] = 0.1
        line = [(12, x) for x in range(2, 23)]
    else:
        img[2:23, 12, :] = 0.1
        line = [(y, 12) for y in range(2, 23)]
    return img, line


class TestRemoveHair:
    def test_clean_image_unchanged(self, rng):
        img = np.clip(0.5 + 0.01 * rng.standard_normal((20, 20, 3)), 0, 1)
        np.testing.assert_array_equal(remove_hair(img), img)

    @pytest.mark.parametrize("orient", ["h", "v"])
    def test_line_removed(self, orient):
        img, _ = _line_fixture(orient)
        out = remove_hair(img)
        assert np.abs(out - 0.6).max() <= 0.02

    @pytest.mark.parametrize("orient", ["h", "v"])
    def test_mask_covers_line(self, orient):
        img, line = _line_fixture(orient)
        mask, _ = detect_hair_mask(img)
        hit = sum(mask[y, x] for y, x in line)
        assert hit >= 0.9 * len(line)


class TestShadesOfGray:
    def test_gray_image_unchanged(self, rng):
        base = rng.random((8, 8, 1)) * 0.8
        img = np.repeat(base, 3, axis=2)
        np.testing.assert_allclose(shades_of_gray(img, 6), img, atol=1e-12)

    def test_channel_gains_inverted_p1(self, rng):
        base = np.full((10, 10), 0.3)
        img = np.stack([2.0 * base, base, base], axis=2)
        out = shades_of_gray(img, 1)
        # mean matching with p=1 restores a gray image
        np.testing.assert_allclose(out[:, :, 0], out[:, :, 1], atol=1e-12)
        np.testing.assert_allclose(out[:, :, 1], out[:, :, 2], atol=1e-12)

    def test_minkowski_means_equalized(self, rng):
        img = 0.05 + 0.5 * rng.random((16, 16, 3))
        img[:, :, 0] *= 0.7
        img[:, :, 2] *= 1.2
        out = shades_of_gray(np.clip(img, 0, 1), 6)
        assert out.max() < 1.0  # no pixel clamped
        m = np.mean(out**6, axis=(0, 1)) ** (1 / 6)
        assert m.max() - m.min() < 1e-9


class TestContentImage:
    def test_single_image(self, rng):
        img = rng.random((6, 6, 3))
        np.testing.assert_allclose(build_content_image([img]), img)

    def test_two_constants(self):
        a = np.full((4, 4, 3), 0.2)
        b = np.full((4, 4, 3), 0.6)
        np.testing.assert_allclose(build_content_image([a, b]), 0.4)

    def test_matches_streaming_oracle(self, rng):
        imgs = [rng.random((5, 5, 3)) for _ in range(100)]
        got = build_content_image(imgs)
        want = np.zeros((5, 5, 3))
        for im in reversed(imgs):  # independent summation order
            want += im
        want /= len(imgs)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_permutation_invariant(self, rng):
        imgs = [rng.random((5, 5, 3)) for _ in range(20)]
        a = build_content_image(imgs)
        b = build_content_image(imgs[::-1])
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_content_image([])


class TestIO:
    def test_png_round_trip(self, tmp_path, rng):
        img = rng.random((9, 7, 3))
        p = tmp_path / "x.png"
        save_image(img, p)
        back = load_image(p)
        np.testing.assert_array_equal(to_uint8(back), to_uint8(img))

    def test_ppm_round_trip(self, tmp_path, rng):
        img = rng.random((5, 6, 3))
        p = tmp_path / "x.ppm"
        save_image(img, p)
        back = load_image(p)
        np.testing.assert_array_equal(to_uint8(back), to_uint8(img))

    def test_gray_png(self, tmp_path, rng):
        img = rng.random((5, 5, 1))
        p = tmp_path / "g.png"
        save_image(img, p)
        back = load_image(p)
        assert back.shape == (5, 5, 1)

    def test_uint8_conversion(self):
        assert from_uint8(np.array([[255]], dtype=np.uint8))[0, 0, 0] == 1.0
        assert to_uint8(np.array([[[1.2]]]))[0, 0, 0] == 255
