import numpy as np
import pytest

from chmseg.core import DimensionError, FeatureConfig, ImagePlane
from chmseg.features import (
    HAAR_SIZES,
    appearance_width,
    canny_edges,
    extract_appearance,
    extract_context,
    feature_labels,
    haar_responses,
    hog_cells,
    position_features,
    sample_stencil,
    stencil_layout,
)

# frozen once from the registry; a change here means a model format change
GRAY_WIDTH = 98
RGB_WIDTH = 248


class TestStencil:
    def test_layout(self):
        offsets = stencil_layout()
        assert len(offsets) == 57
        assert len(set(offsets)) == 57
        assert (0, 0) in offsets
        assert max(max(abs(r), abs(c)) for r, c in offsets) == 7

    def test_ring_counts(self):
        radius = [max(abs(r), abs(c)) for r, c in stencil_layout()]
        counts = {k: radius.count(k) for k in set(radius)}
        assert counts == {0: 1, 1: 8, 2: 16, 3: 12, 5: 10, 7: 10}

    def test_translation_covariance(self):
        rng = np.random.default_rng(0)
        g = rng.random((30, 30))
        shifted = np.roll(g, (2, 3), axis=(0, 1))
        a = sample_stencil(g).reshape(30, 30, -1)
        b = sample_stencil(shifted).reshape(30, 30, -1)
        np.testing.assert_array_equal(b[9:21, 10:22], a[7:19, 7:19])


class TestContext:
    def test_constant(self):
        fm = extract_context([np.full((6, 5), 0.7)])
        assert fm.feature_count == 57
        assert np.all(fm.values == 0.7)

    def test_two_maps(self):
        assert extract_context([np.zeros((4, 4)), np.ones((4, 4))]).feature_count == 114

    def test_delta(self):
        g = np.zeros((9, 9))
        g[4, 6] = 1
        fm = extract_context([g])
        centre = stencil_layout().index((0, 0))
        assert fm.values[4 * 9 + 6, centre] == 1
        assert fm.values[:, centre].sum() == 1

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            extract_context([np.zeros((4, 4)), np.zeros((4, 5))])


def haar_oracle(g, size, kind):
    """Direct box sums with clamped (edge-replicated) indices."""
    h, w = g.shape
    half = size // 2
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            def box(r0, c0):
                rows = np.clip(np.arange(r0, r0 + half), 0, h - 1)
                cols = np.clip(np.arange(c0, c0 + half), 0, w - 1)
                return g[np.ix_(rows, cols)].sum()

            tl, tr = box(i - half, j - half), box(i - half, j)
            bl, br = box(i, j - half), box(i, j)
            val = {"h": tl + bl - tr - br, "v": tl + tr - bl - br, "x": tl + br - tr - bl}[kind]
            out[i, j] = val / size**2
    return out


class TestHaar:
    def test_integral_matches_direct_sums(self):
        """Integer-valued grids make every box sum exact, so equality is exact."""
        rng = np.random.default_rng(1)
        for _ in range(3):
            g = rng.integers(0, 256, size=(16, 16)).astype(float)
            got = haar_responses(g).reshape(16, 16, -1)
            k = 0
            for size in HAAR_SIZES:
                for kind in "hvx":
                    np.testing.assert_array_equal(got[..., k], haar_oracle(g, size, kind))
                    k += 1

    def test_constant_zero(self):
        np.testing.assert_allclose(haar_responses(np.full((10, 12), 0.4)), 0.0, atol=1e-12)


class TestHog:
    def test_nonnegative_and_normalised(self):
        rng = np.random.default_rng(2)
        cells = hog_cells(rng.random((40, 33)))
        assert np.all(cells >= 0)
        # a cell divided by the norm of a block containing it
        assert np.all(np.linalg.norm(cells, axis=-1) <= 1 + 1e-9)

    def test_single_orientation(self):
        g = np.tile(np.linspace(0, 1, 16), (16, 1))
        cells = hog_cells(g)
        assert np.all(np.argmax(cells, axis=-1) == 0)


class TestAppearance:
    def test_golden_widths(self):
        assert appearance_width(FeatureConfig(), 1) == GRAY_WIDTH
        assert appearance_width(FeatureConfig(), 3) == RGB_WIDTH
        assert extract_appearance(ImagePlane(np.zeros((1, 8, 8)))).feature_count == GRAY_WIDTH

    def test_constant_image(self):
        fm = extract_appearance(ImagePlane(np.full((1, 20, 20), 0.3)), FeatureConfig(position=False))
        labels = np.array(fm.labels)
        stencil = np.char.startswith(labels, "stencil")
        assert np.all(fm.values[:, stencil] == 0.3)
        np.testing.assert_allclose(fm.values[:, ~stencil], 0.0, atol=1e-12)

    def test_position_at_centre(self):
        pos = position_features((7, 9)).reshape(7, 9, 5)
        np.testing.assert_allclose(pos[3, 4], [0.5, 0.5, 0.25, 0.25, 0.25])

    def test_position_flag(self):
        assert "pos_x" not in feature_labels(FeatureConfig(position=False), 1)
        assert appearance_width(FeatureConfig(position=False), 1) == GRAY_WIDTH - 5

    @pytest.mark.parametrize("fill", ["zeros", "ones", "single", "stripe"])
    def test_adversarial_inputs_finite(self, fill):
        data = {
            "zeros": np.zeros((1, 5, 5)),
            "ones": np.ones((3, 6, 4)),
            "single": np.full((1, 1, 1), 0.5),
            "stripe": np.tile([0.0, 1.0], (1, 3, 1)),
        }[fill]
        fm = extract_appearance(ImagePlane(data))
        assert fm.pixel_count == data.shape[1] * data.shape[2]
        assert fm.feature_count == appearance_width(FeatureConfig(), data.shape[0])
        assert np.all(np.isfinite(fm.values))

    def test_canny_finds_step(self):
        g = np.zeros((20, 20))
        g[:, 10:] = 1
        edges = canny_edges(g)
        assert edges[:, 9:11].any() and not edges[:, :5].any()
