import numpy as np
import pytest

from protoscope import roi
from protoscope.raster import Mask, RasterImage
from protoscope.roi import BoundingBox, NoForegroundError


def white_square_scene():
    # 32x32 black image with a white 10x10 square at (8, 8)
    data = np.zeros((32, 32, 3))
    data[8:18, 8:18] = 1.0
    return RasterImage(data)


def otsu_oracle(hist):
    """Direct scan of the inter-class-variance definition."""
    total = hist.sum()
    best_t, best_var = 0, -1.0
    for t in range(256):
        w0 = hist[: t + 1].sum() / total
        w1 = 1.0 - w0
        if w0 == 0 or w1 == 0:
            var = 0.0
        else:
            idx = np.arange(256)
            mu0 = (hist[: t + 1] * idx[: t + 1]).sum() / hist[: t + 1].sum()
            mu1 = (hist[t + 1 :] * idx[t + 1 :]).sum() / hist[t + 1 :].sum()
            var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return best_t


class TestOtsu:
    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            hist = rng.integers(0, 50, size=256)
            if hist.sum() == 0:
                hist[0] = 1
            assert roi.otsu_threshold(hist) == otsu_oracle(hist)

    def test_bimodal_histogram(self):
        hist = np.zeros(256, dtype=int)
        hist[10] = 100
        hist[200] = 50
        t = roi.otsu_threshold(hist)
        assert 10 <= t < 200

    def test_ties_take_lowest(self):
        hist = np.zeros(256, dtype=int)
        hist[0] = 10
        hist[255] = 10
        # every split between 0 and 255 gives the same variance
        assert roi.otsu_threshold(hist) == otsu_oracle(hist)


class TestSegmentForeground:
    def test_uniform_image_has_no_foreground(self):
        img = RasterImage(np.full((16, 16, 3), 0.5))
        with pytest.raises(NoForegroundError):
            roi.segment_foreground(img)

    def test_white_square_exact(self):
        result = roi.segment_foreground(white_square_scene())
        expected = np.zeros((32, 32), dtype=bool)
        expected[8:18, 8:18] = True
        assert np.array_equal(result.mask.data, expected)
        assert result.bbox == BoundingBox(8, 8, 10, 10)
        assert result.foreground_fraction == pytest.approx(100 / 1024)

    def test_white_square_against_stated_procedure(self):
        # brute-force pixel-by-pixel re-run of the documented steps
        img = white_square_scene()
        h, w = 32, 32
        border = [
            (y, x)
            for y in range(h)
            for x in range(w)
            if y < 2 or y >= h - 2 or x < 2 or x >= w - 2
        ]
        bg = np.median(np.array([img.data[y, x] for y, x in border]), axis=0)
        dist = np.sqrt(((img.data - bg) ** 2).sum(axis=2))
        dmax = dist.max()
        bins = np.minimum((dist / dmax * 256).astype(int), 255)
        t = otsu_oracle(np.bincount(bins.ravel(), minlength=256))
        fg = bins > t
        # 10x10 square survives 3x3 open/close unchanged; it is the only
        # component and has no holes
        result = roi.segment_foreground(img)
        assert np.array_equal(result.mask.data, fg)

    def test_largest_component_kept(self):
        # white background, 50 px and 10 px black blobs
        data = np.ones((32, 32, 3))
        data[4:9, 4:14] = 0.0      # 5x10 = 50 px
        data[24:27, 24:27] = 0.0   # 3x3 core of the small blob
        data[24, 27] = 0.0         # plus one pixel: 10 px total
        result = roi.segment_foreground(RasterImage(data))
        expected = np.zeros((32, 32), dtype=bool)
        expected[4:9, 4:14] = True
        assert np.array_equal(result.mask.data, expected)

    def test_hole_filling(self):
        data = np.zeros((32, 32, 3))
        data[6:26, 6:26] = 1.0
        data[14:18, 14:18] = 0.0  # interior hole
        result = roi.segment_foreground(RasterImage(data))
        assert result.mask.data[15, 15]

    def test_near_full_frame_rejected(self):
        # white top/bottom border bands dominate the border median; the
        # remaining 93.75% of the frame reads as foreground
        data = np.zeros((64, 64, 3))
        data[:2] = 1.0
        data[-2:] = 1.0
        with pytest.raises(NoForegroundError, match="fraction"):
            roi.segment_foreground(RasterImage(data))

    def test_single_pixel_erased_by_morphology(self):
        data = np.ones((32, 32, 3))
        data[15, 15] = 0.0
        with pytest.raises(NoForegroundError, match="morphology"):
            roi.segment_foreground(RasterImage(data))

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            roi.segment_foreground(RasterImage(np.zeros((4, 4, 3))))

    def test_deterministic(self):
        img = white_square_scene()
        a = roi.segment_foreground(img)
        b = roi.segment_foreground(img)
        assert np.array_equal(a.mask.data, b.mask.data)
        assert a.bbox == b.bbox

    def test_bbox_tightness(self):
        result = roi.segment_foreground(white_square_scene())
        box, mask = result.bbox, result.mask.data
        assert mask[box.top, :].any() and mask[box.bottom - 1, :].any()
        assert mask[:, box.left].any() and mask[:, box.right - 1].any()


class TestMaskIO:
    def test_all_white_mask(self, tmp_path):
        from PIL import Image

        img = white_square_scene()
        path = tmp_path / "m.png"
        Image.fromarray(np.full((32, 32), 255, dtype=np.uint8), mode="L").save(path)
        mask = roi.load_mask(path, img)
        assert mask.data.all()

    def test_dimension_mismatch(self, tmp_path):
        from PIL import Image

        img = white_square_scene()
        path = tmp_path / "m.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(ValueError, match="dimension mismatch"):
            roi.load_mask(path, img)

    def test_multichannel_rejected(self, tmp_path):
        from PIL import Image

        img = white_square_scene()
        path = tmp_path / "m.png"
        Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(ValueError, match="multi-channel"):
            roi.load_mask(path, img)

    def test_threshold_at_128(self, tmp_path):
        from PIL import Image

        img = white_square_scene()
        arr = np.zeros((32, 32), dtype=np.uint8)
        arr[0, 0], arr[0, 1], arr[0, 2] = 0, 128, 255
        path = tmp_path / "m.png"
        Image.fromarray(arr, mode="L").save(path)
        mask = roi.load_mask(path, img)
        assert not mask.data[0, 0]
        assert mask.data[0, 1] and mask.data[0, 2]

    def test_save_load_round_trip(self, tmp_path):
        img = white_square_scene()
        mask = roi.segment_foreground(img).mask
        path = tmp_path / "rt.png"
        roi.save_mask(mask, path)
        again = roi.load_mask(path, img)
        assert np.array_equal(again.data, mask.data)


class TestApplyMask:
    def test_all_true_identity(self):
        img = white_square_scene()
        out = roi.apply_mask(img, Mask(np.ones((32, 32), dtype=bool)))
        assert np.array_equal(out.data, img.data)

    def test_all_false_black(self):
        img = white_square_scene()
        out = roi.apply_mask(img, Mask(np.zeros((32, 32), dtype=bool)))
        assert np.all(out.data == 0.0)

    def test_checkerboard_selects_exactly(self):
        img = RasterImage(np.ones((4, 4, 3)))
        board = np.indices((4, 4)).sum(axis=0) % 2 == 0
        out = roi.apply_mask(img, Mask(board))
        assert np.array_equal(out.data[..., 0] == 1.0, board)

    def test_dimension_mismatch(self):
        img = white_square_scene()
        with pytest.raises(ValueError, match="dimension mismatch"):
            roi.apply_mask(img, Mask(np.ones((8, 8), dtype=bool)))

    def test_foreground_pixels_exact(self):
        rng = np.random.default_rng(3)
        img = RasterImage(rng.random((10, 10, 3)))
        mask = Mask(rng.random((10, 10)) > 0.5)
        out = roi.apply_mask(img, mask)
        assert np.array_equal(out.data[mask.data], img.data[mask.data])
        assert np.all(out.data[~mask.data] == 0.0)
