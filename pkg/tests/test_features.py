"""Feature extraction: stride/shape invariants, shift equivariance,
determinism, and the .fmap container."""

import numpy as np
import pytest

from chromaprop.colorspace import Image, Space
from chromaprop.errors import ContractError, FormatError
from chromaprop.features import (BuiltinExtractor, FeatureMap, ImportExtractor,
                                 Level, extract_features, grid_extent,
                                 read_feature_map, write_feature_map)


@pytest.fixture
def extractor():
    return BuiltinExtractor()


def gray_image(data, name=None):
    return Image(np.asarray(data, dtype=np.float32), Space.GRAY, name=name)


class TestBuiltinExtractor:
    def test_shape_arithmetic(self, extractor, rng):
        img = gray_image(rng.random((64, 64, 1)))
        coarse = extract_features(extractor, img, Level.COARSE)
        fine = extract_features(extractor, img, Level.FINE)
        assert coarse.grid_shape() == (8, 8) and coarse.stride == 8
        assert fine.grid_shape() == (64, 64) and fine.stride == 1

    def test_ceil_grid_on_uneven_sizes(self, extractor, rng):
        img = gray_image(rng.random((50, 67, 1)))
        coarse = extract_features(extractor, img, Level.COARSE)
        assert coarse.grid_shape() == (grid_extent(50, 8), grid_extent(67, 8)) == (7, 9)

    def test_constant_image_uniform_descriptors(self, extractor):
        # tolerance absorbs sqrt-amplified cancellation noise in the sd channel
        img = gray_image(np.full((48, 48, 1), 0.42))
        for level in Level:
            fm = extract_features(extractor, img, level)
            flat = fm.data.reshape(-1, fm.depth)
            np.testing.assert_allclose(flat, np.broadcast_to(flat[0], flat.shape), atol=1e-4)

    def test_coarse_shift_equivariance(self, extractor, rng):
        canvas = rng.random((192, 192)).astype(np.float32)
        r = extractor.coarse_ratio
        a = extract_features(extractor, gray_image(canvas[16:144, 16:144, None]), Level.COARSE)
        b = extract_features(extractor, gray_image(canvas[16:144, 16 + r:144 + r, None]),
                             Level.COARSE)
        # b is a one-cell shift of a wherever the widest tap (2.5r + blur) stays
        # inside both windows: cell centers in [26, 102) -> indices 4..12
        np.testing.assert_allclose(a.data[4:12, 5:12], b.data[4:12, 4:11], atol=1e-5)

    def test_fine_shift_equivariance(self, extractor, rng):
        canvas = rng.random((80, 80)).astype(np.float32)
        a = extract_features(extractor, gray_image(canvas[10:42, 10:42, None]), Level.FINE)
        b = extract_features(extractor, gray_image(canvas[10:42, 15:47, None]), Level.FINE)
        np.testing.assert_allclose(a.data[4:28, 9:28], b.data[4:28, 4:23], atol=1e-6)

    def test_deterministic(self, extractor, rng):
        img = gray_image(rng.random((40, 40, 1)))
        a = extract_features(extractor, img, Level.COARSE)
        b = extract_features(extractor, img, Level.COARSE)
        np.testing.assert_array_equal(a.data, b.data)

    def test_rgb_rejected(self, extractor, rng):
        with pytest.raises(ContractError):
            extract_features(extractor, Image(rng.random((16, 16, 3)), Space.RGB), Level.FINE)

    def test_small_ratio_rejected(self):
        with pytest.raises(ContractError):
            BuiltinExtractor(coarse_ratio=2)


class TestFeatureMapInvariants:
    def test_fine_stride_must_be_one(self, rng):
        with pytest.raises(ContractError):
            FeatureMap(rng.random((4, 4, 2)).astype(np.float32), Level.FINE, 2)

    def test_coarse_stride_minimum(self, rng):
        with pytest.raises(ContractError):
            FeatureMap(rng.random((4, 4, 2)).astype(np.float32), Level.COARSE, 2)


class TestFmapContainer:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(5, 7, 3)).astype(np.float32), Level.COARSE, 8)
        path = tmp_path / "x.fmap"
        write_feature_map(path, fm)
        back = read_feature_map(path)
        assert back.level is Level.COARSE and back.stride == 8
        np.testing.assert_array_equal(back.data, fm.data)

    def test_magic_and_layout(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(2, 2, 1)).astype(np.float32), Level.FINE, 1)
        path = tmp_path / "x.fmap"
        write_feature_map(path, fm)
        blob = path.read_bytes()
        assert blob[:4] == b"FMAP"
        assert len(blob) == 4 + 21 + 4 * 4  # header + 4 floats

    def test_corrupt_payload_rejected(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(3, 3, 2)).astype(np.float32), Level.FINE, 1)
        path = tmp_path / "x.fmap"
        write_feature_map(path, fm)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_feature_map(path)


class TestImportExtractor:
    def test_serves_written_maps(self, tmp_path, rng, extractor):
        img = gray_image(rng.random((32, 32, 1)), name="0001")
        for level in Level:
            write_feature_map(tmp_path / f"0001.{level.name.lower()}.fmap",
                              extract_features(extractor, img, level))
        imp = ImportExtractor(tmp_path)
        for level in Level:
            fm = extract_features(imp, img, level)
            np.testing.assert_array_equal(fm.data, extract_features(extractor, img, level).data)

    def test_shape_mismatch_is_format_error(self, tmp_path, rng):
        img = gray_image(rng.random((32, 32, 1)), name="0001")
        wrong = FeatureMap(rng.normal(size=(3, 3, 2)).astype(np.float32), Level.COARSE, 8)
        write_feature_map(tmp_path / "0001.coarse.fmap", wrong)
        with pytest.raises(FormatError):
            extract_features(ImportExtractor(tmp_path), img, Level.COARSE)

    def test_missing_file_is_format_error(self, tmp_path, rng):
        img = gray_image(rng.random((16, 16, 1)), name="0002")
        with pytest.raises(FormatError):
            extract_features(ImportExtractor(tmp_path), img, Level.FINE)

    def test_unnamed_image_rejected(self, tmp_path, rng):
        img = gray_image(rng.random((16, 16, 1)))
        with pytest.raises(ContractError):
            extract_features(ImportExtractor(tmp_path), img, Level.FINE)
