import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsihyb.slides import (
    HEADER_SIZE, OutOfBoundsError, PatchRef, SlideFormatError, SlideImage, read_patch, write_slide,
)


def make_slide(tmp_path, pixels, tile, name="s"):
    path = tmp_path / f"{name}.wsih"
    write_slide(path, pixels, tile)
    return SlideImage(path, name)


class TestRoundTrip:
    def test_whole_slide_read_back(self, tmp_path, rng):
        px = rng.integers(0, 256, (300, 470, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 128)
        assert (slide.width, slide.height, slide.channels) == (470, 300, 3)
        assert (slide.grid_rows, slide.grid_cols) == (3, 4)
        np.testing.assert_array_equal(slide.read_all(), px)

    def test_tile_bytes_verbatim(self, tmp_path, rng):
        px = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 128)
        assert slide.read_tile(1, 0) == px[128:256, 0:128].tobytes()

    def test_edge_tile_is_zero_padded(self, tmp_path, rng):
        px = rng.integers(0, 256, (100, 150, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 128)
        tile = np.frombuffer(slide.read_tile(0, 1), np.uint8).reshape(128, 128, 3)
        np.testing.assert_array_equal(tile[:100, :22], px[:, 128:])
        assert not tile[100:].any() and not tile[:, 22:].any()

    def test_patch_covering_one_tile(self, tmp_path, rng):
        px = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 256)
        patch = read_patch(slide, PatchRef("s", 256, 0, 256))
        assert patch.tobytes() == slide.read_tile(0, 1)

    def test_patch_straddling_four_tiles(self, tmp_path, rng):
        px = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 256)
        np.testing.assert_array_equal(read_patch(slide, PatchRef("s", 100, 200, 256)),
                                      px[200:456, 100:356])

    def test_clamped_boundary_patch(self, tmp_path, rng):
        px = rng.integers(0, 256, (1024, 1024, 3), dtype=np.uint8)
        slide = make_slide(tmp_path, px, 512)
        np.testing.assert_array_equal(read_patch(slide, PatchRef("s", 512, 512, 512)), px[512:, 512:])

    def test_written_digest_matches_file(self, tmp_path, rng):
        import hashlib
        px = rng.integers(0, 256, (64, 80, 4), dtype=np.uint8)
        digest = write_slide(tmp_path / "a.wsih", px, 32)
        assert digest == hashlib.sha256((tmp_path / "a.wsih").read_bytes()).hexdigest()

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(1, 90), w=st.integers(1, 90), tile=st.integers(1, 40),
           data=st.data())
    def test_any_region_equals_crop(self, tmp_path_factory, h, w, tile, data):
        seed = data.draw(st.integers(0, 2 ** 32 - 1))
        px = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
        slide = make_slide(tmp_path_factory.mktemp("rt"), px, tile)
        x = data.draw(st.integers(0, w - 1))
        y = data.draw(st.integers(0, h - 1))
        rw = data.draw(st.integers(1, w - x))
        rh = data.draw(st.integers(1, h - y))
        np.testing.assert_array_equal(slide.read_region(x, y, rw, rh), px[y:y + rh, x:x + rw])


class TestBounds:
    @pytest.fixture
    def slide(self, tmp_path, rng):
        return make_slide(tmp_path, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8), 32)

    @pytest.mark.parametrize("region", [(-1, 0, 8, 8), (0, -1, 8, 8), (60, 0, 8, 8), (0, 57, 8, 8),
                                        (0, 0, 0, 8), (0, 0, 65, 1)])
    def test_region_outside_slide(self, slide, region):
        with pytest.raises(OutOfBoundsError):
            slide.read_region(*region)

    def test_tile_outside_grid(self, slide):
        with pytest.raises(OutOfBoundsError):
            slide.read_tile(2, 0)

    def test_patch_from_wrong_slide(self, slide):
        with pytest.raises(ValueError):
            read_patch(slide, PatchRef("other", 0, 0, 8))


class TestHeaderValidation:
    def _write(self, tmp_path, rng):
        path = tmp_path / "x.wsih"
        write_slide(path, rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), 8)
        return path

    def test_bad_magic(self, tmp_path, rng):
        path = self._write(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(SlideFormatError, match="magic"):
            SlideImage(path)

    def test_bad_version(self, tmp_path, rng):
        path = self._write(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[4:6] = struct.pack("<H", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(SlideFormatError, match="version"):
            SlideImage(path)

    def test_truncated_body(self, tmp_path, rng):
        path = self._write(tmp_path, rng)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(SlideFormatError, match="size"):
            SlideImage(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.wsih"
        path.write_bytes(b"WSIH\x01")
        with pytest.raises(SlideFormatError):
            SlideImage(path)

    def test_header_size(self):
        assert HEADER_SIZE == 4 + 2 + 4 + 4 + 4 + 1

    def test_slide_pickles_without_memmap(self, tmp_path, rng):
        import pickle
        slide = SlideImage(self._write(tmp_path, rng))
        slide.read_all()
        clone = pickle.loads(pickle.dumps(slide))
        np.testing.assert_array_equal(clone.read_all(), slide.read_all())
