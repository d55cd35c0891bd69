import numpy as np
import pytest

from helpers import resize_bilinear_oracle
from pix2affect.errors import DataError, ShapeError
from pix2affect.tensors import Rng
from pix2affect.video import (
    Clip,
    ingest_video,
    load_frames,
    read_pnm,
    resize_bilinear,
    segment_clip,
    to_grayscale,
    write_pgm,
)


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


class TestPnmIO:
    def test_pgm_round_trip_bytes(self, tmp_path):
        img = Rng(0).integers(0, 256, size=(9, 13)).astype(np.uint8)
        p = tmp_path / "a.pgm"
        write_pgm(str(p), img)
        first = p.read_bytes()
        again = read_pnm(str(p))
        np.testing.assert_array_equal(again, img)
        write_pgm(str(p), again)
        assert p.read_bytes() == first

    def test_ppm_decode(self, tmp_path):
        img = Rng(1).integers(0, 256, size=(4, 5, 3)).astype(np.uint8)
        p = tmp_path / "b.ppm"
        write_ppm(str(p), img)
        np.testing.assert_array_equal(read_pnm(str(p)), img)

    def test_comment_in_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04")
        np.testing.assert_array_equal(read_pnm(str(p)), [[1, 2], [3, 4]])

    def test_unsupported_magic(self, tmp_path):
        p = tmp_path / "d.pgm"
        p.write_bytes(b"P2\n2 2\n255\n1 2 3 4\n")
        with pytest.raises(DataError, match="magic"):
            read_pnm(str(p))

    def test_truncated_payload_names_file(self, tmp_path):
        p = tmp_path / "e.pgm"
        p.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(DataError, match="e.pgm"):
            read_pnm(str(p))

    def test_sixteen_bit_rejected(self, tmp_path):
        p = tmp_path / "f.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(DataError, match="8-bit"):
            read_pnm(str(p))


class TestLoadFrames:
    def test_lexicographic_stack(self, tmp_path):
        for i in range(5):
            write_pgm(str(tmp_path / f"frame_{i:05d}.pgm"),
                      np.full((6, 8), i, dtype=np.uint8))
        stack = load_frames(str(tmp_path))
        assert stack.shape == (5, 6, 8)
        assert [int(f[0, 0]) for f in stack] == [0, 1, 2, 3, 4]

    def test_mixed_dimensions_error(self, tmp_path):
        write_pgm(str(tmp_path / "a.pgm"), np.zeros((4, 4), np.uint8))
        write_pgm(str(tmp_path / "b.pgm"), np.zeros((2, 2), np.uint8))
        with pytest.raises(DataError, match="b.pgm"):
            load_frames(str(tmp_path))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_frames(str(tmp_path))


class TestGrayscale:
    def test_white_black(self):
        assert to_grayscale(np.full((1, 1, 3), 255, np.uint8))[0, 0] == pytest.approx(1.0)
        assert to_grayscale(np.zeros((1, 1, 3), np.uint8))[0, 0] == 0.0

    def test_pure_green_luma(self):
        g = np.zeros((1, 1, 3), np.uint8)
        g[0, 0, 1] = 255
        assert to_grayscale(g)[0, 0] == pytest.approx(0.587, abs=1e-6)

    def test_gray_input_scaled(self):
        img = np.array([[0, 51, 255]], np.uint8)
        np.testing.assert_allclose(to_grayscale(img), [[0.0, 0.2, 1.0]], atol=1e-7)


class TestResizeBilinear:
    def test_constant_preserved(self):
        frame = np.full((30, 40), 0.37, np.float32)
        out = resize_bilinear(frame)
        assert out.shape == (72, 128)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_identity_when_same_size(self):
        frame = Rng(2).uniform([72, 128], 0, 1)
        out = resize_bilinear(frame)
        assert (out == frame).all()

    def test_checkerboard_mean_preserved(self):
        yy, xx = np.mgrid[0:144, 0:256]
        board = ((yy + xx) % 2).astype(np.float32)
        out = resize_bilinear(board)
        assert abs(float(out.mean()) - 0.5) < 1e-6

    def test_matches_scalar_oracle(self):
        frame = Rng(3).uniform([9, 14], 0, 1)
        out = resize_bilinear(frame, 5, 7)
        np.testing.assert_allclose(out, resize_bilinear_oracle(frame, 5, 7), atol=1e-6)

    def test_upsample_matches_scalar_oracle(self):
        frame = Rng(4).uniform([11, 25], 0, 1)
        out = resize_bilinear(frame, 72, 128)
        np.testing.assert_allclose(out, resize_bilinear_oracle(frame, 72, 128), atol=1e-6)

    def test_degenerate_input(self):
        with pytest.raises(ShapeError):
            resize_bilinear(np.ones((1, 5), np.float32))


class TestClipsAndSegments:
    def make_clip(self, t=40):
        return Clip("v", Rng(5).uniform([t, 72, 128], 0, 1))

    def test_segment_count_floor(self):
        assert len(segment_clip(self.make_clip(1800))) == 225
        segs = segment_clip(self.make_clip(23))
        assert len(segs) == 2  # 7 trailing frames dropped

    def test_last_frame_is_final_slice(self):
        for seg in segment_clip(self.make_clip(32)):
            assert (seg.last_frame[0] == seg.frame_window[7]).all()

    def test_windows_disjoint_and_reconstruct_prefix(self):
        clip = self.make_clip(23)
        segs = segment_clip(clip)
        rebuilt = np.concatenate([s.frame_window for s in segs])
        assert (rebuilt == clip.frames[:16]).all()

    def test_segment_duration_267ms(self):
        assert 8 / 30.0 * 1000 == pytest.approx(266.7, abs=0.1)

    def test_short_clip_rejected(self):
        with pytest.raises(DataError):
            Clip("v", Rng(6).uniform([5, 72, 128], 0, 1))

    def test_out_of_range_pixels_rejected(self):
        frames = Rng(7).uniform([10, 72, 128], 0, 1)
        frames[0, 0, 0] = 1.5
        with pytest.raises(DataError):
            Clip("v", frames)

    def test_ingest_video_end_to_end(self, tmp_path):
        rng = Rng(8)
        for i in range(10):
            write_pgm(str(tmp_path / f"f_{i:03d}.pgm"),
                      rng.integers(0, 256, size=(36, 64)).astype(np.uint8))
        clip = ingest_video(str(tmp_path), "demo")
        assert clip.video_id == "demo"
        assert clip.frames.shape == (10, 72, 128)
        assert 0.0 <= float(clip.frames.min()) and float(clip.frames.max()) <= 1.0
