import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deepmatch import io
from deepmatch.matching import FlowField


class TestImages:
    def test_pgm_roundtrip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (16, 16), dtype=np.uint8)
        io.write_image(tmp_path / "a.pgm", px)
        back = io.read_image(tmp_path / "a.pgm")
        assert back.channels == 1 and np.array_equal(back.pixels[..., 0], px)

    def test_ppm_roundtrip(self, tmp_path):
        px = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        io.write_image(tmp_path / "a.ppm", io.ImageBuffer(px))
        back = io.read_image(tmp_path / "a.ppm")
        assert (back.height, back.width, back.channels) == (5, 7, 3)
        assert np.array_equal(back.pixels, px)

    def test_degenerate_extent(self):
        with pytest.raises(io.MalformedHeader):
            io.parse_image(b"P5 0 0 255\n")

    def test_comments_allowed(self):
        img = io.parse_image(b"P5\n# made by hand\n2 1\n# depth\n255\n\x01\x02")
        assert img.pixels[..., 0].tolist() == [[1, 2]]

    @pytest.mark.parametrize(
        "data, err",
        [
            (b"P5\n2 2\n255\n\x00\x00\x00", io.TruncatedPayload),
            (b"P5\n1 1\n255\n\x00\x00", io.TrailingData),
            (b"P5\n1 1\n65535\n\x00\x00", io.UnsupportedMaxval),
            (b"P2\n1 1\n255\n0", io.MalformedHeader),
            (b"P5\n1 x\n255\n\x00", io.MalformedHeader),
            (b"P5\n1 1", io.MalformedHeader),
            (b"", io.MalformedHeader),
        ],
    )
    def test_parse_errors(self, data, err):
        with pytest.raises(err):
            io.parse_image(data)

    def test_buffer_validation(self):
        with pytest.raises(ValueError):
            io.ImageBuffer(np.zeros((2, 2, 2), np.uint8))
        with pytest.raises(ValueError):
            io.ImageBuffer(np.full((2, 2), 300))

    @given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12)),
           st.booleans())
    def test_roundtrip_property(self, px, color):
        if color:
            px = np.stack([px, px[::-1], 255 - px], axis=-1)
        img = io.ImageBuffer(px)
        assert np.array_equal(io.parse_image(io.encode_image(img)).pixels, img.pixels)


class TestFlow:
    def field(self):
        rng = np.random.default_rng(2)
        return FlowField(rng.normal(scale=10, size=(4, 6)), rng.normal(scale=10, size=(4, 6)), np.ones((4, 6), bool))

    def test_roundtrip(self, tmp_path):
        f = self.field()
        io.write_flow(tmp_path / "a.flo", f)
        g = io.read_flow(tmp_path / "a.flo")
        assert np.array_equal(g.u, f.u.astype(np.float32)) and np.array_equal(g.v, f.v.astype(np.float32))
        assert g.valid.all()

    def test_layout(self):
        f = FlowField(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.ones((1, 2), bool))
        data = io.encode_flow(f)
        assert struct.unpack("<fii", data[:12]) == (202021.25, 2, 1)
        assert struct.unpack("<4f", data[12:]) == (1.0, 3.0, 2.0, 4.0)

    def test_bad_magic(self):
        data = struct.pack("<fii", 0.0, 1, 1) + b"\0" * 8
        with pytest.raises(io.BadMagic):
            io.parse_flow(data)

    def test_invalid_pixel(self):
        f = self.field()
        f.valid[1, 2] = False
        g = io.parse_flow(io.encode_flow(f))
        assert not g.valid[1, 2] and g.valid.sum() == f.valid.size - 1

    @pytest.mark.parametrize("cut", [0, 5, 11, 13, -1])
    def test_truncated(self, cut):
        data = io.encode_flow(self.field())
        with pytest.raises(io.FormatError):
            io.parse_flow(data[:cut])

    def test_trailing(self):
        with pytest.raises(io.SizeMismatch):
            io.parse_flow(io.encode_flow(self.field()) + b"\0")


class TestColor:
    def test_zero_flow(self):
        f = FlowField.constant((3, 3))
        f.valid[0, 0] = False
        img = io.flow_to_color(f, 1.0)
        assert img.pixels[0, 0].tolist() == [0, 0, 0]
        assert np.all(img.pixels[1:, 1:] == 255)

    def test_saturated_hue_zero(self):
        img = io.flow_to_color(FlowField.constant((1, 1), u=2.0), 2.0)
        assert img.pixels[0, 0].tolist() == [255, 0, 0]

    def test_hue_circle(self):
        ang = np.linspace(0, 2 * np.pi, 36, endpoint=False)
        f = FlowField(np.cos(ang)[None], np.sin(ang)[None], np.ones((1, 36), bool))
        px = io.flow_to_color(f, 1.0).pixels[0].astype(int)
        assert len({tuple(p) for p in px}) == 36
        assert np.all(px.max(axis=1) == 255) and np.all(px.min(axis=1) <= 1)

    def test_bad_magnitude(self):
        with pytest.raises(ValueError):
            io.flow_to_color(FlowField.constant((1, 1)), 0.0)

    def test_slice_heatmap(self):
        s = np.array([[-np.inf, 0.2], [0.4, 0.6]])
        assert io.score_slice_image(s).pixels[..., 0].tolist() == [[0, 0], [128, 255]]


class TestFuzz:
    @given(st.binary(max_size=64))
    def test_image_garbage(self, data):
        try:
            io.parse_image(data)
        except io.FormatError:
            pass

    @given(st.binary(max_size=64))
    def test_flow_garbage(self, data):
        try:
            io.parse_flow(data)
        except io.FormatError:
            pass

    @given(st.integers(0, 200), st.binary(max_size=4))
    def test_mutated_valid_image(self, cut, junk):
        data = io.encode_image(io.ImageBuffer(np.arange(48, dtype=np.uint8).reshape(4, 4, 3)))
        try:
            io.parse_image(data[:cut] + junk)
        except io.FormatError:
            pass
