import struct

import numpy as np
import pytest

from radiomap import rmt


class TestCodec:
    @pytest.mark.parametrize("dtype,code", [(np.float32, 1), (np.float64, 2)])
    def test_header_layout(self, dtype, code):
        a = np.arange(6, dtype=dtype).reshape(2, 3)
        blob = rmt.encode(a)
        assert blob[:4] == b"RMT1"
        assert blob[4] == code and blob[5] == 2
        assert struct.unpack("<2I", blob[6:14]) == (2, 3)
        assert blob[14:] == a.astype(np.dtype(dtype).newbyteorder("<")).tobytes()

    def test_roundtrip(self, tmp_path, rng):
        a = rng.standard_normal((3, 4, 5))
        rmt.save(tmp_path / "a.rmt", a)
        b = rmt.load(tmp_path / "a.rmt")
        assert b.dtype == np.float64
        np.testing.assert_array_equal(a, b)

    def test_scalar_and_empty(self):
        np.testing.assert_array_equal(rmt.decode(rmt.encode(np.array(3.5))), np.array(3.5))
        assert rmt.decode(rmt.encode(np.zeros((0, 4)))).shape == (0, 4)

    def test_integer_input_is_stored_as_float(self):
        out = rmt.decode(rmt.encode(np.array([1, 2, 3])))
        assert out.dtype == np.float64

    @pytest.mark.parametrize(
        "blob",
        [b"XXXX\x02\x01\x01\x00\x00\x00" + b"\x00" * 8, b"RMT1\x07\x01\x01\x00\x00\x00", b"RMT1\x02", b"RMT1\x02\x01\x02\x00\x00\x00" + b"\x00" * 8],
        ids=["magic", "dtype", "truncated-header", "payload-size"],
    )
    def test_bad_input(self, blob):
        with pytest.raises(rmt.RMTError):
            rmt.decode(blob)

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        rmt.atomic_write_bytes(tmp_path / "x.bin", b"abc")
        rmt.atomic_write_bytes(tmp_path / "x.bin", b"def")
        assert (tmp_path / "x.bin").read_bytes() == b"def"
        assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
