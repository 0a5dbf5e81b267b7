import struct

import numpy as np
import pytest

from wafertex.formats import (
    FormatError,
    RleMask,
    atomic_write,
    decode_pfm,
    decode_pgm,
    decode_tensor,
    encode_pfm,
    encode_pgm,
    encode_tensor,
    format_float,
    load_named_arrays,
    parse_config,
    read_image,
    render_config,
    rle_encode,
    rle_from_token,
    rle_to_token,
    save_named_arrays,
    write_image,
)
from wafertex.tensor import Tensor


class TestPfm:
    def test_round_trip_bit_identical(self):
        arr = np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)
        back = decode_pfm(encode_pfm(arr))
        assert np.array_equal(back, arr)
        assert back.dtype == np.float32

    def test_little_endian_fixture(self):
        # hand-built: 2x1 image, scale -1.0, bottom row first
        payload = struct.pack("<2f", 3.5, -1.25)
        data = b"Pf\n1 2\n-1.0\n" + payload
        arr = decode_pfm(data)
        # file rows are bottom-to-top: first stored value is the bottom row
        assert arr[1, 0] == 3.5 and arr[0, 0] == -1.25

    def test_big_endian_fixture(self):
        payload = struct.pack(">2f", 3.5, -1.25)
        data = b"Pf\n1 2\n1.0\n" + payload
        arr = decode_pfm(data)
        assert arr[1, 0] == 3.5 and arr[0, 0] == -1.25

    def test_color_pfm_rejected(self):
        with pytest.raises(FormatError, match="grayscale"):
            decode_pfm(b"PF\n1 1\n-1.0\n" + b"\0" * 12)

    def test_truncated_payload_offset(self):
        data = b"Pf\n2 2\n-1.0\n" + b"\0" * 7
        with pytest.raises(FormatError, match="byte offset 12"):
            decode_pfm(data)

    def test_file_round_trip(self, tmp_path):
        t = Tensor.random_uniform(1, 4, 6, seed=1)
        path = tmp_path / "x.pfm"
        write_image(path, t, "pfm")
        assert np.array_equal(read_image(path).data, t.data)


class TestPgm:
    def test_round_trip_8bit(self):
        arr = np.arange(12).reshape(3, 4) % 256
        assert np.array_equal(decode_pgm(encode_pgm(arr, 255)), arr)

    def test_round_trip_16bit(self):
        arr = (np.arange(12).reshape(3, 4) * 4000) % 65536
        back = decode_pgm(encode_pgm(arr, 65535))
        assert np.array_equal(back, arr)
        assert back.dtype == np.uint16

    def test_all_128_fixture(self):
        data = b"P5\n2 2\n255\n" + bytes([128] * 4)
        assert np.array_equal(decode_pgm(data), np.full((2, 2), 128))

    def test_header_comments(self):
        data = b"P5\n# a comment\n2 1 255\n" + bytes([7, 9])
        assert np.array_equal(decode_pgm(data), np.array([[7, 9]]))

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="P5"):
            decode_pgm(b"P6\n1 1\n255\n\x00")

    def test_truncated_payload_has_offset(self):
        with pytest.raises(FormatError, match="offset"):
            decode_pgm(b"P5\n4 4\n255\n" + bytes(3))

    def test_non_integer_values_rejected(self):
        with pytest.raises(ValueError, match="integers"):
            encode_pgm(np.array([[0.5]]), 255)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="integers"):
            encode_pgm(np.array([[300]]), 255)

    def test_pgm_read_as_tensor(self, tmp_path):
        path = tmp_path / "m.pgm"
        atomic_write(path, encode_pgm(np.array([[0, 255], [128, 1]]), 255))
        t = read_image(path)
        assert t.shape == (1, 2, 2)
        assert t.data[0, 0, 1] == 255.0


class TestRle:
    def test_all_zero(self):
        m = rle_encode(np.zeros((2, 2), dtype=bool))
        assert m.runs == (4,)

    def test_all_one_leading_zero(self):
        m = rle_encode(np.ones((2, 2), dtype=bool))
        assert m.runs == (0, 4)

    @pytest.mark.parametrize("seed", range(100))
    def test_round_trip(self, seed):
        mask = np.random.default_rng(seed).uniform(size=(16, 16)) > 0.5
        assert np.array_equal(rle_encode(mask).decode(), mask)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(ValueError, match="total"):
            RleMask(2, 2, (3,))

    def test_interior_zero_run_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            RleMask(2, 2, (1, 0, 3))

    def test_token_round_trip(self):
        mask = np.random.default_rng(3).uniform(size=(5, 9)) > 0.3
        m = rle_encode(mask)
        assert rle_from_token(rle_to_token(m)) == m

    def test_malformed_token(self):
        with pytest.raises(FormatError, match="rle"):
            rle_from_token("5x5")


class TestTensorContainers:
    def test_tensor_round_trip(self):
        t = Tensor.random_uniform(3, 4, 5, seed=2)
        assert np.array_equal(decode_tensor(encode_tensor(t)).data, t.data)

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(b"NOPE\n1 1 1\n" + b"\0" * 4)

    def test_named_arrays_round_trip(self, tmp_path):
        arrays = {
            "local.weights": np.random.default_rng(0).standard_normal((2, 1, 3, 3)).astype(np.float32),
            "local.bias": np.zeros(2, dtype=np.float32),
        }
        path = tmp_path / "w.wtb"
        save_named_arrays(path, arrays)
        loaded = load_named_arrays(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])


class TestConfig:
    def test_parse_basics(self):
        cfg = parse_config("# c\nalpha = 1.5\n\nname=x\n")
        assert cfg == {"alpha": "1.5", "name": "x"}

    def test_duplicate_key(self):
        with pytest.raises(FormatError, match="duplicate"):
            parse_config("a=1\na=2\n")

    def test_missing_equals(self):
        with pytest.raises(FormatError, match="key=value"):
            parse_config("just a line\n")

    def test_render_round_trip(self):
        cfg = {"a": "1", "b": "x y"}
        assert parse_config(render_config(cfg)) == cfg


class TestMisc:
    def test_format_float_six_decimals(self):
        assert format_float(5 / 6) == "0.833333"
        assert format_float(1.0) == "1.000000"

    def test_atomic_write_no_temp_left(self, tmp_path):
        path = tmp_path / "out.bin"
        atomic_write(path, b"abc")
        assert path.read_bytes() == b"abc"
        leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".tmp")]
        assert leftovers == []
