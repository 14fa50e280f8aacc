import numpy as np
import pytest

from cardiac_fat.pnm import PNMError, read_pnm, write_pnm


def test_p5_8bit_all_values_round_trip(tmp_path):
    a = np.arange(256, dtype=np.uint8).reshape(16, 16)
    write_pnm(tmp_path / "a.pgm", a)
    b, maxval, _ = read_pnm(tmp_path / "a.pgm")
    assert maxval == 255
    assert b.dtype == np.uint8
    assert np.array_equal(a, b)


def test_p5_16bit_all_values_round_trip(tmp_path):
    a = np.arange(65536, dtype=np.uint16).reshape(256, 256)
    write_pnm(tmp_path / "a.pgm", a)
    b, maxval, _ = read_pnm(tmp_path / "a.pgm")
    assert maxval == 65535
    assert np.array_equal(a, b)


def test_16bit_payload_is_big_endian(tmp_path):
    write_pnm(tmp_path / "a.pgm", np.array([[0x0102]], np.uint16))
    assert (tmp_path / "a.pgm").read_bytes().endswith(b"\x01\x02")


def test_p6_round_trip(tmp_path, rng):
    a = rng.integers(0, 256, (7, 5, 3)).astype(np.uint8)
    write_pnm(tmp_path / "a.ppm", a)
    b, _, _ = read_pnm(tmp_path / "a.ppm")
    assert b.shape == (7, 5, 3)
    assert np.array_equal(a, b)


def test_comments_survive(tmp_path):
    write_pnm(tmp_path / "a.pgm", np.zeros((2, 2), np.uint8), {"pixel_spacing": "0.7"})
    _, _, comments = read_pnm(tmp_path / "a.pgm")
    assert comments["pixel_spacing"] == "0.7"


def test_header_with_interleaved_comment(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n# hello there\n2 # w\n1\n255\n\x05\x06")
    px, _, _ = read_pnm(tmp_path / "a.pgm")
    assert px.tolist() == [[5, 6]]


def test_unsupported_maxval(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n100\n" + bytes(4))
    with pytest.raises(PNMError, match="unsupported maxval"):
        read_pnm(tmp_path / "a.pgm")


@pytest.mark.parametrize(
    "payload",
    [b"P5\n2 2\n255\n\x00", b"P5\n2 2\n", b"P3\n1 1\n255\n\x00", b"P5\n2 x\n255\n\x00\x00", b"P5\n0 2\n255\n"],
)
def test_malformed_files(tmp_path, payload):
    (tmp_path / "a.pgm").write_bytes(payload)
    with pytest.raises(PNMError):
        read_pnm(tmp_path / "a.pgm")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(PNMError):
        write_pnm(tmp_path / "a.pgm", np.zeros((2, 2), np.float32))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_pnm(tmp_path / "a.pgm", np.zeros((2, 2), np.uint8))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.pgm"]
