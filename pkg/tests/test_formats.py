import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deqei.formats import (BadMagic, Checkpoint, ExtentOverflow, FormatError, Truncated, UnsupportedVersion,
                           decode_checkpoint, decode_img1, encode_checkpoint, encode_img1, read_checkpoint,
                           read_img1, read_pgm, write_checkpoint, write_img1, write_pgm)


@settings(max_examples=25, deadline=None)
@given(shape=st.tuples(st.integers(0, 3), st.integers(1, 2), st.integers(1, 5), st.integers(1, 5)),
       seed=st.integers(0, 2**31))
def test_img1_round_trip_bit_exact(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    buf = encode_img1(arr)
    assert len(buf) == 20 + 4 * arr.size
    assert decode_img1(buf).tobytes() == arr.tobytes()


def test_img1_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((3, 1, 4, 4)).astype(np.float32)
    write_img1(tmp_path / "d.img1", arr)
    assert read_img1(tmp_path / "d.img1").tobytes() == arr.tobytes()
    assert not list(tmp_path.glob(".*.tmp"))


def test_img1_errors():
    good = encode_img1(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(BadMagic):
        decode_img1(b"IMG2" + good[4:])
    with pytest.raises(Truncated):
        decode_img1(good[:-1])
    with pytest.raises(Truncated):
        decode_img1(good[:10])
    with pytest.raises(FormatError):
        decode_img1(good + b"\0")
    with pytest.raises(ExtentOverflow):
        decode_img1(b"IMG1" + struct.pack("<4I", 1, 1, 1 << 20, 1))
    assert issubclass(Truncated, ValueError)


def _ckpt(seed=0):
    rng = np.random.default_rng(seed)
    return Checkpoint('{"seed": 1}', {"conv0.weight": rng.standard_normal((2, 1, 3, 3)),
                                      "buffer/sn_u0": rng.standard_normal(2)},
                      {"t": np.array(7.0), "m/conv0.weight": rng.standard_normal((2, 1, 3, 3))}, 42)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = _ckpt()
    write_checkpoint(tmp_path / "c.deq1", ck)
    back = read_checkpoint(tmp_path / "c.deq1")
    assert back.config_text == ck.config_text and back.rng_position == 42
    for a, b in ((ck.params, back.params), (ck.adam, back.adam)):
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() and a[k].shape == b[k].shape for k in a)
    assert encode_checkpoint(back) == encode_checkpoint(ck)


def test_checkpoint_errors():
    buf = encode_checkpoint(_ckpt())
    with pytest.raises(BadMagic):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(UnsupportedVersion):
        decode_checkpoint(buf[:4] + struct.pack("<I", 2) + buf[8:])
    for cut in (5, 20, len(buf) - 1):
        with pytest.raises(Truncated):
            decode_checkpoint(buf[:cut])


def test_pgm_round_trip(tmp_path):
    img = np.linspace(-0.5, 1.5, 12).reshape(3, 4)
    write_pgm(tmp_path / "x.pgm", img, comment="config_hash=abc")
    px = read_pgm(tmp_path / "x.pgm")
    assert px.shape == (3, 4) and px[0, 0] == 0 and px[-1, -1] == 255
    assert b"config_hash=abc" in (tmp_path / "x.pgm").read_bytes()
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "y.pgm", np.zeros((2, 2, 2, 2)))
