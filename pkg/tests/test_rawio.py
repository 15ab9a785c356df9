import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctgan_sim.errors import HeaderMismatch, MalformedFile
from ctgan_sim.rawio import decode_raw, encode_raw, read_raw, write_raw
from ctgan_sim.volume import Volume


@settings(max_examples=40, deadline=None)
@given(arrays(np.int16, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(-1024, 3071)),
       st.tuples(*[st.floats(0.1, 5.0)] * 3))
def test_roundtrip(voxels, spacing):
    v = Volume(voxels, spacing, "s-1")
    assert decode_raw(encode_raw(v)) == v


def test_file_roundtrip(tmp_path):
    v = Volume(np.arange(24).reshape(2, 3, 4), (0.7, 0.7, 2.5), "abc")
    write_raw(v, tmp_path / "v.raw")
    assert read_raw(tmp_path / "v.raw") == v


def test_x_fastest_layout():
    v = Volume(np.arange(8).reshape(2, 2, 2), (1, 1, 1))
    payload = encode_raw(v).split(b"\n\n", 1)[1]
    assert np.frombuffer(payload, "<i2").tolist() == [0, 4, 2, 6, 1, 5, 3, 7]


def test_truncated_payload():
    data = encode_raw(Volume(np.zeros((3, 3, 3)), (1, 1, 1)))
    with pytest.raises(HeaderMismatch):
        decode_raw(data[:-2])


def test_constant_from_hand_header():
    data = b"dims=2,2,2\nspacing=1,1,1\ntype=int16le\n\n" + np.full(8, -1000, "<i2").tobytes()
    v = decode_raw(data)
    assert v.dims == (2, 2, 2) and (v.voxels == -1000).all()


@pytest.mark.parametrize("data", [
    b"",
    b"no terminator",
    b"dims=2,2\nspacing=1,1,1\ntype=int16le\n\n",
    b"dims=1,1,1\nspacing=1,1,1\ntype=float32\n\n\x00\x00",
    b"dims=1,1,1\nspacing=1,-1,1\ntype=int16le\n\n\x00\x00",
    b"garbage\n\n\x00\x00",
])
def test_malformed(data):
    with pytest.raises((MalformedFile, HeaderMismatch)):
        decode_raw(data)
