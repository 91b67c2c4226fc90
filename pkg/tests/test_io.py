from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamvit.config import desk_config
from streamvit.encoder import EncoderState, FrameFeatures, encode_sequence
from streamvit.errors import FormatError
from streamvit.io import (FeatureDump, blob_center, decode_sequence_bytes, encode_sequence_bytes, gen_sequence,
                          read_features, read_sequence, write_features, write_sequence)


def test_header_layout():
    data = encode_sequence_bytes(np.zeros((2, 3, 4, 5), np.float32))
    assert data[:4] == b"SVSQ"
    assert struct.unpack("<5I", data[4:24]) == (1, 2, 3, 4, 5)
    assert len(data) == 24 + 4 * 2 * 3 * 4 * 5


def test_sequence_round_trip(tmp_path):
    clip = gen_sequence(3, 4, 16, 24, "noise")
    write_sequence(tmp_path / "s.bin", clip)
    np.testing.assert_array_equal(read_sequence(tmp_path / "s.bin"), clip)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.just(3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_sequence_round_trip_property(clip):
    np.testing.assert_array_equal(decode_sequence_bytes(encode_sequence_bytes(clip)), clip)


def test_generation_is_deterministic_bytes():
    a = encode_sequence_bytes(gen_sequence(7, 3, 32, 32, "moving-blob"))
    b = encode_sequence_bytes(gen_sequence(7, 3, 32, 32, "moving-blob"))
    assert a == b
    assert a != encode_sequence_bytes(gen_sequence(8, 3, 32, 32, "moving-blob"))


def test_blob_moves_by_offset():
    clip = gen_sequence(5, 2, 32, 32, "moving-blob", offset=(2, 3))
    peaks = [np.unravel_index(np.argmax(f.sum(axis=0)), (32, 32)) for f in clip]
    assert ((peaks[1][0] - peaks[0][0]) % 32, (peaks[1][1] - peaks[0][1]) % 32) == (2, 3)
    assert blob_center(30, 31, 1, (2, 3), 32, 32) == (0, 2)


def test_noise_statistics():
    clip = gen_sequence(0, 8, 32, 32, "noise")
    assert abs(clip.mean()) < 0.05
    assert abs(clip.var() - 1.0) < 0.05


def test_gen_rejects_bad_arguments():
    with pytest.raises(ValueError):
        gen_sequence(0, 2, 8, 8, "stripes")
    with pytest.raises(ValueError):
        gen_sequence(0, 0, 8, 8)


def _valid():
    return bytearray(encode_sequence_bytes(np.ones((1, 3, 2, 2), np.float32)))


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b.__setitem__(slice(0, 4), b"XXXX"), "bad magic .* offset 0"),
    (lambda b: b.__setitem__(slice(4, 8), struct.pack("<I", 2)), "version 2 at offset 4"),
    (lambda b: b.__setitem__(slice(12, 16), struct.pack("<I", 4)), "channels must be 3.* offset 12"),
    (lambda b: b.__setitem__(slice(8, 12), struct.pack("<I", 0)), "empty sequence .* offset 8"),
    (lambda b: b.extend(b"\0\0\0\0"), "trailing bytes at offset 72"),
    (lambda b: b.__delitem__(slice(60, None)), "truncated at offset 24"),
    (lambda b: b.__setitem__(slice(24, 28), struct.pack("<f", float("nan"))), "non-finite value at offset 24"),
])
def test_malformed_sequences_name_offset(mutate, match):
    data = _valid()
    mutate(data)
    with pytest.raises(FormatError, match=match):
        decode_sequence_bytes(bytes(data))


def test_short_header():
    with pytest.raises(FormatError, match="offset"):
        decode_sequence_bytes(b"SVSQ\x01\x00")


def test_feature_dump_round_trip(tmp_path):
    cfg = desk_config()
    clip = gen_sequence(1, 3, 32, 32)
    feats = encode_sequence(EncoderState.create(cfg), list(clip))
    write_features(tmp_path / "f.bin", feats)
    dump = read_features(tmp_path / "f.bin")
    assert dump.tokens.shape == (3, 8, 8, 32)
    np.testing.assert_array_equal(dump.tokens, np.stack([f.tokens for f in feats]).astype(np.float32))
    assert sorted(dump.pyramid) == [4, 8, 16, 32]
    for s in (4, 8, 16, 32):
        assert dump.pyramid[s].shape == (3, 32, 32 // s, 32 // s)
        np.testing.assert_array_equal(dump.pyramid[s][2], feats[2].pyramid[s].astype(np.float32))


def test_feature_dump_without_pyramid():
    feats = [FrameFeatures(np.full((2, 3, 4), t, np.float32)) for t in range(2)]
    data = FeatureDump.from_features(feats).to_bytes()
    assert data[:4] == b"SVFT"
    back = FeatureDump.from_bytes(data)
    assert back.pyramid is None
    np.testing.assert_array_equal(back.tokens[1], feats[1].tokens)
    with pytest.raises(FormatError, match="truncated"):
        FeatureDump.from_bytes(data[:-2])
    with pytest.raises(ValueError):
        FeatureDump.from_features([])
