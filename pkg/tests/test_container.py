"""Binary artifact container: layout, digests, corruption detection."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sidrec import container
from sidrec.core import DataError, SemanticScheme, StalenessError


SCHEME = SemanticScheme(m=2, M=4, d=4)


def _sample_arrays():
    return {
        "weights": np.arange(12, dtype=np.float64).reshape(3, 4),
        "codes": np.asarray([[1, 2], [3, 0]], dtype=np.uint32),
        "lengths": np.asarray([5, 7], dtype=np.int64),
    }


def test_round_trip_preserves_values(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "test-magic", SCHEME, _sample_arrays(),
                              meta={"note": "hello"})
    scheme, arrays, meta = container.read_container(path, "test-magic")
    assert scheme == SCHEME
    assert meta["note"] == "hello"
    np.testing.assert_allclose(arrays["weights"],
                               _sample_arrays()["weights"].astype(np.float32))
    np.testing.assert_array_equal(arrays["codes"], _sample_arrays()["codes"])
    np.testing.assert_array_equal(arrays["lengths"], _sample_arrays()["lengths"])


def test_floats_stored_as_float32_little_endian(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "test-magic", None,
                              {"x": np.asarray([1.5, -2.25])})
    _, arrays, _ = container.read_container(path, "test-magic")
    assert arrays["x"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(arrays["x"], np.asarray([1.5, -2.25], dtype="<f4"))


def test_header_is_json_with_magic_version_offsets(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "test-magic", SCHEME, _sample_arrays())
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[:4], "little")
    header = json.loads(raw[4:4 + header_len])
    assert header["magic"] == "test-magic"
    assert header["version"] == container.FORMAT_VERSION
    assert header["scheme"] == SCHEME.to_dict()
    names = [e["name"] for e in header["arrays"]]
    assert names == sorted(names)
    offsets = [e["offset"] for e in header["arrays"]]
    assert offsets[0] == 0
    for prev, entry in zip(header["arrays"], header["arrays"][1:]):
        assert entry["offset"] == prev["offset"] + prev["nbytes"]


def test_write_returns_recorded_digest(tmp_path):
    path = tmp_path / "artifact.bin"
    digest = container.write_container(path, "test-magic", None,
                                       {"x": np.zeros(3)})
    _, _, meta = container.read_container(path, "test-magic")
    assert meta["digest"] == digest
    assert len(digest) == 16  # 64-bit hash, hex


def test_digest_ignores_its_own_field():
    arrays = {"x": np.zeros(2, dtype=np.float32)}
    a = container.content_digest("m", None, {"k": 1}, arrays)
    b = container.content_digest("m", None, {"k": 1, "digest": "junk"}, arrays)
    assert a == b


def test_digest_sensitive_to_payload_and_meta():
    base = container.content_digest("m", None, {}, {"x": np.zeros(2, dtype=np.float32)})
    assert base != container.content_digest(
        "m", None, {}, {"x": np.ones(2, dtype=np.float32)})
    assert base != container.content_digest(
        "m", None, {"extra": 1}, {"x": np.zeros(2, dtype=np.float32)})
    assert base != container.content_digest(
        "other", None, {}, {"x": np.zeros(2, dtype=np.float32)})


def test_missing_file_raises(tmp_path):
    with pytest.raises(DataError, match="not found"):
        container.read_container(tmp_path / "nope.bin", "test-magic")


def test_wrong_magic_raises(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "magic-a", None, {"x": np.zeros(1)})
    with pytest.raises(DataError, match="magic"):
        container.read_container(path, "magic-b")


def test_truncated_file_raises(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "test-magic", None, {"x": np.zeros(8)})
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 10])
    with pytest.raises(DataError):
        container.read_container(path, "test-magic")


def test_flipped_payload_byte_fails_digest_check(tmp_path):
    path = tmp_path / "artifact.bin"
    container.write_container(path, "test-magic", None,
                              {"x": np.arange(16, dtype=np.float64)})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="digest"):
        container.read_container(path, "test-magic")


def test_write_is_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    container.write_container(a, "test-magic", SCHEME, _sample_arrays(), {"k": 2})
    container.write_container(b, "test-magic", SCHEME, _sample_arrays(), {"k": 2})
    assert a.read_bytes() == b.read_bytes()


def test_require_digest_accepts_match():
    container.require_digest({"up": "abc"}, "up", "abc", "thing")


def test_require_digest_raises_on_mismatch():
    with pytest.raises(StalenessError):
        container.require_digest({"up": "abc"}, "up", "def", "thing")


@settings(max_examples=25)
@given(
    floats=st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=20),
    uints=st.lists(st.integers(0, 2**16), min_size=1, max_size=20),
)
def test_round_trip_property(tmp_path_factory, floats, uints):
    path = tmp_path_factory.mktemp("prop") / "artifact.bin"
    arrays = {
        "f": np.asarray(floats, dtype=np.float32),
        "u": np.asarray(uints, dtype=np.uint32),
    }
    container.write_container(path, "prop-magic", None, arrays)
    _, loaded, _ = container.read_container(path, "prop-magic")
    np.testing.assert_array_equal(loaded["f"], arrays["f"])
    np.testing.assert_array_equal(loaded["u"], arrays["u"])
