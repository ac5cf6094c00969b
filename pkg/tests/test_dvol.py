import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dramseg.dvol import MAGIC, Volume, read_dvol, write_dvol


def test_round_trip_float32(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.normal(size=(5, 7, 3)).astype(np.float32), (1.4, 1.4, 1.4))
    p = tmp_path / "v.dvol"
    write_dvol(p, vol)
    back = read_dvol(p)
    assert back.data.dtype == np.float32
    assert back.spacing == pytest.approx(vol.spacing)
    np.testing.assert_array_equal(back.data, vol.data)


def test_round_trip_uint8(tmp_path):
    vol = Volume(np.arange(24, dtype=np.uint8).reshape(2, 3, 4), (1.0, 2.0, 0.5))
    p = tmp_path / "v.dvol"
    write_dvol(p, vol)
    back = read_dvol(p)
    assert back.data.dtype == np.uint8
    np.testing.assert_array_equal(back.data, vol.data)


def test_write_is_byte_deterministic(tmp_path):
    data = np.random.default_rng(3).normal(size=(4, 4, 4)).astype(np.float32)
    hashes = set()
    for name in ("a.dvol", "b.dvol"):
        write_dvol(tmp_path / name, Volume(data.copy(), (1.4, 1.4, 1.4)))
        hashes.add(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    assert len(hashes) == 1


def test_header_magic(tmp_path):
    p = tmp_path / "v.dvol"
    write_dvol(p, Volume(np.zeros((1, 1, 1), dtype=np.uint8), (1, 1, 1)))
    assert p.read_bytes()[:6] == MAGIC


def test_rejects_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2), dtype=np.float32), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), dtype=np.int32), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, -1, 1))
    p = tmp_path / "junk.dvol"
    p.write_bytes(b"not a volume at all")
    with pytest.raises(ValueError):
        read_dvol(p)


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "v.dvol"
    write_dvol(p, Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_dvol(p)


@settings(max_examples=25, deadline=None)
@given(
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    seed=st.integers(0, 2**31 - 1),
    as_uint8=st.booleans(),
)
def test_round_trip_property(tmp_path_factory, dims, seed, as_uint8):
    rng = np.random.default_rng(seed)
    if as_uint8:
        data = rng.integers(0, 256, size=dims, dtype=np.uint8)
    else:
        data = rng.normal(size=dims).astype(np.float32)
    p = tmp_path_factory.mktemp("dvol") / "v.dvol"
    write_dvol(p, Volume(data, (0.7, 1.4, 2.8)))
    np.testing.assert_array_equal(read_dvol(p).data, data)
