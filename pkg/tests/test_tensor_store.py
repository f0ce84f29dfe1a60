"""Container round trips, canonical byte output, and the corruption audit."""

import numpy as np
import pytest

from foley_adapter import tensor_store as ts
from foley_adapter.errors import CorruptionError, UnsupportedVersionError


def demo_tensors(rng):
    return {
        "alpha": rng.standard_normal((3, 4)).astype(np.float32),
        "beta": rng.standard_normal(7).astype(np.float32),
        "gamma_scalar": np.float32(2.5),
    }


class TestRoundTrip:
    def test_values_and_shapes_survive(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = demo_tensors(rng)
        path = tmp_path / "t.caft"
        ts.write_tensors(path, tensors)
        back, manifest = ts.read_tensors(path)
        assert manifest is None
        assert set(back) == set(tensors)
        for name in tensors:
            want = np.asarray(tensors[name], dtype=np.float32)
            assert back[name].dtype == np.float32
            assert back[name].shape == want.shape
            assert back[name].tobytes() == want.tobytes()

    def test_float64_input_is_stored_as_float32(self, tmp_path):
        path = tmp_path / "t.caft"
        ts.write_tensors(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
        back, _ = ts.read_tensors(path)
        assert back["x"].dtype == np.float32

    def test_manifest_round_trip_with_digest(self, tmp_path):
        path = tmp_path / "t.caft"
        manifest = {"kind": "demo", "nested": {"k": [1, 2]}}
        ts.write_tensors(path, {"x": np.ones(3, np.float32)}, manifest)
        back, got = ts.read_tensors(path)
        assert got["kind"] == "demo"
        assert got["nested"] == {"k": [1, 2]}
        assert ts.DIGEST_KEY in got
        assert np.array_equal(back["x"], np.ones(3))

    def test_write_is_canonical_across_dict_order(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = demo_tensors(rng)
        reordered = dict(reversed(list(tensors.items())))
        a, b = tmp_path / "a.caft", tmp_path / "b.caft"
        ts.write_tensors(a, tensors, {"m": 1})
        ts.write_tensors(b, reordered, {"m": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_empty_tensor_dict_is_legal(self, tmp_path):
        path = tmp_path / "t.caft"
        ts.write_tensors(path, {})
        back, _ = ts.read_tensors(path)
        assert back == {}


class TestCorruptionAudit:
    def write_demo(self, tmp_path, manifest=None):
        path = tmp_path / "t.caft"
        ts.write_tensors(
            path, demo_tensors(np.random.default_rng(2)), manifest
        )
        return path

    def test_bad_magic(self, tmp_path):
        path = self.write_demo(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError, match="magic"):
            ts.read_tensors(path)

    def test_future_version(self, tmp_path):
        path = self.write_demo(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError, match="99"):
            ts.read_tensors(path)

    def test_truncation(self, tmp_path):
        path = self.write_demo(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(CorruptionError):
            ts.read_tensors(path)

    def test_single_flipped_data_byte_with_manifest(self, tmp_path):
        """The stored digest catches byte flips inside float payloads."""
        path = self.write_demo(tmp_path, manifest={"m": 1})
        raw = bytearray(path.read_bytes())
        raw[30] ^= 0x01  # inside the first tensor's float data
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError, match="digest"):
            ts.read_tensors(path)

    def test_implausible_structure_fields(self, tmp_path):
        path = self.write_demo(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = (2**31).to_bytes(4, "little")  # name length field
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError, match="name length"):
            ts.read_tensors(path)

    def test_trailing_garbage(self, tmp_path):
        path = self.write_demo(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x01\x02")
        with pytest.raises(CorruptionError):
            ts.read_tensors(path)
