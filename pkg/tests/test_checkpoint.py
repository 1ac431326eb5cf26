import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from daqn import checkpoint
from daqn.checkpoint import CheckpointError


@pytest.fixture
def arrays(rng):
    return {"b": rng.standard_normal(3), "a.W": rng.standard_normal((4, 5)), "s": np.array(2.5)}


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, arrays, tmp_path):
        path = checkpoint.save(tmp_path / "m.ckpt", arrays, {"arch": "daqn"})
        back, meta = checkpoint.load(path)
        assert meta["arch"] == "daqn"
        assert set(back) == set(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_bytes_do_not_depend_on_insertion_order(self, arrays):
        rev = dict(reversed(list(arrays.items())))
        assert checkpoint.dumps(arrays, {"x": 1, "y": 2}) == checkpoint.dumps(rev, {"y": 2, "x": 1})

    def test_corrupted_payload_detected(self, arrays):
        blob = bytearray(checkpoint.dumps(arrays))
        blob[-3] ^= 0xFF
        with pytest.raises(CheckpointError):
            checkpoint.loads(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            checkpoint.loads(b"NOTACKPT" + b"\0" * 32)

    def test_truncated(self, arrays):
        with pytest.raises(CheckpointError):
            checkpoint.loads(checkpoint.dumps(arrays)[:-8])


names = st.text("abcdefghij.", min_size=1, max_size=8)
tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                     elements=st.floats(allow_nan=True, allow_infinity=True))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(names, tensors, min_size=1, max_size=5))
def test_round_trip_property(arrays):
    back, _ = checkpoint.loads(checkpoint.dumps(arrays, {"k": 1}))
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
