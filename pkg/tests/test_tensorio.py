import numpy as np
import pytest

from congrobust import tensorio
from congrobust.tensorio import TensorFormatError


def test_roundtrip(tmp_path, rng):
    for shape in [(3,), (4, 5), (2, 3, 4), (0, 2)]:
        a = rng.normal(size=shape)
        p = tmp_path / "a.ten"
        tensorio.save(p, a)
        b = tensorio.load(p)
        assert b.shape == a.shape and np.array_equal(a, b)


def test_layout_of_bytes():
    buf = tensorio.dumps(np.array([[1.0, 2.0]]))
    assert buf.startswith(b"TEN 1 2\n")
    assert buf[8:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


@pytest.mark.parametrize("buf,where", [
    (b"TEN 2 2", "byte 0"),
    (b"XYZ 2\n" + bytes(16), "byte 0"),
    (b"TEN 2 a\n" + bytes(16), "byte 4"),
    (b"TEN 2\n" + bytes(15), "byte 6"),
])
def test_corrupt_inputs(buf, where):
    with pytest.raises(TensorFormatError, match=where):
        tensorio.loads(buf)
