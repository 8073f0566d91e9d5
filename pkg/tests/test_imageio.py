import numpy as np
import pytest

from morel.errors import CorruptRecord
from morel.imageio import read_ppm, to_uint8, write_ppm


def test_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert read_ppm(tmp_path / "a.ppm").tobytes() == img.tobytes()


def test_header_comments(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert read_ppm(tmp_path / "c.ppm").tolist() == [[[1, 2, 3], [4, 5, 6]]]


def test_quantization_clamps():
    assert to_uint8(np.array([-0.2, 0.0, 0.5, 1.0, 3.0])).tolist() == [0, 0, 128, 255, 255]


@pytest.mark.parametrize("blob", [b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x01", b"P6\n2"])
def test_bad_files(tmp_path, blob):
    (tmp_path / "b.ppm").write_bytes(blob)
    with pytest.raises(CorruptRecord):
        read_ppm(tmp_path / "b.ppm")
