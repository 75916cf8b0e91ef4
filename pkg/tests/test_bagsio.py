import struct

import numpy as np
import pytest

from bagsfit.bagsio import (
    FormatError,
    read_container,
    read_label_map,
    read_range_image,
    write_container,
    write_label_map,
    write_range_image,
)
from bagsfit.classes import PrimitiveClass
from bagsfit.rangeimage import BagsScheme, Intrinsics, LabelMap, RangeImage
from bagsfit.scene import look_at
from bagsfit.segmentation import ProbabilityMaps, read_probability_maps, write_probability_maps


def _img(rng):
    depth = rng.uniform(0.5, 4.0, (6, 7)).astype(np.float32)
    depth[2, 3] = 0
    return RangeImage(depth, Intrinsics(100.0, 101.0, 3.0, 2.5), look_at([1, 2, 3], [4, 5, 6]))


def test_range_image_round_trip(tmp_path):
    img = _img(np.random.default_rng(0))
    write_range_image(tmp_path / "a.bags", img)
    back = read_range_image(tmp_path / "a.bags")
    np.testing.assert_array_equal(back.depth, img.depth)
    assert back.intrinsics == img.intrinsics
    np.testing.assert_array_equal(back.camera_pose, img.camera_pose)


def test_label_map_round_trip(tmp_path):
    cls = np.array([[1, 2, 0], [5, 4, 3]], dtype=np.uint8)
    inst = np.array([[7, 70000, 0], [2, 3, 4]], dtype=np.uint32)
    write_label_map(tmp_path / "l.bags", LabelMap(cls, inst))
    back = read_label_map(tmp_path / "l.bags")
    np.testing.assert_array_equal(back.class_id, cls)
    np.testing.assert_array_equal(back.instance_id, inst)
    assert cls[0, 2] == PrimitiveClass.INVALID


def test_probability_maps_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.random((6, 4, 5))
    m /= m.sum(axis=0)
    valid = np.ones((4, 5), bool)
    valid[0, 0] = False
    m[:, 0, 0] = 0
    maps = ProbabilityMaps(m, BagsScheme.K6, valid)
    write_probability_maps(tmp_path / "p.bags", maps)
    back = read_probability_maps(tmp_path / "p.bags")
    assert back.scheme == BagsScheme.K6 and back.multinomial
    np.testing.assert_allclose(back.maps, m, atol=1e-7)
    np.testing.assert_array_equal(back.valid, valid)


def test_header_layout(tmp_path):
    write_container(tmp_path / "x.bags", "TEST", [("AAAA", np.zeros((2, 3), np.uint8))], [1.5])
    buf = (tmp_path / "x.bags").read_bytes()
    assert buf[:4] == b"BAGS"
    assert struct.unpack_from("<III", buf, 4) == (1, 3, 2)
    assert buf[16:20] == b"TEST"
    assert struct.unpack_from("<I", buf, 20) == (1,)
    assert buf[24:32] == b"AAAAB\0\0\0"
    assert struct.unpack_from("<Id", buf, 32) == (1, 1.5)
    assert len(buf) == 44 + 6


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "a.bags"
    write_range_image(p, _img(np.random.default_rng(2)))
    good = p.read_bytes()
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="magic"):
        read_container(p)
    p.write_bytes(good[:-10])
    with pytest.raises(FormatError, match="truncated"):
        read_container(p)
    p.write_bytes(good)
    with pytest.raises(FormatError, match="expected LABL"):
        read_label_map(p)
    p.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(FormatError, match="version"):
        read_container(p)


def test_writer_validates_channels(tmp_path):
    with pytest.raises(ValueError):
        write_container(tmp_path / "x", "AB", [("AAAA", np.zeros((2, 2), np.uint8))])
    with pytest.raises(ValueError):
        write_container(tmp_path / "x", "ABCD", [("AAAA", np.zeros((2, 2), np.int64))])
    with pytest.raises(ValueError):
        write_container(tmp_path / "x", "ABCD", [("AAAA", np.zeros((2, 2))), ("BBBB", np.zeros((3, 2)))])
