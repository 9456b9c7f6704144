import numpy as np
import pytest

from imcnet.encoder import STRIDES, Encoder, EncoderConfig, receptive_fields
from imcnet.errors import ShapeError


def test_level_shapes_64(rng):
    enc = Encoder((4, 6, 8, 8), rng=rng)
    pyr = enc(rng.random((2, 3, 64, 64)).astype(np.float32))
    assert {lvl: pyr[lvl].shape for lvl in (2, 3, 4, 5)} == {
        2: (2, 4, 16, 16), 3: (2, 6, 8, 8), 4: (2, 8, 4, 4), 5: (2, 8, 2, 2)}


def test_480_input_gives_15x15_level5():
    assert 480 // STRIDES[5] == 15
    assert [480 // STRIDES[l] for l in (2, 3, 4, 5)] == [120, 60, 30, 15]


def test_480_forward_shape():
    enc = Encoder((2, 2, 2, 2))
    assert enc(np.zeros((1, 3, 480, 480), np.float32))[5].shape == (1, 2, 15, 15)


def test_identical_frames_identical_pyramids(rng):
    enc = Encoder((4, 6, 8, 8), rng=rng)
    f = rng.random((1, 3, 32, 32)).astype(np.float32)
    pyr = enc(np.concatenate([f, f]))
    again = enc(f)
    for lvl in (2, 3, 4, 5):
        np.testing.assert_array_equal(pyr[lvl][0], pyr[lvl][1])
        np.testing.assert_array_equal(pyr[lvl][:1], again[lvl])


def test_receptive_fields_strictly_grow():
    rf = receptive_fields()
    assert rf[2] < rf[3] < rf[4] < rf[5]


def test_rejects_bad_sizes():
    with pytest.raises(ShapeError):
        Encoder()(np.zeros((1, 3, 48, 64), np.float32))
    with pytest.raises(ShapeError):
        EncoderConfig(channels=(32, 16, 48, 64))
