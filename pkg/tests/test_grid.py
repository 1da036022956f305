import numpy as np
import pytest

from dirsynth.errors import InvalidArgumentError
from dirsynth.grid import LabelMap, Volume, build_pyramid, downsample, downsample_labels


def test_volume_is_read_only_and_float():
    v = Volume(np.ones((2, 3, 4), dtype=np.int32))
    assert v.data.dtype == np.float64
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 5


@pytest.mark.parametrize("bad", [np.zeros((2, 2)), np.full((2, 2, 2), np.nan)])
def test_volume_rejects_bad_data(bad):
    with pytest.raises(InvalidArgumentError):
        Volume(bad)


def test_volume_rejects_bad_spacing():
    with pytest.raises(InvalidArgumentError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))


def test_labelmap_rejects_fractional_and_negative():
    with pytest.raises(InvalidArgumentError):
        LabelMap(np.full((2, 2, 2), 0.5))
    with pytest.raises(InvalidArgumentError):
        LabelMap(np.full((2, 2, 2), -1))


def test_labelmap_label_set_and_one_hot():
    lm = LabelMap(np.array([0, 1, 1, 3, 0, 3, 3, 1]).reshape(2, 2, 2))
    assert lm.label_set == (0, 1, 3)
    assert lm.foreground_labels == (1, 3)
    oh = lm.one_hot((1, 3))
    assert oh.shape == (2, 2, 2, 2)
    assert np.array_equal(oh.sum(0), (lm.labels > 0).astype(float))


def test_downsample_block_mean_and_spacing():
    data = np.arange(64, dtype=float).reshape(4, 4, 4)
    d = downsample(Volume(data, spacing=(1, 2, 3)), 2)
    assert d.dims == (2, 2, 2)
    assert d.spacing == (2.0, 4.0, 6.0)
    assert d.data[0, 0, 0] == data[:2, :2, :2].mean()


def test_downsample_partial_blocks():
    d = downsample(Volume(np.ones((5, 5, 5))), 2)
    assert d.dims == (3, 3, 3)
    assert np.all(d.data == 1.0)


def test_downsample_mask_majority_tie_goes_to_foreground():
    mask = np.zeros((2, 2, 2), bool)
    mask[0] = True  # exactly half
    d = downsample(Volume(np.zeros((2, 2, 2)), mask=mask), 2)
    assert d.mask[0, 0, 0]


def test_modal_labels_tie_break_smallest():
    labels = np.zeros((2, 2, 2), int)
    labels[0] = 5
    labels[1] = 2
    d = downsample_labels(LabelMap(labels), 2)
    assert d.labels[0, 0, 0] == 2


def test_modal_labels_independent_of_label_values_order():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, (6, 6, 6))
    perm = np.array([0, 3, 1, 2])
    a = downsample_labels(LabelMap(labels), 3).labels
    b = downsample_labels(LabelMap(perm[labels]), 3).labels
    # relabelling commutes with the mode wherever there is no tie
    counts = np.stack([(labels == v).reshape(2, 3, 2, 3, 2, 3).sum((1, 3, 5)) for v in range(4)])
    top = np.sort(counts, 0)
    untied = top[-1] > top[-2]
    assert np.array_equal(perm[a][untied], b[untied])


def test_build_pyramid_validation_and_order():
    v = Volume(np.zeros((8, 8, 8)))
    p = build_pyramid(v, LabelMap(np.zeros((8, 8, 8), int)), (4, 2, 1))
    assert [lvl[0].dims for lvl in p.levels] == [(2, 2, 2), (4, 4, 4), (8, 8, 8)]
    for bad in [(), (2, 4, 1), (4, 2)]:
        with pytest.raises(InvalidArgumentError):
            build_pyramid(v, schedule=bad)
