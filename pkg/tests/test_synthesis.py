import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirsynth.errors import InvalidArgumentError
from dirsynth.grid import LabelMap, Volume
from dirsynth.registration import RegistrationConfig, RegistrationResult
from dirsynth.sampler import warp
from dirsynth.synthesis import (
    AtlasSubject,
    fuse,
    label_similarity_weights,
    synthesize,
    ti_contrast,
    transfer,
)
from dirsynth.transform import DisplacementField, VelocityField


def _vols(*values, dims=(3, 3, 3)):
    return [Volume(np.full(dims, v, dtype=float)) for v in values]


def test_single_volume_any_method():
    v = Volume(np.random.default_rng(0).random((3, 3, 3)))
    for method in ("mean", "median"):
        assert np.array_equal(fuse([v], method).synthetic.data, v.data)
    assert np.array_equal(fuse([v], "weighted_mean", [2.0]).synthetic.data, v.data)


def test_mean_of_offset_pair():
    out = fuse(_vols(1.5, 3.5), "mean")
    assert np.all(out.synthetic.data == 2.5)
    assert out.weights == (0.5, 0.5)


def test_median_and_mean_order_statistics():
    vols = _vols(0.0, 0.0, 9.0)
    assert np.all(fuse(vols, "median").synthetic.data == 0.0)
    assert np.allclose(fuse(vols, "mean").synthetic.data, 3.0)


def test_even_median_takes_lower_middle():
    assert np.all(fuse(_vols(1.0, 2.0, 3.0, 4.0), "median").synthetic.data == 2.0)


def test_uniform_weighted_mean_equals_mean_bitwise():
    r = np.random.default_rng(1)
    vols = [Volume(r.random((4, 4, 4))) for _ in range(5)]
    a = fuse(vols, "mean").synthetic.data
    b = fuse(vols, "weighted_mean", [1.0] * 5).synthetic.data
    assert np.array_equal(a, b)


def test_permutation_invariance_bitwise():
    r = np.random.default_rng(2)
    vols = [Volume(r.random((4, 4, 4))) for _ in range(4)]
    ids = ["a", "b", "c", "d"]
    ref_mean = fuse(vols, "mean", atlas_ids=ids).synthetic.data
    ref_med = fuse(vols, "median", atlas_ids=ids).synthetic.data
    for perm in itertools.permutations(range(4)):
        pv = [vols[i] for i in perm]
        pid = [ids[i] for i in perm]
        out = fuse(pv, "mean", atlas_ids=pid)
        assert np.array_equal(out.synthetic.data, ref_mean)
        assert out.atlas_ids == tuple(pid)
        assert np.array_equal(fuse(pv, "median", atlas_ids=pid).synthetic.data, ref_med)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from(["mean", "median", "weighted_mean"]))
def test_fused_values_within_input_range(seed, n, method):
    r = np.random.default_rng(seed)
    vols = [Volume(r.normal(size=(3, 3, 3))) for _ in range(n)]
    weights = r.random(n) + 0.01 if method == "weighted_mean" else None
    out = fuse(vols, method, weights).synthetic.data
    stack = np.stack([v.data for v in vols])
    assert np.all(out >= stack.min(0)) and np.all(out <= stack.max(0))
    if weights is not None:
        assert abs(sum(fuse(vols, method, weights).weights) - 1.0) < 1e-12


def test_fuse_errors():
    with pytest.raises(InvalidArgumentError):
        fuse([])
    with pytest.raises(InvalidArgumentError):
        fuse(_vols(1.0, 2.0), "weighted_mean", [1.0, -1.0])
    with pytest.raises(InvalidArgumentError):
        fuse(_vols(1.0, 2.0), "weighted_mean", [1.0])
    with pytest.raises(InvalidArgumentError):
        fuse(_vols(1.0, 2.0), "mode")


def test_label_similarity_weights():
    fixed = np.zeros((4, 4, 4), int)
    fixed[:2] = 1
    fl = LabelMap(fixed)
    disjoint = LabelMap(np.where(fixed == 1, 0, 1))
    assert np.allclose(label_similarity_weights([fl, fl, fl], fl), [1 / 3] * 3)
    assert np.allclose(label_similarity_weights([fl, disjoint], fl), [1.0, 0.0])
    assert np.allclose(label_similarity_weights([disjoint, disjoint], fl), [0.5, 0.5])


def test_label_similarity_weights_normalise_dice():
    fixed = np.zeros((8, 1, 1), int)
    fixed[:4] = 1
    fl = LabelMap(fixed)

    def with_overlap(k):  # 4 voxels labelled, k of them shared with fixed
        a = np.zeros((8, 1, 1), int)
        a[4 - k:8 - k] = 1
        return LabelMap(a)

    w = label_similarity_weights([with_overlap(2), with_overlap(1), with_overlap(1)], fl)
    assert np.allclose(w, [0.5, 0.25, 0.25])


def _result(u):
    return RegistrationResult(DisplacementField(u), VelocityField(u), [[0.0]], True, 0.0, 0.0)


def _atlas(seed, dims=(6, 6, 6)):
    r = np.random.default_rng(seed)
    primary = Volume(r.random(dims))
    return AtlasSubject(primary, {"wmn": Volume(primary.data ** 2)}, LabelMap(r.integers(0, 3, dims)), "csfn")


def test_transfer_identity_and_channel_equality():
    atlas = _atlas(0)
    zero = _result(np.zeros((6, 6, 6, 3)))
    assert np.array_equal(transfer(zero, atlas, "wmn").data, atlas.contrast("wmn").data)
    u = np.random.default_rng(1).normal(0, 1, (6, 6, 6, 3))
    assert np.array_equal(transfer(_result(u), atlas, "csfn").data, warp(atlas.primary_contrast, u).data)
    with pytest.raises(InvalidArgumentError):
        transfer(zero, atlas, "flair")


def test_transfer_of_monotone_contrast_tracks_primary():
    atlas = _atlas(3)
    u = np.random.default_rng(4).normal(0, 1, (6, 6, 6, 3))
    moved = transfer(_result(u), atlas, "wmn").data
    expected = warp(atlas.primary_contrast, u).data ** 2
    # trilinear interpolation and squaring do not commute, but stay within the cell range
    assert np.abs(moved - expected).max() <= 2 * np.ptp(atlas.contrast("wmn").data)


def test_atlas_validation():
    v = Volume(np.zeros((3, 3, 3)))
    with pytest.raises(InvalidArgumentError):
        AtlasSubject(v, {"x": Volume(np.zeros((3, 3, 4)))})
    with pytest.raises(InvalidArgumentError):
        AtlasSubject(v, {"primary": v})


def test_self_atlas_reproduces_own_contrast(small_phantom):
    fixed = AtlasSubject.from_phantom(small_phantom, "self")
    cfg = RegistrationConfig(iterations_per_level=(5, 5, 5))
    run = synthesize(fixed, [fixed], "wmn", "mean", cfg)
    truth = small_phantom.contrasts["wmn"].data
    err = np.mean((run["wmn"].synthetic.data - truth) ** 2)
    assert err < 1e-4 * np.ptp(truth) ** 2
    assert len(run.registrations) == 1


def test_multi_contrast_reuses_registrations(small_phantom):
    fixed = AtlasSubject.from_phantom(small_phantom, "target")
    atlases = [AtlasSubject(fixed.primary_contrast, fixed.secondary_contrasts, fixed.labels, "csfn", f"a{i}")
               for i in range(2)]
    cfg = RegistrationConfig(iterations_per_level=(2, 2, 2))
    run = synthesize(fixed, atlases, ["wmn", "csfn"], "mean", cfg)
    assert len(run.registrations) == 2
    assert run["wmn"].registration_ids == run["csfn"].registration_ids == run.registration_ids


def test_ti_contrast_reproduces_inputs_and_straddling_tissues(small_spec):
    from dataclasses import replace

    from dirsynth.irmodel import CSFN_TI, WMN_TI, ir_signal
    from dirsynth.phantom import TISSUE_LABELS, generate

    s = generate(replace(small_spec, noise_sigma=0.0))
    atlas = AtlasSubject.from_phantom(s)
    for ti in (WMN_TI, CSFN_TI):  # the fit reproduces both acquired contrasts
        atlas = ti_contrast(atlas, ti, f"re{int(ti)}")
    assert np.allclose(atlas.contrast("re400").data, s.contrasts["wmn"].data, rtol=1e-9, atol=1e-12)
    assert np.allclose(atlas.contrast("re1400").data, s.contrasts["csfn"].data, rtol=1e-9, atol=1e-12)

    out = ti_contrast(atlas, 900.0, "ti900").contrast("ti900").data
    for tissue, (m0, t1) in small_spec.tissue_params.items():
        if not WMN_TI / np.log(2) < t1 < CSFN_TI / np.log(2):
            continue  # both samples on one side of the null: sign choice is ambiguous
        region = s.tissue_map.labels == TISSUE_LABELS[tissue]
        assert np.allclose(out[region], ir_signal(m0, t1, 900.0), rtol=1e-6)
    assert np.all(out[s.tissue_map.labels == 0] == 0)
