import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dijkstra_watershed, geodesic_watershed, partition, union_find_components
from xxlseg.evaluate import build_correlation_matrix
from xxlseg.instancer import (
    WatershedConfig,
    extract_markers,
    instance_count,
    run_watershed_pipeline,
    watershed_instances,
)
from xxlseg.phantom import generate_phantom, random_phantom_spec
from xxlseg.preprocess import BORDER, OBJECT, labels_to_three_class


def random_classes(rng, dims):
    p = rng.dirichlet([1.0, 1.0, 1.0])
    return rng.choice(3, size=dims, p=p).astype(np.uint32)


def sparse_markers(rng, classes, max_label=5):
    markers = np.zeros(classes.shape, dtype=np.uint32)
    obj = np.argwhere(classes == OBJECT)
    if len(obj):
        k = int(rng.integers(0, len(obj) + 1))
        for i in rng.choice(len(obj), size=k, replace=False):
            markers[tuple(obj[i])] = rng.integers(1, max_label + 1)
    return markers


def test_no_object_voxels_no_markers():
    classes = np.full((4, 4, 4), BORDER, dtype=np.uint32)
    assert not extract_markers(classes).any()
    assert not run_watershed_pipeline(classes).any()


def test_wall_gives_two_markers():
    classes = np.full((7, 3, 3), OBJECT, dtype=np.uint32)
    classes[3] = BORDER
    markers = extract_markers(classes)
    assert set(np.unique(markers)) == {0, 1, 2}
    assert (markers[:3] == 1).all() and (markers[4:] == 2).all() and not markers[3].any()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), connectivity=st.sampled_from([6, 26]))
def test_markers_match_union_find(seed, connectivity):
    rng = np.random.default_rng(seed)
    classes = random_classes(rng, tuple(rng.integers(1, 10, 3)))
    markers = extract_markers(classes, 0, connectivity)
    obj = (classes == OBJECT).astype(np.uint32)
    assert partition(markers) == union_find_components(obj, connectivity)


def test_min_marker_size_drops_small_regions():
    classes = np.zeros((9, 3, 3), dtype=np.uint32)
    classes[0:4] = OBJECT
    classes[6, 1, 1] = OBJECT
    markers = extract_markers(classes, min_marker_size=2)
    assert set(np.unique(markers)) == {0, 1}
    assert markers[6, 1, 1] == 0


def test_single_marker_fills_blob():
    classes = np.zeros((6, 6, 6), dtype=np.uint32)
    classes[1:5, 1:5, 1:5] = BORDER
    classes[2:4, 2:4, 2:4] = OBJECT
    markers = np.zeros_like(classes)
    markers[2, 2, 2] = 3
    out = watershed_instances(classes, markers)
    assert np.array_equal(out != 0, classes != 0)
    assert set(np.unique(out)) == {0, 3}


def test_wall_split_on_7x3x3_grid():
    classes = np.full((7, 3, 3), BORDER, dtype=np.uint32)
    classes[0:2] = OBJECT
    classes[5:7] = OBJECT
    markers = np.zeros_like(classes)
    markers[0:2] = 2
    markers[5:7] = 1
    out = watershed_instances(classes, markers)
    assert np.array_equal(out, geodesic_watershed(classes, markers))
    # x=2 is one step from label 2, x=4 one step from label 1, x=3 ties and goes to 1
    assert out[:, 1, 1].tolist() == [2, 2, 2, 1, 1, 1, 1]


def test_marker_on_background_or_border_is_an_error():
    classes = np.zeros((3, 3, 3), dtype=np.uint32)
    classes[1, 1, 1] = BORDER
    markers = np.zeros_like(classes)
    markers[0, 0, 0] = 1
    with pytest.raises(ValueError, match="background"):
        watershed_instances(classes, markers)
    markers[:] = 0
    markers[1, 1, 1] = 1
    with pytest.raises(ValueError, match="border"):
        watershed_instances(classes, markers)


def test_unreachable_foreground_stays_background():
    classes = np.zeros((7, 3, 3), dtype=np.uint32)
    classes[0:2] = OBJECT
    classes[4:7] = BORDER
    markers = extract_markers(classes)
    out = watershed_instances(classes, markers)
    assert (out[0:2] == 1).all() and not out[4:].any()


@pytest.mark.parametrize("connectivity", [6, 26])
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_geodesic_assignment_matches_oracles(connectivity, seed):
    rng = np.random.default_rng(seed)
    classes = random_classes(rng, tuple(rng.integers(1, 11, 3)))
    markers = sparse_markers(rng, classes) if rng.random() < 0.5 else extract_markers(classes)
    out = watershed_instances(classes, markers, connectivity)
    assert np.array_equal(out, geodesic_watershed(classes, markers, connectivity))
    assert np.array_equal(out, dijkstra_watershed(classes, markers, connectivity))
    # foreground only, markers kept
    assert not out[classes == 0].any()
    assert np.array_equal(out[markers != 0], markers[markers != 0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_independent_of_marker_enumeration(seed):
    rng = np.random.default_rng(seed)
    classes = random_classes(rng, tuple(rng.integers(2, 10, 3)))
    markers = extract_markers(classes)
    k = int(markers.max())
    if k == 0:
        return
    # relabel markers by an order-preserving but gapped map; ties still go the same way
    mapping = np.concatenate([[0], np.cumsum(rng.integers(1, 4, k))]).astype(np.uint32)
    out = watershed_instances(classes, markers)
    out2 = watershed_instances(classes, mapping[markers])
    assert np.array_equal(mapping[out], out2)


def thick_phantom(seed, dims=(48, 48, 48)):
    spec = random_phantom_spec(seed, dims, min_gap=2, min_thickness=3)
    return generate_phantom(spec)[1]


@pytest.mark.parametrize("seed", range(5))
def test_phantom_instances_recovered(seed):
    ref = thick_phantom(seed)
    out = run_watershed_pipeline(labels_to_three_class(ref, 1))
    assert instance_count(out) == instance_count(ref)
    diag = build_correlation_matrix(ref, out, 0).diagonal()
    assert diag.min() >= 0.9


@pytest.mark.parametrize("seed", range(3))
def test_pipeline_self_consistent(seed):
    ref = thick_phantom(seed, (40, 40, 40))
    classes = labels_to_three_class(ref, 1)
    first = run_watershed_pipeline(classes)
    second = run_watershed_pipeline(labels_to_three_class(first, 1))
    core = labels_to_three_class(first, 1) == OBJECT
    assert partition(np.where(core, first, 0)) == partition(np.where(core, second, 0))


def test_pipeline_config_and_determinism():
    ref = thick_phantom(11, (32, 32, 32))
    classes = labels_to_three_class(ref, 1)
    a = run_watershed_pipeline(classes, WatershedConfig(connectivity=6))
    b = run_watershed_pipeline(classes, WatershedConfig(connectivity=6))
    assert np.array_equal(a, b)
    assert run_watershed_pipeline(np.zeros((3, 3, 3), dtype=np.uint32)).sum() == 0
