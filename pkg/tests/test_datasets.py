import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbaseg.datasets import (
    Preprocess,
    RawScene,
    dataset_digest,
    format_annotations,
    generate_synthetic_dataset,
    load_dataset_dir,
    load_synthetic_dir,
    parse_annotations,
    prepare,
    write_synthetic_dataset,
)
from imbaseg.errors import DataError, ParseError
from imbaseg.geom import ClassCatalog, frontal_filter, ground_filter, label_points
from imbaseg.ingest import ClassSceneSpec, SyntheticSceneSpec

CAT = ClassCatalog()
SPEC = SyntheticSceneSpec(
    classes=(
        ("Car", ClassSceneSpec((1, 2), (10, 20), (3.6, 4.6), (1.6, 1.9), (1.4, 1.6), (0.2, 0.7))),
        ("Pedestrian", ClassSceneSpec((0, 2), (3, 6), (0.5, 0.9), (0.5, 0.8), (1.6, 1.9), (0.5, 0.9))),
    ),
    background_points=200,
    extent=15.0,
)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), z_min=st.floats(-2.0, 0.5), frontal=st.booleans())
def test_labeling_and_filtering_commute(seed, z_min, frontal):
    (scene,) = generate_synthetic_dataset(SPEC, seed, 1, CAT)
    (after,) = prepare([scene], Preprocess(frontal=frontal, z_min=z_min))
    cloud = label_points(scene.points, [])
    pts = cloud.points
    if frontal:
        pts = frontal_filter(cloud).points
    pts = ground_filter(label_points(pts, []), z_min).points
    before = label_points(pts, scene.annotations)
    np.testing.assert_array_equal(after.points, before.points)
    np.testing.assert_array_equal(after.labels, before.labels)


def test_prepare_without_filters_keeps_every_point():
    scenes = generate_synthetic_dataset(SPEC, 0, 2, CAT)
    clouds = prepare(scenes, Preprocess(frontal=False, z_min=-math.inf))
    assert [len(c) for c in clouds] == [len(s.points) for s in scenes]
    assert [c.scene_id for c in clouds] == ["000000", "000001"]


def test_annotation_text_round_trip():
    (scene,) = generate_synthetic_dataset(SPEC, 5, 1, CAT)
    back = parse_annotations(format_annotations(scene.annotations, CAT), CAT)
    assert [(b.center, b.dims, b.yaw, c) for b, c in back] == [(b.center, b.dims, b.yaw, c) for b, c in scene.annotations]


@pytest.mark.parametrize("line", ["Car 1 2 3 4 5 6", "Tram 0 0 0 1 1 1 0", "Car 0 0 0 1 1 x 0", "Car 0 0 0 1 -1 1 0"])
def test_annotation_parse_errors(line):
    with pytest.raises(ParseError):
        parse_annotations("\n" + line + "\n", CAT)


def test_synthetic_dir_round_trip(tmp_path):
    written = write_synthetic_dataset(tmp_path, SPEC, 2, 3, CAT)
    catalog, loaded = load_synthetic_dir(tmp_path)
    assert catalog == CAT and len(loaded) == 3
    for a, b in zip(written, loaded):
        assert a.scene_id == b.scene_id
        assert a.points.tobytes() == b.points.tobytes()
        assert len(a.annotations) == len(b.annotations)
    assert dataset_digest(prepare(written)) == dataset_digest(prepare(loaded))


def test_load_dataset_dir_checks_catalog(tmp_path):
    write_synthetic_dataset(tmp_path, SPEC, 2, 1, CAT)
    with pytest.raises(DataError):
        load_dataset_dir(tmp_path, ClassCatalog(("NoObject", "Car", "Pedestrian")))
    with pytest.raises(DataError):
        load_dataset_dir(tmp_path / "missing", CAT)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        load_dataset_dir(tmp_path, CAT)


def test_digest_tracks_content():
    scenes = generate_synthetic_dataset(SPEC, 1, 2, CAT)
    raw = Preprocess(frontal=False, z_min=-math.inf)
    clouds = prepare(scenes, raw)
    moved = RawScene(scenes[0].scene_id, scenes[0].points + [0, 0, 0, 1e-3], scenes[0].annotations)
    assert dataset_digest(clouds) == dataset_digest(prepare(scenes, raw))
    assert dataset_digest(clouds) != dataset_digest(prepare([moved, scenes[1]], raw))
    assert dataset_digest(clouds) != dataset_digest(clouds[::-1])
