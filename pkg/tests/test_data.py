"""Dataset serialization and synthetic-generator tests."""

import math

import numpy as np
import pytest

from oodalign.data import (
    MODE_FEATURES,
    MODE_MAPS,
    Dataset,
    DatasetHeader,
    ObjectRecord,
    SceneRecord,
    SyntheticSpec,
    generate_synthetic,
    iter_scenes,
    read_dataset,
    read_header,
    write_dataset,
)
from oodalign.errors import DataError
from oodalign.model import Box7, GridMeta, Tensor, cell_index, center_pool

SMALL = SyntheticSpec(
    seed=7, num_classes=3, channels=8, text_dim=16,
    n_train=48, n_val_id=24, n_val_ood=24,
    margin_deg=45.0, scene_size=6,
    grid=GridMeta(x_min=-16.0, y_min=-16.0, cell_size=4.0, height=8, width=8),
)


@pytest.fixture(scope="module")
def small_splits():
    return generate_synthetic(SMALL)


def test_round_trip_identity(small_splits, tmp_path):
    train, _ = small_splits
    path = tmp_path / "train.alds"
    write_dataset(path, train)
    loaded = read_dataset(path)
    assert loaded.header.to_json_dict() == train.header.to_json_dict()
    assert len(loaded.scenes) == len(train.scenes)
    for got, want in zip(loaded.scenes, train.scenes):
        assert got.scene_id == want.scene_id
        np.testing.assert_array_equal(got.feature_map, want.feature_map)
        np.testing.assert_array_equal(got.f_scene, want.f_scene)
        assert len(got.objects) == len(want.objects)
        for g, w in zip(got.objects, want.objects):
            assert g.object_id == w.object_id
            assert g.label == w.label
            assert g.is_ood == w.is_ood
            assert g.split == w.split
            np.testing.assert_array_equal(g.box.as_vector(), w.box.as_vector())
            np.testing.assert_array_equal(g.f, w.f)


def test_header_sidecar_written(small_splits, tmp_path):
    train, _ = small_splits
    path = tmp_path / "train.alds"
    write_dataset(path, train)
    sidecar = path.with_suffix(".json")
    assert sidecar.exists()
    import json

    assert json.loads(sidecar.read_text()) == train.header.to_json_dict()


def test_regeneration_is_byte_identical(tmp_path):
    a, _ = generate_synthetic(SMALL)
    b, _ = generate_synthetic(SMALL)
    pa, pb = tmp_path / "a.alds", tmp_path / "b.alds"
    write_dataset(pa, a)
    write_dataset(pb, b)
    assert pa.read_bytes() == pb.read_bytes()


def test_different_seed_differs(tmp_path):
    a, _ = generate_synthetic(SMALL)
    b, _ = generate_synthetic(SyntheticSpec(**{**SMALL.__dict__, "seed": 8}))
    pa, pb = tmp_path / "a.alds", tmp_path / "b.alds"
    write_dataset(pa, a)
    write_dataset(pb, b)
    assert pa.read_bytes() != pb.read_bytes()


def test_truncated_file_reports_offset(small_splits, tmp_path):
    train, _ = small_splits
    path = tmp_path / "train.alds"
    write_dataset(path, train)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError, match="truncated .* at byte"):
        list(iter_scenes(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.alds"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(DataError, match="bad magic"):
        read_header(path)


def test_train_split_rejects_ood_objects(small_splits, tmp_path):
    train, _ = small_splits
    bad_obj = ObjectRecord(
        object_id="intruder", box=Box7(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0),
        label="anomaly_0", is_ood=True, split="train",
        f=np.zeros(SMALL.channels),
    )
    scene = train.scenes[0]
    bad = Dataset(train.header, [SceneRecord(
        scene.scene_id, scene.objects + [bad_obj], scene.feature_map, scene.f_scene,
    )])
    with pytest.raises(DataError, match="OOD but assigned to the train split"):
        write_dataset(tmp_path / "bad.alds", bad)


def test_unknown_id_label_rejected(small_splits, tmp_path):
    train, _ = small_splits
    scene = train.scenes[0]
    orig = scene.objects[0]
    renamed = ObjectRecord(
        object_id=orig.object_id, box=orig.box, label="zeppelin",
        is_ood=False, split=orig.split, f=orig.f,
    )
    bad = Dataset(train.header, [SceneRecord(
        scene.scene_id, [renamed] + scene.objects[1:], scene.feature_map, scene.f_scene,
    )])
    with pytest.raises(DataError, match="outside the ID class list"):
        write_dataset(tmp_path / "bad.alds", bad)


def test_stored_feature_must_match_map_cell(small_splits, tmp_path):
    train, _ = small_splits
    scene = train.scenes[0]
    orig = scene.objects[0]
    shifted = ObjectRecord(
        object_id=orig.object_id, box=orig.box, label=orig.label,
        is_ood=orig.is_ood, split=orig.split, f=orig.f + 1.0,
    )
    bad = Dataset(train.header, [SceneRecord(
        scene.scene_id, [shifted] + scene.objects[1:], scene.feature_map, scene.f_scene,
    )])
    with pytest.raises(DataError, match="disagrees"):
        write_dataset(tmp_path / "bad.alds", bad)


def test_channel_mismatch_rejected(small_splits, tmp_path):
    train, _ = small_splits
    narrow = DatasetHeader(
        mode=MODE_MAPS, channels=SMALL.channels + 1, text_dim=SMALL.text_dim,
        classes=train.header.classes, grid=train.header.grid,
    )
    path = tmp_path / "bad.alds"
    with pytest.raises(DataError, match="channels"):
        write_dataset(path, Dataset(narrow, train.scenes))


def test_center_pool_recovers_stored_feature(small_splits):
    train, _ = small_splits
    grid = train.header.grid
    for scene in train.scenes[:3]:
        fmap = Tensor(scene.feature_map)
        for obj in scene.objects:
            pooled, clamped = center_pool(fmap, obj.box, grid)
            assert not clamped
            np.testing.assert_allclose(pooled.data, obj.f, atol=1e-9)


def test_cells_are_distinct_within_scene(small_splits):
    train, val = small_splits
    grid = train.header.grid
    for scene in train.scenes + val.scenes:
        cells = [cell_index(o.box, grid)[:2] for o in scene.objects]
        assert len(set(cells)) == len(cells)


def test_train_class_balance(small_splits):
    train, _ = small_splits
    counts = {}
    for scene in train.scenes:
        for obj in scene.objects:
            counts[obj.label] = counts.get(obj.label, 0) + 1
    assert sum(counts.values()) == SMALL.n_train
    per_class = SMALL.n_train / SMALL.num_classes
    for label, n in counts.items():
        assert abs(n - per_class) <= 1, (label, n)


def test_val_mixes_id_and_ood(small_splits):
    _, val = small_splits
    n_id = sum(not o.is_ood for s in val.scenes for o in s.objects)
    n_ood = sum(o.is_ood for s in val.scenes for o in s.objects)
    assert n_id == SMALL.n_val_id
    assert n_ood == SMALL.n_val_ood
    assert all(o.split == "val" for s in val.scenes for o in s.objects)
    # shuffling should interleave: first scene is not purely ID
    kinds = {o.is_ood for o in val.scenes[0].objects}
    assert kinds == {True, False}


def test_class_means_respect_margin(small_splits):
    train, _ = small_splits
    by_class: dict[str, list[np.ndarray]] = {}
    for scene in train.scenes:
        for obj in scene.objects:
            by_class.setdefault(obj.label, []).append(obj.f)
    means = {c: np.mean(np.stack(v), axis=0) for c, v in by_class.items()}
    names = sorted(means)
    limit = math.cos(math.radians(SMALL.margin_deg))
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            va, vb = means[a], means[b]
            cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
            # sample means wobble around the true centers; allow slack
            assert cos < limit + 0.15, (a, b, cos)


def test_ood_features_have_smaller_norms(small_splits):
    _, val = small_splits
    id_norms = [np.linalg.norm(o.f) for s in val.scenes for o in s.objects if not o.is_ood]
    ood_norms = [np.linalg.norm(o.f) for s in val.scenes for o in s.objects if o.is_ood]
    assert np.mean(ood_norms) < 0.85 * np.mean(id_norms)


def test_object_features_mode(tmp_path):
    spec = SyntheticSpec(**{**SMALL.__dict__, "mode": MODE_FEATURES})
    train, val = generate_synthetic(spec)
    assert train.header.grid is None
    for scene in train.scenes + val.scenes:
        assert scene.feature_map is None
        assert scene.f_scene is not None
        assert all(o.f is not None for o in scene.objects)
    path = tmp_path / "feat.alds"
    write_dataset(path, train)
    loaded = read_dataset(path)
    assert loaded.header.mode == MODE_FEATURES
    np.testing.assert_array_equal(loaded.scenes[0].f_scene, train.scenes[0].f_scene)


def test_scene_feature_dominates_members(small_splits):
    train, _ = small_splits
    for scene in train.scenes[:4]:
        member_max = np.max(np.stack([o.f for o in scene.objects]), axis=0)
        # f_scene is the member max plus small noise
        assert np.max(np.abs(scene.f_scene - member_max)) < 0.25


def test_impossible_margin_raises():
    spec = SyntheticSpec(
        seed=1, num_classes=40, channels=2, text_dim=8,
        n_train=40, n_val_id=8, n_val_ood=8, margin_deg=85.0,
    )
    with pytest.raises(DataError, match="margin"):
        generate_synthetic(spec)


def test_oversized_scene_rejected():
    spec = SyntheticSpec(**{**SMALL.__dict__, "scene_size": 1000})
    with pytest.raises(DataError, match="scene_size"):
        generate_synthetic(spec)
