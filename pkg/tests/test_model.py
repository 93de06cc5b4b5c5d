import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oodalign.errors import DataError
from oodalign.model import (
    Box7,
    FusionConfig,
    GridMeta,
    HeadParams,
    ModelConfig,
    adapt_features,
    cell_index,
    center_pool,
    encode_box,
    forward_object,
    forward_scene,
    fuse,
    normalize_yaw,
)
from oodalign.tensor import Tensor, adaptive_max_pool_global, relu


CFG = ModelConfig(channels=4, text_dim=6, box_dim=5)
GRID = GridMeta(x_min=-32.0, y_min=-32.0, cell_size=4.0, height=16, width=16)


def make_box(x=0.0, y=0.0, **kw):
    defaults = dict(z_c=-1.0, l=4.0, w=2.0, h=1.5, theta=0.3)
    defaults.update(kw)
    return Box7(x_c=x, y_c=y, **defaults)


def test_yaw_wraps_into_half_open_interval() -> None:
    assert normalize_yaw(math.pi) == pytest.approx(math.pi)
    assert normalize_yaw(-math.pi) == pytest.approx(math.pi)
    assert normalize_yaw(3.0 * math.pi) == pytest.approx(math.pi)
    assert normalize_yaw(3.0 * math.pi / 2.0) == pytest.approx(-math.pi / 2.0)
    assert normalize_yaw(0.0) == 0.0


def test_box_normalizes_yaw_at_construction() -> None:
    assert make_box(theta=3.0 * math.pi).theta == pytest.approx(math.pi)


def test_box_rejects_nonpositive_dimensions() -> None:
    with pytest.raises(DataError, match="positive"):
        make_box(l=0.0)
    with pytest.raises(DataError, match="positive"):
        make_box(h=-2.0)


def test_grid_rejects_degenerate_geometry() -> None:
    with pytest.raises(DataError):
        GridMeta(0.0, 0.0, cell_size=0.0, height=4, width=4)
    with pytest.raises(DataError):
        GridMeta(0.0, 0.0, cell_size=1.0, height=0, width=4)


def test_fusion_weight_must_be_convex() -> None:
    with pytest.raises(DataError):
        FusionConfig(scene_weight=1.2)
    with pytest.raises(DataError):
        FusionConfig(scene_weight=-0.1)


def test_cell_index_floors_by_axis() -> None:
    row, col, clamped = cell_index(make_box(x=0.84, y=-16.86), GRID)
    assert (row, col) == (3, 8)
    assert not clamped


def test_cell_index_clamps_offgrid_centers() -> None:
    row, col, clamped = cell_index(make_box(x=-99.0, y=99.0), GRID)
    assert (row, col) == (15, 0)
    assert clamped


def test_cell_index_matches_interval_scan() -> None:
    # brute force: find the cell whose half-open interval contains the center
    rng = np.random.default_rng(42)
    for _ in range(200):
        x = float(rng.uniform(-32.0, 31.999))
        y = float(rng.uniform(-32.0, 31.999))
        row, col, clamped = cell_index(make_box(x=x, y=y), GRID)
        want_col = next(
            c for c in range(16)
            if GRID.x_min + c * 4.0 <= x < GRID.x_min + (c + 1) * 4.0
        )
        want_row = next(
            r for r in range(16)
            if GRID.y_min + r * 4.0 <= y < GRID.y_min + (r + 1) * 4.0
        )
        assert (row, col) == (want_row, want_col)
        assert not clamped


def test_init_is_seed_deterministic() -> None:
    a = HeadParams.initialize(CFG, seed=5)
    b = HeadParams.initialize(CFG, seed=5)
    c = HeadParams.initialize(CFG, seed=6)
    for name, t in a.named_parameters().items():
        assert np.array_equal(t.data, b.named_parameters()[name].data)
    assert not np.array_equal(a.conv1_w.data, c.conv1_w.data)


def test_init_norm_affine_and_temperature_defaults() -> None:
    p = HeadParams.initialize(CFG, seed=0)
    np.testing.assert_array_equal(p.bn1_gamma.data, np.ones(4))
    np.testing.assert_array_equal(p.bn2_beta.data, np.zeros(4))
    assert p.scale() == pytest.approx(1.0 / 0.07)


def test_scale_clamps_into_band() -> None:
    p = HeadParams.initialize(CFG, seed=0)
    p.log_scale.assign(np.asarray(12.0))
    p.clamp_scale()
    assert p.scale() == pytest.approx(100.0)
    p.log_scale.assign(np.asarray(-3.0))
    p.clamp_scale()
    assert p.scale() == pytest.approx(1.0)


def test_zero_branch_adapter_reduces_to_relu() -> None:
    p = HeadParams.initialize(CFG, seed=1)
    for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
        t = p.named_parameters()[name]
        t.assign(np.zeros(t.shape))
    fmap = np.random.default_rng(9).normal(size=(4, 5, 5))
    out = adapt_features(Tensor(fmap), p, "train")
    np.testing.assert_allclose(out.data, np.maximum(fmap, 0.0), atol=1e-12)


def test_zero_branch_embedding_depends_only_on_rectified_map() -> None:
    p = HeadParams.initialize(CFG, seed=1)
    for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b"):
        t = p.named_parameters()[name]
        t.assign(np.zeros(t.shape))
    rng = np.random.default_rng(10)
    fmap = rng.normal(size=(4, 16, 16))
    box = make_box(x=3.0, y=-5.0)
    v_raw = forward_object(
        p, FusionConfig(0.1), box, feature_map=Tensor(fmap), grid=GRID, mode="train"
    )
    v_rect = forward_object(
        p, FusionConfig(0.1), box, feature_map=Tensor(np.maximum(fmap, 0.0)),
        grid=GRID, mode="train",
    )
    np.testing.assert_allclose(v_raw.data, v_rect.data, atol=1e-12)


def test_fuse_endpoints_select_object_or_scene() -> None:
    f_obj = Tensor(np.array([1.0, 2.0, 3.0]))
    f_scene = Tensor(np.array([-1.0, 0.0, 5.0]))
    np.testing.assert_array_equal(fuse(f_obj, f_scene, FusionConfig(0.0)).data, f_obj.data)
    np.testing.assert_array_equal(fuse(f_obj, f_scene, FusionConfig(1.0)).data, f_scene.data)


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_fuse_stays_inside_elementwise_envelope(weight: float) -> None:
    f_obj = Tensor(np.array([1.0, -2.0, 0.5]))
    f_scene = Tensor(np.array([0.0, 4.0, 0.5]))
    out = fuse(f_obj, f_scene, FusionConfig(weight)).data
    lo = np.minimum(f_obj.data, f_scene.data)
    hi = np.maximum(f_obj.data, f_scene.data)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)


def test_center_pool_reads_the_center_cell() -> None:
    fmap = np.zeros((4, 16, 16))
    fmap[:, 3, 8] = [9.0, 8.0, 7.0, 6.0]
    feat, clamped = center_pool(Tensor(fmap), make_box(x=0.84, y=-16.86), GRID)
    np.testing.assert_array_equal(feat.data, np.array([9.0, 8.0, 7.0, 6.0]))
    assert not clamped


def test_center_pool_flags_offgrid_boxes() -> None:
    _, clamped = center_pool(Tensor(np.zeros((4, 16, 16))), make_box(x=500.0, y=0.0), GRID)
    assert clamped


def test_encode_box_is_yaw_wrap_invariant() -> None:
    p = HeadParams.initialize(CFG, seed=2)
    a = encode_box(make_box(theta=math.pi), p)
    b = encode_box(make_box(theta=3.0 * math.pi), p)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_encode_box_applies_affine_map() -> None:
    p = HeadParams.initialize(CFG, seed=2)
    box = make_box(x=1.0, y=-2.0)
    want = box.as_vector() @ p.box_w.data + p.box_b.data
    np.testing.assert_allclose(encode_box(box, p).data, want, atol=1e-12)


def test_forward_object_produces_text_dim_vector() -> None:
    cfg = ModelConfig(channels=32, text_dim=512)
    p = HeadParams.initialize(cfg, seed=3)
    grid = GridMeta(-8.0, -8.0, 4.0, 4, 4)
    v = forward_object(
        p, FusionConfig(0.1), make_box(x=1.0, y=1.0),
        feature_map=Tensor(np.random.default_rng(0).normal(size=(32, 4, 4))),
        grid=grid, mode="train",
    )
    assert v.shape == (512,)


def test_precomputed_path_matches_map_path_on_matching_features() -> None:
    p = HeadParams.initialize(CFG, seed=4)
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(4, 16, 16))
    boxes = [make_box(x=1.0, y=2.0), make_box(x=-10.0, y=8.0)]
    refined = adapt_features(Tensor(fmap), p, "train")
    f_objs = np.stack([center_pool(refined, b, GRID)[0].data for b in boxes])
    f_scene = adaptive_max_pool_global(refined).data
    v_map = forward_scene(
        p, FusionConfig(0.1), boxes, feature_map=Tensor(fmap), grid=GRID, mode="train"
    )
    v_pre = forward_scene(p, FusionConfig(0.1), boxes, f_objs=f_objs, f_scene=f_scene)
    np.testing.assert_allclose(v_map.data, v_pre.data, atol=1e-9)


def test_forward_scene_matches_per_object_forward() -> None:
    p = HeadParams.initialize(CFG, seed=7)
    rng = np.random.default_rng(2)
    f_objs = rng.normal(size=(3, 4))
    f_scene = rng.normal(size=4)
    boxes = [make_box(x=float(i), y=float(-i)) for i in range(3)]
    batch = forward_scene(p, FusionConfig(0.1), boxes, f_objs=f_objs, f_scene=f_scene)
    for i, box in enumerate(boxes):
        single = forward_object(
            p, FusionConfig(0.1), box, f_obj=f_objs[i], f_scene=f_scene
        )
        np.testing.assert_allclose(batch.data[i], single.data, atol=1e-12)


def test_forward_rejects_ambiguous_or_incomplete_ingestion() -> None:
    p = HeadParams.initialize(CFG, seed=8)
    box = make_box()
    fmap = Tensor(np.zeros((4, 16, 16)))
    with pytest.raises(DataError):
        forward_object(p, FusionConfig(0.1), box)
    with pytest.raises(DataError):
        forward_object(
            p, FusionConfig(0.1), box,
            feature_map=fmap, grid=GRID, f_obj=np.zeros(4), f_scene=np.zeros(4),
        )
    with pytest.raises(DataError, match="grid"):
        forward_object(p, FusionConfig(0.1), box, feature_map=fmap)
    with pytest.raises(DataError, match="scene"):
        forward_object(p, FusionConfig(0.1), box, f_obj=np.zeros(4))


def test_boxless_variant_aligns_features_directly() -> None:
    cfg = ModelConfig(channels=4, text_dim=6, use_box=False)
    p = HeadParams.initialize(cfg, seed=9)
    assert p.align_w.shape == (4, 6)
    assert "box_w" not in p.named_parameters()
    v = forward_object(
        p, FusionConfig(0.0), make_box(), f_obj=np.ones(4), f_scene=np.zeros(4)
    )
    np.testing.assert_allclose(v.data, np.ones(4) @ p.align_w.data + p.align_b.data)


def test_checkpoint_round_trip_preserves_everything(tmp_path) -> None:
    p = HeadParams.initialize(CFG, seed=11)
    # push some history into the running stats before saving
    adapt_features(Tensor(np.random.default_rng(3).normal(size=(4, 6, 6))), p, "train")
    path = tmp_path / "head.alod"
    p.save(path)
    q = HeadParams.load(path)
    assert q.cfg == ModelConfig(channels=4, text_dim=6, box_dim=5, use_box=True)
    for name, t in p.named_parameters().items():
        assert np.array_equal(t.data, q.named_parameters()[name].data)
    assert np.array_equal(p.bn1_stats.mean, q.bn1_stats.mean)
    assert np.array_equal(p.bn2_stats.var, q.bn2_stats.var)
    assert q.bn1_stats.count == 1
    # saved again, the bytes must not drift
    path2 = tmp_path / "head2.alod"
    q.save(path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path) -> None:
    path = tmp_path / "junk.alod"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(DataError, match="magic"):
        HeadParams.load(path)


def test_checkpoint_truncation_reports_byte_offset(tmp_path) -> None:
    p = HeadParams.initialize(CFG, seed=12)
    path = tmp_path / "head.alod"
    p.save(path)
    blob = path.read_bytes()
    cut = tmp_path / "cut.alod"
    cut.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(DataError, match="byte"):
        HeadParams.load(cut)
