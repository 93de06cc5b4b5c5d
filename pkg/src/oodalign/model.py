"""Alignment head: residual CNN adapter, feature fusion, box conditioning.

The head turns a detector's bird's-eye-view feature map (or precomputed
per-object features) into one embedding per object in the text space:

    F' = relu(bn2(conv2(relu(bn1(conv1(F))))) + F)
    f_obj   = F'[:, row, col]            at the box-center grid cell
    f_scene = global max pool of F'
    fused   = (1 - w) * f_obj + w * f_scene
    v       = align(concat(fused, box_encoder(box)))

Both convolutions keep the channel count, so the residual sum is well formed
at any width.  ``v`` is deliberately left unnormalized: its length carries
the in-distribution evidence that norm-scaled scoring uses.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import DataError
from .seeding import derive_rng
from .tensor import (
    RunningStats,
    Tensor,
    adaptive_max_pool_global,
    add,
    affine,
    batchnorm2d,
    blend_rows,
    concat_cols,
    conv3x3_same,
    gather_cells,
    relu,
    reshape,
)

TWO_PI = 2.0 * math.pi

MIN_SCALE = 1.0
MAX_SCALE = 100.0


def normalize_yaw(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - float(theta)) % TWO_PI


@dataclass(frozen=True)
class Box7:
    """3D box: center, dimensions, yaw.  Yaw is wrapped at construction."""

    x_c: float
    y_c: float
    z_c: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        for name in ("l", "w", "h"):
            if getattr(self, name) <= 0.0:
                raise DataError(f"box dimension {name} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "theta", normalize_yaw(self.theta))

    def as_vector(self) -> np.ndarray:
        return np.array([self.x_c, self.y_c, self.z_c, self.l, self.w, self.h, self.theta])


@dataclass(frozen=True)
class GridMeta:
    """Geometry of the bird's-eye-view feature grid."""

    x_min: float
    y_min: float
    cell_size: float
    height: int
    width: int

    def __post_init__(self):
        if self.cell_size <= 0.0:
            raise DataError(f"grid cell_size must be positive, got {self.cell_size}")
        if self.height < 1 or self.width < 1:
            raise DataError(f"grid must be at least 1x1, got {self.height}x{self.width}")


@dataclass(frozen=True)
class FusionConfig:
    """Convex object/scene mix; scene_weight 0 ignores scene context."""

    scene_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.scene_weight <= 1.0:
            raise DataError(f"scene_weight must lie in [0, 1], got {self.scene_weight}")


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    text_dim: int
    box_dim: int = 64
    use_box: bool = True
    tau_init: float = 0.07


def cell_index(box: Box7, grid: GridMeta) -> tuple[int, int, bool]:
    """Grid cell under the box center: row from y, column from x.

    Centers outside the grid clamp to the nearest border cell; the returned
    flag reports whether clamping happened.
    """
    row = math.floor((box.y_c - grid.y_min) / grid.cell_size)
    col = math.floor((box.x_c - grid.x_min) / grid.cell_size)
    crow = min(max(row, 0), grid.height - 1)
    ccol = min(max(col, 0), grid.width - 1)
    return crow, ccol, (crow != row or ccol != col)


class HeadParams:
    """All trainable tensors of the head, plus batch-norm running state."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self._tensors = tensors
        self.bn1_stats = RunningStats(cfg.channels)
        self.bn2_stats = RunningStats(cfg.channels)

    def __getattr__(self, name: str) -> Tensor:
        try:
            return self.__dict__["_tensors"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "HeadParams":
        c = cfg.channels
        conv_bound = math.sqrt(6.0 / (c * 9))
        conv_bias_bound = 1.0 / math.sqrt(c * 9)

        def uniform(name, shape, bound):
            rng = derive_rng(seed, "init", name)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        tensors = {
            "conv1_w": uniform("conv1_w", (c, c, 3, 3), conv_bound),
            "conv1_b": uniform("conv1_b", (c,), conv_bias_bound),
            "bn1_gamma": Tensor(np.ones(c), requires_grad=True),
            "bn1_beta": Tensor(np.zeros(c), requires_grad=True),
            "conv2_w": uniform("conv2_w", (c, c, 3, 3), conv_bound),
            "conv2_b": uniform("conv2_b", (c,), conv_bias_bound),
            "bn2_gamma": Tensor(np.ones(c), requires_grad=True),
            "bn2_beta": Tensor(np.zeros(c), requires_grad=True),
            "align_w": uniform(
                "align_w",
                (c + (cfg.box_dim if cfg.use_box else 0), cfg.text_dim),
                1.0 / math.sqrt(c + (cfg.box_dim if cfg.use_box else 0)),
            ),
            "align_b": uniform(
                "align_b", (cfg.text_dim,), 1.0 / math.sqrt(c + (cfg.box_dim if cfg.use_box else 0))
            ),
            "log_scale": Tensor(np.asarray(math.log(1.0 / cfg.tau_init)), requires_grad=True),
        }
        if cfg.use_box:
            tensors["box_w"] = uniform("box_w", (7, cfg.box_dim), 1.0 / math.sqrt(7.0))
            tensors["box_b"] = uniform("box_b", (cfg.box_dim,), 1.0 / math.sqrt(7.0))
        return cls(cfg, tensors)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def no_decay_names(self) -> set[str]:
        """Parameters exempt from weight decay: normalization affine and the
        temperature."""
        return {"bn1_gamma", "bn1_beta", "bn2_gamma", "bn2_beta", "log_scale"}

    def scale(self) -> float:
        return math.exp(self.log_scale.item())

    def clamp_scale(self) -> None:
        """Keep exp(log_scale) inside [1, 100] after an optimizer step."""
        ell = self.log_scale.item()
        clamped = min(max(ell, math.log(MIN_SCALE)), math.log(MAX_SCALE))
        if clamped != ell:
            self.log_scale.assign(np.asarray(clamped))

    # -- checkpoint I/O ------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self._tensors.items()}
        for label, stats in (("bn1", self.bn1_stats), ("bn2", self.bn2_stats)):
            state[f"{label}_running_mean"] = stats.mean
            state[f"{label}_running_var"] = stats.var
            state[f"{label}_count"] = np.asarray(float(stats.count))
        return state

    def save(self, path: str | Path) -> None:
        container.write_tensors(path, self.state_tensors())

    @classmethod
    def load(cls, path: str | Path) -> "HeadParams":
        state = container.read_tensors(path)
        required = ["conv1_w", "align_w", "align_b", "log_scale"]
        for name in required:
            if name not in state:
                raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
        channels = state["conv1_w"].shape[0]
        use_box = "box_w" in state
        box_dim = state["box_w"].shape[1] if use_box else 64
        cfg = ModelConfig(
            channels=channels,
            text_dim=state["align_w"].shape[1],
            box_dim=box_dim,
            use_box=use_box,
        )
        tensors = {}
        for name in (
            "conv1_w", "conv1_b", "bn1_gamma", "bn1_beta",
            "conv2_w", "conv2_b", "bn2_gamma", "bn2_beta",
            "align_w", "align_b", "log_scale",
            *(("box_w", "box_b") if use_box else ()),
        ):
            if name not in state:
                raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
            tensors[name] = Tensor(state[name], requires_grad=True)
        params = cls(cfg, tensors)
        for label, stats in (("bn1", params.bn1_stats), ("bn2", params.bn2_stats)):
            mean = state.get(f"{label}_running_mean")
            var = state.get(f"{label}_running_var")
            count = state.get(f"{label}_count")
            if mean is None or var is None or count is None:
                raise DataError(f"{path}: checkpoint is missing {label} running statistics")
            stats.load(mean, var, int(count))
        return params


def adapt_features(fmap: Tensor, params: HeadParams, mode: str) -> Tensor:
    """Residual two-conv refinement of the raw map; output has the same shape."""
    h = relu(batchnorm2d(
        conv3x3_same(fmap, params.conv1_w, params.conv1_b),
        params.bn1_gamma, params.bn1_beta, params.bn1_stats, mode,
    ))
    h = batchnorm2d(
        conv3x3_same(h, params.conv2_w, params.conv2_b),
        params.bn2_gamma, params.bn2_beta, params.bn2_stats, mode,
    )
    return relu(add(h, fmap))


def center_pool(fmap: Tensor, box: Box7, grid: GridMeta) -> tuple[Tensor, bool]:
    """Feature column at the box-center cell, plus the clamped flag."""
    row, col, clamped = cell_index(box, grid)
    picked = gather_cells(fmap, np.array([row]), np.array([col]))
    return reshape(picked, (fmap.shape[0],)), clamped


def fuse(f_obj: Tensor, f_scene: Tensor, fusion: FusionConfig) -> Tensor:
    """Convex object/scene combination of two (C,) vectors."""
    c = f_obj.shape[0]
    blended = blend_rows(reshape(f_obj, (1, c)), f_scene, fusion.scene_weight)
    return reshape(blended, (c,))


def encode_box(box: Box7, params: HeadParams) -> Tensor:
    """Affine lift of the 7 box parameters into the box-feature space."""
    row = Tensor(box.as_vector().reshape(1, 7))
    return reshape(affine(row, params.box_w, params.box_b), (params.cfg.box_dim,))


def _align(u: Tensor, params: HeadParams) -> Tensor:
    return affine(u, params.align_w, params.align_b)


def forward_scene(
    params: HeadParams,
    fusion: FusionConfig,
    boxes: list[Box7],
    *,
    feature_map: Tensor | None = None,
    grid: GridMeta | None = None,
    f_objs: np.ndarray | None = None,
    f_scene: np.ndarray | None = None,
    mode: str = "eval",
) -> Tensor:
    """Embeddings for all objects of one scene, one row per box.

    Exactly one ingestion path must be supplied: a feature map with grid
    geometry (the CNN adapter runs), or precomputed per-object features with
    a scene feature (the adapter is bypassed).
    """
    if not boxes:
        raise DataError("forward_scene needs at least one box")
    map_path = feature_map is not None
    feat_path = f_objs is not None
    if map_path == feat_path:
        raise DataError("supply either a feature map or precomputed features, not both")
    if map_path:
        if grid is None:
            raise DataError("feature-map ingestion requires grid geometry")
        refined = adapt_features(feature_map, params, mode)
        rows, cols = [], []
        for box in boxes:
            r, c, _ = cell_index(box, grid)
            rows.append(r)
            cols.append(c)
        obj_rows = gather_cells(refined, np.array(rows), np.array(cols))
        scene_vec = adaptive_max_pool_global(refined)
    else:
        if f_scene is None:
            raise DataError("precomputed ingestion requires a scene feature")
        if f_objs.shape[0] != len(boxes):
            raise DataError(f"{f_objs.shape[0]} feature rows for {len(boxes)} boxes")
        obj_rows = Tensor(f_objs)
        scene_vec = Tensor(f_scene)
    fused = blend_rows(obj_rows, scene_vec, fusion.scene_weight)
    if params.cfg.use_box:
        box_mat = Tensor(np.stack([b.as_vector() for b in boxes]))
        box_feats = affine(box_mat, params.box_w, params.box_b)
        u = concat_cols(fused, box_feats)
    else:
        u = fused
    return _align(u, params)


def forward_object(
    params: HeadParams,
    fusion: FusionConfig,
    box: Box7,
    *,
    feature_map: Tensor | None = None,
    grid: GridMeta | None = None,
    f_obj: np.ndarray | None = None,
    f_scene: np.ndarray | None = None,
    mode: str = "eval",
) -> Tensor:
    """Embedding for a single object; see forward_scene for the two paths."""
    f_objs = f_obj.reshape(1, -1) if f_obj is not None else None
    v = forward_scene(
        params, fusion, [box],
        feature_map=feature_map, grid=grid,
        f_objs=f_objs, f_scene=f_scene, mode=mode,
    )
    return reshape(v, (params.cfg.text_dim,))
