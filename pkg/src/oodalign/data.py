"""Dataset container and the synthetic benchmark generator.

A dataset is a set of scenes; each scene carries either a bird's-eye feature
map (the CNN adapter path) or precomputed per-object features plus a scene
feature (the adapter bypass).  The synthetic generator lays out well
separated class clusters on the unit sphere and builds scenes whose feature
maps, pooled features, and boxes are mutually consistent, so the same files
exercise both ingestion paths.

On-disk layout, one binary file per split (all integers little-endian,
payloads float64):

    magic "ALDS" | u32 version | u32 header length | header JSON |
    u32 scene count | scenes

    scene:  str scene_id | u8 flags (1 map, 2 scene feature) |
            [u32 c,h,w | f64 map] | [u32 c | f64 scene feature] |
            u32 object count | objects
    object: str object_id | str label | u8 flags (1 ood, 2 feature, 4 val) |
            f64[7] box | [u32 c | f64 feature]
    str:    u32 length | utf8 bytes

The header is duplicated as a sibling ``.json`` file for inspection.
"""

import json
import math
import struct
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import ByteReader
from .errors import DataError
from .model import Box7, GridMeta, cell_index
from .seeding import derive_rng

MAGIC = b"ALDS"
VERSION = 1

MODE_MAPS = "feature_maps"
MODE_FEATURES = "object_features"


@dataclass
class ObjectRecord:
    object_id: str
    box: Box7
    label: str
    is_ood: bool
    split: str  # "train" | "val"
    f: np.ndarray | None = None

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise DataError(f"object {self.object_id}: unknown split {self.split!r}")


@dataclass
class SceneRecord:
    scene_id: str
    objects: list[ObjectRecord]
    feature_map: np.ndarray | None = None
    f_scene: np.ndarray | None = None


@dataclass
class DatasetHeader:
    mode: str
    channels: int
    text_dim: int
    classes: list[str]
    grid: GridMeta | None
    counts: dict[str, int] = field(default_factory=dict)
    version: int = VERSION

    def __post_init__(self):
        if self.mode not in (MODE_MAPS, MODE_FEATURES):
            raise DataError(f"unknown dataset mode {self.mode!r}")
        if self.channels < 1:
            raise DataError(f"channels must be positive, got {self.channels}")
        if self.mode == MODE_MAPS and self.grid is None:
            raise DataError("feature-map datasets need grid geometry in the header")

    def to_json_dict(self) -> dict:
        grid = None
        if self.grid is not None:
            grid = {
                "x_min": self.grid.x_min,
                "y_min": self.grid.y_min,
                "cell_size": self.grid.cell_size,
                "height": self.grid.height,
                "width": self.grid.width,
            }
        return {
            "version": self.version,
            "mode": self.mode,
            "channels": self.channels,
            "text_dim": self.text_dim,
            "classes": list(self.classes),
            "grid": grid,
            "counts": dict(sorted(self.counts.items())),
        }

    @classmethod
    def from_json_dict(cls, payload: dict, where: str) -> "DatasetHeader":
        try:
            grid = None
            if payload.get("grid") is not None:
                g = payload["grid"]
                grid = GridMeta(
                    x_min=float(g["x_min"]), y_min=float(g["y_min"]),
                    cell_size=float(g["cell_size"]),
                    height=int(g["height"]), width=int(g["width"]),
                )
            return cls(
                mode=payload["mode"],
                channels=int(payload["channels"]),
                text_dim=int(payload["text_dim"]),
                classes=[str(c) for c in payload["classes"]],
                grid=grid,
                counts={str(k): int(v) for k, v in payload.get("counts", {}).items()},
                version=int(payload.get("version", VERSION)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: malformed dataset header: {exc}") from exc


@dataclass
class Dataset:
    header: DatasetHeader
    scenes: list[SceneRecord]


# ---------------------------------------------------------------------------
# serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(arr: np.ndarray) -> bytes:
    return struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f8").tobytes(order="C")


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    """Write one split plus its sibling header JSON; validates first."""
    validate_dataset(dataset)
    path = Path(path)
    header_json = json.dumps(dataset.header.to_json_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header_json)), header_json]
    parts.append(struct.pack("<I", len(dataset.scenes)))
    for scene in dataset.scenes:
        parts.append(_pack_str(scene.scene_id))
        flags = (1 if scene.feature_map is not None else 0) | (
            2 if scene.f_scene is not None else 0
        )
        parts.append(struct.pack("<B", flags))
        if scene.feature_map is not None:
            parts.append(_pack_array(np.asarray(scene.feature_map, dtype=np.float64)))
        if scene.f_scene is not None:
            parts.append(_pack_array(np.asarray(scene.f_scene, dtype=np.float64)))
        parts.append(struct.pack("<I", len(scene.objects)))
        for obj in scene.objects:
            parts.append(_pack_str(obj.object_id))
            parts.append(_pack_str(obj.label))
            oflags = (
                (1 if obj.is_ood else 0)
                | (2 if obj.f is not None else 0)
                | (4 if obj.split == "val" else 0)
            )
            parts.append(struct.pack("<B", oflags))
            parts.append(obj.box.as_vector().astype("<f8").tobytes())
            if obj.f is not None:
                parts.append(_pack_array(np.asarray(obj.f, dtype=np.float64)))
    path.write_bytes(b"".join(parts))
    path.with_suffix(".json").write_text(
        json.dumps(dataset.header.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )


def _read_array(cur: ByteReader, rank: int, what: str) -> np.ndarray:
    dims = struct.unpack(f"<{rank}I", cur.take(4 * rank, f"dims of {what}"))
    n = int(np.prod(dims, dtype=np.int64))
    payload = cur.take(8 * n, f"data of {what}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def _read_str(cur: ByteReader, what: str) -> str:
    n = struct.unpack("<I", cur.take(4, f"length of {what}"))[0]
    if n > 1 << 20:
        raise DataError(f"{cur.path}: implausible {what} length {n} at byte {cur.offset - 4}")
    return cur.take(n, what).decode("utf-8")


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_header(path: str | Path) -> DatasetHeader:
    path = Path(path)
    cur = ByteReader(_read_bytes(path), str(path))
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = struct.unpack("<I", cur.take(4, "version"))[0]
    if version != VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    header_len = struct.unpack("<I", cur.take(4, "header length"))[0]
    raw = cur.take(header_len, "header JSON")
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: header JSON unreadable at byte 12: {exc}") from exc
    return DatasetHeader.from_json_dict(payload, str(path))


def iter_scenes(path: str | Path) -> Iterator[SceneRecord]:
    """Stream scenes without holding the whole split in memory."""
    path = Path(path)
    header = read_header(path)
    cur = ByteReader(_read_bytes(path), str(path))
    cur.take(8, "preamble")
    header_len = struct.unpack("<I", cur.take(4, "header length"))[0]
    cur.take(header_len, "header JSON")
    n_scenes = struct.unpack("<I", cur.take(4, "scene count"))[0]
    c = header.channels
    for _ in range(n_scenes):
        scene_id = _read_str(cur, "scene id")
        flags = cur.take(1, f"flags of scene {scene_id!r}")[0]
        feature_map = None
        f_scene = None
        if flags & 1:
            feature_map = _read_array(cur, 3, f"map of scene {scene_id!r}")
            if feature_map.shape[0] != c:
                raise DataError(
                    f"{path}: scene {scene_id!r} map has {feature_map.shape[0]} channels, "
                    f"header says {c}"
                )
            if header.grid is not None and feature_map.shape[1:] != (
                header.grid.height, header.grid.width,
            ):
                raise DataError(
                    f"{path}: scene {scene_id!r} map shape {feature_map.shape[1:]} "
                    f"does not match grid {header.grid.height}x{header.grid.width}"
                )
        if flags & 2:
            f_scene = _read_array(cur, 1, f"scene feature of {scene_id!r}")
            if f_scene.shape != (c,):
                raise DataError(
                    f"{path}: scene {scene_id!r} scene feature has shape {f_scene.shape}, "
                    f"expected ({c},)"
                )
        n_objects = struct.unpack("<I", cur.take(4, f"object count of {scene_id!r}"))[0]
        objects = []
        for _ in range(n_objects):
            object_id = _read_str(cur, "object id")
            label = _read_str(cur, f"label of {object_id!r}")
            oflags = cur.take(1, f"flags of {object_id!r}")[0]
            box_vals = struct.unpack("<7d", cur.take(56, f"box of {object_id!r}"))
            f = None
            if oflags & 2:
                f = _read_array(cur, 1, f"feature of {object_id!r}")
                if f.shape != (c,):
                    raise DataError(
                        f"{path}: object {object_id!r} feature has shape {f.shape}, "
                        f"expected ({c},)"
                    )
            objects.append(ObjectRecord(
                object_id=object_id,
                box=Box7(*box_vals),
                label=label,
                is_ood=bool(oflags & 1),
                split="val" if oflags & 4 else "train",
                f=f,
            ))
        yield SceneRecord(scene_id, objects, feature_map, f_scene)


def read_dataset(path: str | Path) -> Dataset:
    dataset = Dataset(read_header(path), list(iter_scenes(path)))
    validate_dataset(dataset, where=str(path))
    return dataset


def validate_dataset(dataset: Dataset, where: str = "dataset") -> None:
    """Structural checks shared by write and read.

    Training scenes must be OOD-free, features must match the header width,
    and in map mode any stored per-object feature must agree with the map at
    the box-center cell.
    """
    header = dataset.header
    id_classes = set(header.classes)
    c = header.channels
    for scene in dataset.scenes:
        if scene.feature_map is not None:
            want = (c, header.grid.height, header.grid.width) if header.grid else (c,)
            if scene.feature_map.shape != want:
                raise DataError(
                    f"{where}: scene {scene.scene_id!r} map shape {scene.feature_map.shape} "
                    f"does not match header channels/grid {want}"
                )
        if scene.f_scene is not None and scene.f_scene.shape != (c,):
            raise DataError(
                f"{where}: scene {scene.scene_id!r} scene feature has shape "
                f"{scene.f_scene.shape}, expected ({c},)"
            )
        for obj in scene.objects:
            if obj.f is not None and obj.f.shape != (c,):
                raise DataError(
                    f"{where}: object {obj.object_id!r} feature has shape {obj.f.shape}, "
                    f"expected ({c},)"
                )
            if obj.split == "train" and obj.is_ood:
                raise DataError(
                    f"{where}: object {obj.object_id!r} in scene {scene.scene_id!r} "
                    "is OOD but assigned to the train split"
                )
            if not obj.is_ood and obj.label not in id_classes:
                raise DataError(
                    f"{where}: object {obj.object_id!r} has label {obj.label!r} "
                    "outside the ID class list"
                )
            if header.mode == MODE_FEATURES and obj.f is None:
                raise DataError(
                    f"{where}: object {obj.object_id!r} lacks a feature vector "
                    "in a per-object-features dataset"
                )
        if header.mode == MODE_MAPS:
            if scene.feature_map is None:
                raise DataError(f"{where}: scene {scene.scene_id!r} lacks a feature map")
            for obj in scene.objects:
                if obj.f is not None:
                    row, col, _ = cell_index(obj.box, header.grid)
                    stored_map_col = scene.feature_map[:, row, col]
                    if not np.allclose(obj.f, stored_map_col, atol=1e-9):
                        raise DataError(
                            f"{where}: object {obj.object_id!r} stored feature disagrees "
                            "with the map at its center cell"
                        )
        else:
            if scene.f_scene is None:
                raise DataError(
                    f"{where}: scene {scene.scene_id!r} lacks a scene feature "
                    "in a per-object-features dataset"
                )


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class BoxProfile:
    """Per-class box-size distribution: means and stds for l, w, h."""

    l_mean: float
    l_std: float
    w_mean: float
    w_std: float
    h_mean: float
    h_std: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything the generator needs; identical specs give identical bytes.

    Class clusters sit on unit directions separated by at least
    ``margin_deg``, scaled to ``feature_gain`` — detector activations for
    well-learned objects stand clear of the noise floor.  OOD clusters keep
    the same margin from every ID center, and OOD features are drawn at
    ``ood_feature_scale`` of the ID magnitude, mirroring the weaker
    activations a detector produces on objects it never trained on.
    """

    seed: int
    num_classes: int = 5
    channels: int = 32
    text_dim: int = 64
    n_train: int = 2000
    n_val_id: int = 500
    n_val_ood: int = 500
    margin_deg: float = 60.0
    noise_sigma: float = 0.3
    feature_gain: float = 2.0
    n_ood_clusters: int = 3
    ood_feature_scale: float = 0.7
    scene_size: int = 16
    mode: str = MODE_MAPS
    grid: GridMeta = GridMeta(x_min=-32.0, y_min=-32.0, cell_size=4.0, height=16, width=16)
    z_range: tuple[float, float] = (-2.5, 0.5)
    box_profiles: tuple[BoxProfile, ...] | None = None

    def class_names(self) -> list[str]:
        return [f"class_{i}" for i in range(self.num_classes)]


def _unit_directions_with_margin(
    rng: np.random.Generator,
    count: int,
    dim: int,
    margin_deg: float,
    against: list[np.ndarray],
) -> list[np.ndarray]:
    """Rejection-sample unit vectors at least margin_deg away from ``against``
    and from each other."""
    min_cos = math.cos(math.radians(margin_deg))
    placed: list[np.ndarray] = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > 20_000 * count:
            raise DataError(
                f"could not place {count} directions with a {margin_deg} degree margin "
                f"in {dim} dimensions"
            )
        cand = rng.normal(size=dim)
        cand /= np.linalg.norm(cand)
        if all(float(cand @ v) <= min_cos for v in [*against, *placed]):
            placed.append(cand)
    return placed


def _resolve_profiles(spec: SyntheticSpec) -> tuple[BoxProfile, ...]:
    if spec.box_profiles is not None:
        if len(spec.box_profiles) != spec.num_classes:
            raise DataError(
                f"{len(spec.box_profiles)} box profiles for {spec.num_classes} classes"
            )
        return spec.box_profiles
    rng = derive_rng(spec.seed, "box-profiles")
    profiles = []
    for _ in range(spec.num_classes):
        l_mean = float(rng.uniform(0.6, 9.0))
        w_mean = float(rng.uniform(0.4, min(l_mean, 3.0)))
        h_mean = float(rng.uniform(0.8, 3.5))
        profiles.append(BoxProfile(
            l_mean=l_mean, l_std=0.1 * l_mean,
            w_mean=w_mean, w_std=0.1 * w_mean,
            h_mean=h_mean, h_std=0.1 * h_mean,
        ))
    return tuple(profiles)


def _sample_box(
    rng: np.random.Generator, spec: SyntheticSpec, profile: BoxProfile, row: int, col: int
) -> Box7:
    """Box whose center is jittered inside the given grid cell."""
    grid = spec.grid
    jx, jy = rng.uniform(-0.49, 0.49, size=2) * grid.cell_size
    x = grid.x_min + (col + 0.5) * grid.cell_size + jx
    y = grid.y_min + (row + 0.5) * grid.cell_size + jy
    z = float(rng.uniform(*spec.z_range))
    l = max(0.1, float(rng.normal(profile.l_mean, profile.l_std)))
    w = max(0.1, float(rng.normal(profile.w_mean, profile.w_std)))
    h = max(0.1, float(rng.normal(profile.h_mean, profile.h_std)))
    theta = float(rng.uniform(-math.pi, math.pi))
    return Box7(x, y, z, l, w, h, theta)


def _build_scene(
    spec: SyntheticSpec,
    scene_id: str,
    split: str,
    entries: list[tuple[str, str, bool, np.ndarray]],
    profiles: tuple[BoxProfile, ...],
    class_to_idx: dict[str, int],
    rng: np.random.Generator,
) -> SceneRecord:
    """Assemble one scene from (object_id, label, is_ood, feature) entries."""
    grid = spec.grid
    n = len(entries)
    cells = rng.choice(grid.height * grid.width, size=n, replace=False)
    generic_profile = BoxProfile(2.0, 0.6, 1.2, 0.3, 1.5, 0.4)
    objects = []
    feature_map = None
    if spec.mode == MODE_MAPS:
        feature_map = rng.normal(0.0, 0.05, size=(spec.channels, grid.height, grid.width))
    for (object_id, label, is_ood, feat), cell in zip(entries, cells):
        row, col = divmod(int(cell), grid.width)
        profile = generic_profile if is_ood else profiles[class_to_idx[label]]
        box = _sample_box(rng, spec, profile, row, col)
        if feature_map is not None:
            feature_map[:, row, col] = feat
        objects.append(ObjectRecord(
            object_id=object_id, box=box, label=label,
            is_ood=is_ood, split=split, f=feat,
        ))
    member_max = np.max(np.stack([o.f for o in objects]), axis=0)
    f_scene = member_max + rng.normal(0.0, 0.1 * spec.noise_sigma, size=spec.channels)
    return SceneRecord(scene_id, objects, feature_map, f_scene)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Build the (train, val) splits for one spec.

    Train scenes hold only ID objects, balanced across classes to within one
    object.  Val scenes mix ID and OOD objects in shuffled order.
    """
    if spec.scene_size < 1:
        raise DataError(f"scene_size must be positive, got {spec.scene_size}")
    if spec.scene_size > spec.grid.height * spec.grid.width:
        raise DataError(
            f"scene_size {spec.scene_size} exceeds the {spec.grid.height}x{spec.grid.width} "
            "grid (objects occupy distinct cells)"
        )
    if spec.n_train < spec.num_classes:
        raise DataError("need at least one training object per class")
    classes = spec.class_names()
    class_to_idx = {c: i for i, c in enumerate(classes)}
    profiles = _resolve_profiles(spec)

    center_rng = derive_rng(spec.seed, "centers")
    id_centers = _unit_directions_with_margin(
        center_rng, spec.num_classes, spec.channels, spec.margin_deg, against=[]
    )
    ood_centers = _unit_directions_with_margin(
        center_rng, spec.n_ood_clusters, spec.channels, spec.margin_deg, against=id_centers
    )

    def id_feature(rng: np.random.Generator, class_idx: int) -> np.ndarray:
        noise = rng.normal(0.0, spec.noise_sigma, size=spec.channels)
        return spec.feature_gain * id_centers[class_idx] + noise

    def ood_feature(rng: np.random.Generator, cluster_idx: int) -> np.ndarray:
        noise = rng.normal(0.0, spec.noise_sigma, size=spec.channels)
        raw = spec.feature_gain * ood_centers[cluster_idx] + noise
        return spec.ood_feature_scale * raw

    # train split: balanced class assignment, shuffled
    label_rng = derive_rng(spec.seed, "train-labels")
    train_class_idx = np.array([i % spec.num_classes for i in range(spec.n_train)])
    label_rng.shuffle(train_class_idx)
    feat_rng = derive_rng(spec.seed, "train-features")
    train_entries = [
        (f"train_{i:05d}", classes[ci], False, id_feature(feat_rng, int(ci)))
        for i, ci in enumerate(train_class_idx)
    ]

    # val split: balanced ID part plus cluster-cycled OOD part, shuffled together
    val_id_idx = np.array([i % spec.num_classes for i in range(spec.n_val_id)])
    derive_rng(spec.seed, "val-id-labels").shuffle(val_id_idx)
    val_feat_rng = derive_rng(spec.seed, "val-features")
    val_entries = [
        (f"val_id_{i:05d}", classes[ci], False, id_feature(val_feat_rng, int(ci)))
        for i, ci in enumerate(val_id_idx)
    ]
    val_entries += [
        (
            f"val_ood_{i:05d}",
            f"anomaly_{i % spec.n_ood_clusters}",
            True,
            ood_feature(val_feat_rng, i % spec.n_ood_clusters),
        )
        for i in range(spec.n_val_ood)
    ]
    order = derive_rng(spec.seed, "val-order").permutation(len(val_entries))
    val_entries = [val_entries[i] for i in order]

    def scenes_for(split: str, entries) -> list[SceneRecord]:
        scenes = []
        for k in range(0, len(entries), spec.scene_size):
            chunk = entries[k:k + spec.scene_size]
            sid = f"{split}_scene_{k // spec.scene_size:04d}"
            rng = derive_rng(spec.seed, "scene", split, sid)
            scenes.append(_build_scene(spec, sid, split, chunk, profiles, class_to_idx, rng))
        return scenes

    counts = {"train": spec.n_train, "val_id": spec.n_val_id, "val_ood": spec.n_val_ood}

    def header() -> DatasetHeader:
        return DatasetHeader(
            mode=spec.mode, channels=spec.channels, text_dim=spec.text_dim,
            classes=list(classes), grid=spec.grid if spec.mode == MODE_MAPS else None,
            counts=dict(counts),
        )

    train = Dataset(header(), scenes_for("train", train_entries))
    val = Dataset(header(), scenes_for("val", val_entries))
    validate_dataset(train, where="synthetic train split")
    validate_dataset(val, where="synthetic val split")
    return train, val
