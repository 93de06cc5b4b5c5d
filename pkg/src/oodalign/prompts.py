"""Prompt rendering, text-embedding sources, and the per-class bank.

Two prompt templates exist.  The simple one names the class; the spatial one
additionally spells out the box geometry with two-decimal formatting.  The
spatial template prints dimensions width-first.

Embeddings come from either a cache written by an external encoder run
(class name -> vector, simple prompts only) or from the built-in synthetic
encoder, which fabricates a deterministic unit vector per class and tilts it
by a projection of the box parameters.  The ID bank used for scoring is
always built from box-free prompts, so bank rows depend only on the class
list and the source.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .model import Box7
from .seeding import derive_rng, derive_seed

SIMPLE_FORMAT_ID = "simple-v1"
SPATIAL_FORMAT_ID = "spatial-v1"


class PromptKind(str, Enum):
    SIMPLE = "simple"
    SPATIAL = "spatial"


def render_prompt(kind: PromptKind, prompt_class: str, box: Box7 | None = None) -> str:
    """Render one prompt string; the simple template ignores the box."""
    if kind == PromptKind.SIMPLE:
        return f"This object is a {prompt_class}."
    if box is None:
        raise DataError("spatial prompt rendering requires a box")
    return (
        f"This object is a {prompt_class} located at "
        f"({box.x_c:.2f}, {box.y_c:.2f}, {box.z_c:.2f}), "
        f"with dimensions ({box.w:.2f}m, {box.l:.2f}m, {box.h:.2f}m) "
        f"and orientation {box.theta:.2f} rad."
    )


@dataclass(frozen=True)
class PromptStream:
    """Counter-based deterministic prompt-kind stream for one (epoch, scene)."""

    seed: int
    epoch: int
    scene_id: str


def choose_prompt_kind(stream: PromptStream, object_index: int) -> PromptKind:
    """Fair coin per object, independent across indices, epochs, and scenes."""
    bit = derive_seed(stream.seed, "prompt-kind", stream.epoch, stream.scene_id, object_index) & 1
    return PromptKind.SPATIAL if bit else PromptKind.SIMPLE


# ---------------------------------------------------------------------------
# synthetic text encoder

# fixed scales that bring typical box parameters to roughly unit range
_BOX_SCALES = np.array([1 / 50.0, 1 / 50.0, 1 / 5.0, 1 / 10.0, 1 / 10.0, 1 / 5.0, 1 / math.pi])


@dataclass(frozen=True)
class SyntheticEncoderConfig:
    seed: int
    dim: int
    box_sensitivity: float = 0.25


class SyntheticTextEncoder:
    """Deterministic stand-in for a frozen text tower.

    Each class gets a fixed random unit direction; spatial prompts tilt that
    direction by a shared random projection of the normalized box vector.
    Caches per-class bases so repeated calls are cheap.
    """

    def __init__(self, cfg: SyntheticEncoderConfig):
        if cfg.dim < 1:
            raise DataError(f"encoder dim must be positive, got {cfg.dim}")
        self.cfg = cfg
        self._bases: dict[str, np.ndarray] = {}
        self._projection: np.ndarray | None = None

    def _base(self, prompt_class: str) -> np.ndarray:
        vec = self._bases.get(prompt_class)
        if vec is None:
            rng = derive_rng(self.cfg.seed, "class-base", prompt_class)
            raw = rng.normal(size=self.cfg.dim)
            vec = raw / np.linalg.norm(raw)
            self._bases[prompt_class] = vec
        return vec

    def encode(self, prompt_class: str, box: Box7 | None) -> np.ndarray:
        base = self._base(prompt_class)
        if box is None:
            return base.copy()
        if self._projection is None:
            rng = derive_rng(self.cfg.seed, "box-projection")
            self._projection = rng.normal(size=(self.cfg.dim, 7))
        tilt = self._projection @ (box.as_vector() * _BOX_SCALES)
        vec = base + self.cfg.box_sensitivity * tilt
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            raise NumericError("synthetic text embedding collapsed to zero norm")
        return vec / norm


def synth_text_encode(
    prompt_class: str, box: Box7 | None, cfg: SyntheticEncoderConfig
) -> np.ndarray:
    return SyntheticTextEncoder(cfg).encode(prompt_class, box)


# ---------------------------------------------------------------------------
# embedding cache


@dataclass
class EmbeddingCache:
    """Per-class embeddings exported by an external encoder run."""

    model_name: str
    dim: int
    normalized: bool
    prompt_format_id: str
    entries: dict[str, np.ndarray] = field(default_factory=dict)


def save_embedding_cache(path: str | Path, cache: EmbeddingCache) -> None:
    payload = {
        "model_name": cache.model_name,
        "dim": cache.dim,
        "normalized": cache.normalized,
        "prompt_format_id": cache.prompt_format_id,
        "entries": {cls: [float(x) for x in vec] for cls, vec in cache.entries.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_embedding_cache(path: str | Path) -> EmbeddingCache:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable embedding cache: {exc}") from exc
    for key in ("model_name", "dim", "normalized", "prompt_format_id", "entries"):
        if key not in payload:
            raise DataError(f"{path}: embedding cache is missing field {key!r}")
    dim = int(payload["dim"])
    if dim < 1:
        raise DataError(f"{path}: embedding cache dim must be positive, got {dim}")
    entries: dict[str, np.ndarray] = {}
    for cls, values in payload["entries"].items():
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (dim,):
            raise DataError(
                f"{path}: entry {cls!r} has {vec.shape[0] if vec.ndim == 1 else '?'} values, "
                f"expected {dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise DataError(f"{path}: entry {cls!r} contains non-finite values")
        if payload["normalized"]:
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > 1e-6:
                raise DataError(
                    f"{path}: entry {cls!r} claims unit norm but has norm {norm:.9f}"
                )
        entries[cls] = vec
    return EmbeddingCache(
        model_name=str(payload["model_name"]),
        dim=dim,
        normalized=bool(payload["normalized"]),
        prompt_format_id=str(payload["prompt_format_id"]),
        entries=entries,
    )


# ---------------------------------------------------------------------------
# class lists and the scoring bank


def load_class_list(path: str | Path) -> list[str]:
    """Ordered ID class names, one per line; blank lines are ignored."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read class list {path}: {exc}") from exc
    classes = [line.strip() for line in text.splitlines() if line.strip()]
    if not classes:
        raise DataError(f"{path}: class list is empty")
    if len(set(classes)) != len(classes):
        raise DataError(f"{path}: class list contains duplicates")
    return classes


def save_class_list(path: str | Path, classes: list[str]) -> None:
    Path(path).write_text("".join(f"{cls}\n" for cls in classes))


@dataclass(frozen=True)
class Bank:
    """Stacked per-class text embeddings the scorer compares against."""

    classes: tuple[str, ...]
    vectors: np.ndarray  # (K, dim)


def build_id_bank(
    classes: list[str], source: "EmbeddingCache | SyntheticEncoderConfig"
) -> Bank:
    """One bank row per ID class, in list order, from box-free prompts.

    Cache rows are taken verbatim; synthetic rows come from the class base
    directions.  Either way the bank is independent of any box geometry.
    """
    if not classes:
        raise DataError("cannot build a bank from an empty class list")
    rows = []
    if isinstance(source, EmbeddingCache):
        for cls in classes:
            if cls not in source.entries:
                raise DataError(f"class {cls!r} is missing from the embedding cache")
            rows.append(source.entries[cls])
    else:
        encoder = SyntheticTextEncoder(source)
        for cls in classes:
            rows.append(encoder.encode(cls, None))
    return Bank(classes=tuple(classes), vectors=np.stack(rows))
