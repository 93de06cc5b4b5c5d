"""Detection scores, thresholding, and per-object decisions.

A trained head maps each object to an embedding v; scores compare v against
the bank of per-class text embeddings.  All methods produce "higher means
more in-distribution" scores, optionally multiplied by ||v|| — the embedding
norm carries evidence the cosine throws away, since the head has no reason
to produce confident, large embeddings for objects unlike anything it
trained on.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MODE_MAPS, Dataset, ObjectRecord
from .errors import DataError, NumericError
from .model import FusionConfig, HeadParams, forward_scene
from .prompts import Bank
from .tensor import Tensor

METHODS = ("maxlogit", "msp", "energy")


def similarity_logits(v: np.ndarray, bank: Bank) -> np.ndarray:
    """Cosine similarity of each embedding row against every bank class."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if v.shape[1] != bank.vectors.shape[1]:
        raise DataError(
            f"embedding dim {v.shape[1]} does not match bank dim {bank.vectors.shape[1]}"
        )
    v_norms = np.linalg.norm(v, axis=1)
    b_norms = np.linalg.norm(bank.vectors, axis=1)
    if np.any(v_norms < 1e-12):
        raise NumericError("zero-norm embedding: cosine similarity is undefined")
    if np.any(b_norms < 1e-12):
        raise NumericError("zero-norm bank row: cosine similarity is undefined")
    return (v / v_norms[:, None]) @ (bank.vectors / b_norms[:, None]).T


def score_rows(
    v: np.ndarray, bank: Bank, method: str, norm_scaling: bool, scale: float
) -> np.ndarray:
    """One score per embedding row.

    maxlogit: best raw cosine.  msp: best softmax probability of the
    temperature-sharpened cosines.  energy: logsumexp of the sharpened
    cosines, divided back by the scale so magnitudes stay comparable.
    ``norm_scaling`` multiplies by the embedding norm.
    """
    if method not in METHODS:
        raise DataError(f"unknown scoring method {method!r}; choose from {METHODS}")
    if scale <= 0.0:
        raise DataError(f"temperature scale must be positive, got {scale}")
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    cos = similarity_logits(v, bank)
    z = scale * cos
    zmax = z.max(axis=1)
    if method == "maxlogit":
        out = cos.max(axis=1)
    elif method == "msp":
        exp = np.exp(z - zmax[:, None])
        out = exp.max(axis=1) / exp.sum(axis=1)
    else:
        out = (zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))) / scale
    if norm_scaling:
        out = out * np.linalg.norm(v, axis=1)
    return out


def variant_id(method: str, norm_scaling: bool) -> str:
    """Stable name for one method/norm combination, used in filenames."""
    if method not in METHODS:
        raise DataError(f"unknown scoring method {method!r}; choose from {METHODS}")
    return f"{method}_{'norm' if norm_scaling else 'raw'}"


def all_variants() -> list[tuple[str, bool]]:
    return [(m, ns) for m in METHODS for ns in (False, True)]


def calibrate_threshold(id_scores: np.ndarray, target_tpr: float = 0.95) -> float:
    """Largest threshold that keeps at least ``target_tpr`` of the ID scores
    at or above it (decisions are boundary-inclusive)."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    if id_scores.size == 0:
        raise DataError("cannot calibrate a threshold from zero ID scores")
    if not 0.0 < target_tpr <= 1.0:
        raise DataError(f"target TPR must lie in (0, 1], got {target_tpr}")
    n = id_scores.size
    for cand in np.unique(id_scores)[::-1]:
        if np.count_nonzero(id_scores >= cand) / n >= target_tpr:
            return float(cand)
    return float(id_scores.min())


def decide(scores: np.ndarray, threshold: float) -> list[str]:
    """Per-row label: "ID" when the score reaches the threshold, else "OOD"."""
    return ["ID" if s >= threshold else "OOD" for s in np.atleast_1d(scores)]


# ---------------------------------------------------------------------------
# dataset embedding and score records


def embed_dataset(
    params: HeadParams,
    fusion: FusionConfig,
    dataset: Dataset,
    use_stored_features: bool = False,
) -> tuple[np.ndarray, list[tuple[str, ObjectRecord]]]:
    """Eval-mode embeddings for every object, one row each, scene-batched.

    Returns the (M, text_dim) matrix and the matching (scene_id, object)
    pairs in row order.
    """
    header = dataset.header
    if header.channels != params.cfg.channels:
        raise DataError(
            f"dataset has {header.channels} channels, checkpoint expects "
            f"{params.cfg.channels}"
        )
    use_map = header.mode == MODE_MAPS and not use_stored_features
    rows = []
    index: list[tuple[str, ObjectRecord]] = []
    for scene in dataset.scenes:
        if not scene.objects:
            continue
        boxes = [o.box for o in scene.objects]
        if use_map:
            v = forward_scene(
                params, fusion, boxes,
                feature_map=Tensor(scene.feature_map), grid=header.grid,
                mode="eval",
            )
        else:
            if scene.f_scene is None or any(o.f is None for o in scene.objects):
                raise DataError(
                    f"scene {scene.scene_id!r} lacks stored features "
                    "for adapter-bypass evaluation"
                )
            v = forward_scene(
                params, fusion, boxes,
                f_objs=np.stack([o.f for o in scene.objects]),
                f_scene=scene.f_scene,
                mode="eval",
            )
        rows.append(v.data)
        index.extend((scene.scene_id, o) for o in scene.objects)
    if not rows:
        raise DataError("dataset has no scenes with objects to embed")
    return np.concatenate(rows, axis=0), index


@dataclass(frozen=True)
class ScoreRecord:
    scene_id: str
    object_id: str
    label: str
    is_ood: bool
    score: float
    decision: str


def score_dataset(
    params: HeadParams,
    fusion: FusionConfig,
    dataset: Dataset,
    bank: Bank,
    method: str,
    norm_scaling: bool,
    threshold: float,
    use_stored_features: bool = False,
) -> list[ScoreRecord]:
    v, index = embed_dataset(params, fusion, dataset, use_stored_features)
    scores = score_rows(v, bank, method, norm_scaling, params.scale())
    decisions = decide(scores, threshold)
    return [
        ScoreRecord(
            scene_id=scene_id, object_id=obj.object_id, label=obj.label,
            is_ood=obj.is_ood, score=float(s), decision=d,
        )
        for (scene_id, obj), s, d in zip(index, scores, decisions)
    ]


def write_scores_csv(path: str | Path, records: list[ScoreRecord]) -> None:
    """Byte-deterministic CSV: repr-formatted scores, row order preserved."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "object_id", "label", "is_ood", "score", "decision"])
        for r in records:
            writer.writerow([
                r.scene_id, r.object_id, r.label, int(r.is_ood), repr(r.score), r.decision,
            ])
