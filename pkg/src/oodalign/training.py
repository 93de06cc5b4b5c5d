"""Contrastive alignment training: loss, optimizer, schedule, loop.

The loss treats every same-label pair in a scene as a positive and every
other pair as a negative, over norm-free cosine similarities sharpened by a
learnable temperature.  Optimization is plain AdamW with decoupled weight
decay and a halving learning-rate schedule.  Checkpoints and optimizer
state are written after every epoch so a run can resume bit-identically.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensors, write_tensors
from .data import MODE_MAPS, Dataset
from .errors import DataError, NumericError
from .model import (
    MAX_SCALE,
    MIN_SCALE,
    Box7,
    FusionConfig,
    HeadParams,
    ModelConfig,
    forward_scene,
)
from .prompts import (
    EmbeddingCache,
    PromptKind,
    PromptStream,
    SyntheticEncoderConfig,
    SyntheticTextEncoder,
    choose_prompt_kind,
)
from .seeding import derive_rng
from .tensor import ShapeError, Tape, Tensor, _finish


def multi_positive_infonce(
    v: Tensor, text: np.ndarray, labels: np.ndarray, log_scale: Tensor
) -> Tensor:
    """Scalar contrastive loss over one batch of aligned embeddings.

    ``v`` holds unnormalized object embeddings (one row each), ``text`` the
    matching text embeddings, ``labels`` the class of each row.  For anchor
    i every j with the same label is a positive (i itself included, so each
    anchor has at least one).  With z_ij the cosine between v_i and text_j
    times the clamped exp(log_scale):

        loss = -(1/N) sum_i (1/|P_i|) sum_{j in P_i} (z_ij - logsumexp_j z_ij)

    Gradients flow to ``v`` and ``log_scale``; the text side is frozen.  The
    temperature gradient is zero while the clamp at [1, 100] is active.
    """
    vd = v.data
    td = np.asarray(text, dtype=np.float64)
    lab = np.asarray(labels)
    if vd.ndim != 2:
        raise ShapeError(f"loss expects a matrix of embeddings, got shape {v.shape}")
    if td.shape != vd.shape:
        raise ShapeError(f"text rows {td.shape} do not match embeddings {vd.shape}")
    n = vd.shape[0]
    if lab.shape != (n,):
        raise ShapeError(f"{lab.shape} labels for {n} embeddings")
    if n == 0:
        raise ShapeError("loss needs at least one row")
    if log_scale.data.ndim != 0:
        raise ShapeError(f"log_scale must be a scalar, got shape {log_scale.shape}")

    v_norms = np.linalg.norm(vd, axis=1)
    t_norms = np.linalg.norm(td, axis=1)
    if np.any(v_norms < 1e-12) or np.any(t_norms < 1e-12):
        raise NumericError("zero-norm embedding: cosine similarity is undefined")
    vhat = vd / v_norms[:, None]
    that = td / t_norms[:, None]

    ell = float(log_scale.item())
    raw_scale = math.exp(ell)
    scale = min(max(raw_scale, MIN_SCALE), MAX_SCALE)
    clamped = scale != raw_scale

    cos = vhat @ that.T
    z = scale * cos
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    mask = lab[:, None] == lab[None, :]
    pos_counts = mask.sum(axis=1)
    per_anchor = (np.where(mask, z, 0.0).sum(axis=1) / pos_counts) - lse
    loss = -float(per_anchor.mean())

    def bwd(gout):
        g = float(gout)
        softmax = np.exp(z - lse[:, None])
        gz = g * (softmax - mask / pos_counts[:, None]) / n
        d_ell = np.zeros(()) if clamped else np.asarray((gz * z).sum())
        row_dot = (gz * cos).sum(axis=1)
        dv = (scale / v_norms)[:, None] * (gz @ that - row_dot[:, None] * vhat)
        return [dv, d_ell]

    return _finish(np.asarray(loss), (v, log_scale), bwd)


class AdamW:
    """Adam with decoupled weight decay, matching the standard recipe:
    bias-corrected moments, then p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps).
    Parameters listed in ``no_decay`` skip the decay term.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        no_decay: frozenset[str] | set[str] = frozenset(),
    ):
        if not params:
            raise DataError("optimizer needs at least one parameter")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, tensor in self.params.items():
            if name not in grads:
                raise DataError(f"missing gradient for parameter {name!r}")
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != tensor.data.shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, "
                    f"parameter has {tensor.data.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p = tensor.data.copy()
            if name not in self.no_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            tensor.assign(p)

    # -- state I/O (same container format as checkpoints) -------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        state = {"step_count": np.asarray(float(self.step_count))}
        for name in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def save(self, path: str | Path) -> None:
        write_tensors(path, self.state_tensors())

    def load(self, path: str | Path) -> None:
        state = read_tensors(path)
        try:
            self.step_count = int(state["step_count"])
            for name, tensor in self.params.items():
                m, v = state[f"m.{name}"], state[f"v.{name}"]
                if m.shape != tensor.data.shape or v.shape != tensor.data.shape:
                    raise DataError(
                        f"{path}: optimizer moments for {name!r} have the wrong shape"
                    )
                self.m[name] = m
                self.v[name] = v
        except KeyError as exc:
            raise DataError(f"{path}: optimizer state lacks tensor {exc}") from exc


def lr_at(base_lr: float, epoch: int) -> float:
    """Learning rate for a zero-based epoch: halved every two epochs."""
    return base_lr * 0.5 ** (epoch // 2)


# ---------------------------------------------------------------------------
# text targets


class SyntheticTargets:
    """Per-object text embeddings from the deterministic stand-in encoder;
    spatial prompts condition on the box."""

    supports_spatial = True

    def __init__(self, cfg: SyntheticEncoderConfig):
        self._encoder = SyntheticTextEncoder(cfg)

    def rows(
        self, labels: list[str], boxes: list[Box7], kinds: list[PromptKind]
    ) -> np.ndarray:
        return np.stack([
            self._encoder.encode(label, box if kind is PromptKind.SPATIAL else None)
            for label, box, kind in zip(labels, boxes, kinds)
        ])


class CacheTargets:
    """Per-object text embeddings read from an exported cache.

    The cache is keyed by class alone, so it can only serve box-free
    prompts; the loop never asks it for spatial ones.
    """

    supports_spatial = False

    def __init__(self, cache: EmbeddingCache):
        self._cache = cache

    def rows(
        self, labels: list[str], boxes: list[Box7], kinds: list[PromptKind]
    ) -> np.ndarray:
        out = []
        for label in labels:
            if label not in self._cache.entries:
                raise DataError(f"class {label!r} is missing from the embedding cache")
            out.append(self._cache.entries[label])
        return np.stack(out)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 5
    base_lr: float = 1.5e-4
    weight_decay: float = 0.01
    scene_weight: float = 0.1
    use_box: bool = True
    box_dim: int = 64
    tau_init: float = 0.07
    use_stored_features: bool = False
    trainable_prefixes: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError(f"epochs must be positive, got {self.epochs}")
        if self.base_lr <= 0.0:
            raise DataError(f"base_lr must be positive, got {self.base_lr}")


def checkpoint_name(epoch: int) -> str:
    """Checkpoint written after completing the given number of epochs."""
    return f"checkpoint_epoch{epoch:03d}.alod"


def optimizer_name(epoch: int) -> str:
    return f"optimizer_epoch{epoch:03d}.alod"


# the CNN adapter is bypassed entirely when features come precomputed
_ADAPTER_PREFIXES = ("conv1_", "bn1_", "conv2_", "bn2_")


def _trainable(params: HeadParams, config: TrainConfig, use_map: bool) -> dict[str, Tensor]:
    named = params.named_parameters()
    if not use_map:
        named = {
            name: t for name, t in named.items()
            if not name.startswith(_ADAPTER_PREFIXES)
        }
    if config.trainable_prefixes is None:
        return named
    picked = {
        name: t
        for name, t in named.items()
        if any(name.startswith(p) for p in config.trainable_prefixes)
    }
    if not picked:
        raise DataError(
            f"no parameters match trainable prefixes {config.trainable_prefixes!r}"
        )
    return picked


def train(
    dataset: Dataset,
    targets: SyntheticTargets | CacheTargets,
    config: TrainConfig,
    out_dir: str | Path,
    start_epoch: int = 0,
) -> HeadParams:
    """Run (or resume) training; returns the final parameters.

    ``start_epoch`` counts completed epochs: 0 trains from scratch, k picks
    up after epoch k using its checkpoint and optimizer sidecar.  Each step
    consumes one scene; scene order reshuffles every epoch from the run
    seed, so a resumed run retraces the exact unresumed step sequence.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = dataset.header
    scenes = [s for s in dataset.scenes if s.objects]
    if not scenes:
        raise DataError("training dataset has no scenes with objects")
    if not 0 <= start_epoch < config.epochs:
        raise DataError(
            f"start_epoch {start_epoch} outside [0, {config.epochs})"
        )

    cfg = ModelConfig(
        channels=header.channels,
        text_dim=header.text_dim,
        box_dim=config.box_dim,
        use_box=config.use_box,
        tau_init=config.tau_init,
    )
    if start_epoch == 0:
        params = HeadParams.initialize(cfg, config.seed)
    else:
        params = HeadParams.load(out_dir / checkpoint_name(start_epoch))
    use_map = header.mode == MODE_MAPS and not config.use_stored_features
    fusion = FusionConfig(scene_weight=config.scene_weight)
    trainable = _trainable(params, config, use_map)
    opt = AdamW(
        trainable,
        lr=lr_at(config.base_lr, start_epoch),
        weight_decay=config.weight_decay,
        no_decay=params.no_decay_names() & set(trainable),
    )
    if start_epoch > 0:
        opt.load(out_dir / optimizer_name(start_epoch))

    loss_path = out_dir / "loss.csv"
    mode = "a" if start_epoch > 0 and loss_path.exists() else "w"
    with open(loss_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "step", "lr", "loss", "scale"])
        step = start_epoch * len(scenes)
        for epoch in range(start_epoch, config.epochs):
            opt.lr = lr_at(config.base_lr, epoch)
            order = derive_rng(config.seed, "order", epoch).permutation(len(scenes))
            for scene_pos in order:
                scene = scenes[int(scene_pos)]
                boxes = [o.box for o in scene.objects]
                labels = [o.label for o in scene.objects]
                if targets.supports_spatial:
                    stream = PromptStream(config.seed, epoch, scene.scene_id)
                    kinds = [choose_prompt_kind(stream, i) for i in range(len(boxes))]
                else:
                    kinds = [PromptKind.SIMPLE] * len(boxes)
                text = targets.rows(labels, boxes, kinds)
                with Tape() as tape:
                    if use_map:
                        v = forward_scene(
                            params, fusion, boxes,
                            feature_map=Tensor(scene.feature_map), grid=header.grid,
                            mode="train",
                        )
                    else:
                        if scene.f_scene is None or any(o.f is None for o in scene.objects):
                            raise DataError(
                                f"scene {scene.scene_id!r} lacks stored features "
                                "for adapter-bypass training"
                            )
                        v = forward_scene(
                            params, fusion, boxes,
                            f_objs=np.stack([o.f for o in scene.objects]),
                            f_scene=scene.f_scene,
                            mode="train",
                        )
                    loss = multi_positive_infonce(
                        v, text, np.asarray(labels), params.log_scale
                    )
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError(f"non-finite training loss at step {step}")
                gmap = tape.backward(loss)
                opt.step({name: gmap.of(t) for name, t in trainable.items()})
                params.clamp_scale()
                step += 1
                writer.writerow([
                    epoch, step, repr(opt.lr), repr(loss_value), repr(params.scale()),
                ])
            params.save(out_dir / checkpoint_name(epoch + 1))
            opt.save(out_dir / optimizer_name(epoch + 1))
    params.save(out_dir / "checkpoint.alod")
    return params
