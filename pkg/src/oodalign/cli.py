"""Command-line entry point.

Four subcommands cover the pipeline: ``synth`` writes a benchmark dataset,
``train`` fits the alignment head, ``eval`` reports separability metrics for
every scoring variant, and ``score`` emits per-object decisions.  Every
option can come from a JSON config file (``--config``) with command-line
flags taking precedence; outputs land under ``--out-dir`` with fixed names
so runs are comparable file-by-file.  Exit codes: 0 success, 2 bad
configuration, 3 bad data, 4 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    MODE_FEATURES,
    MODE_MAPS,
    SyntheticSpec,
    generate_synthetic,
    read_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, NumericError, OodAlignError
from .metrics import evaluate, format_report_table, write_histogram_csv, write_report_json
from .model import FusionConfig, HeadParams
from .prompts import (
    SyntheticEncoderConfig,
    build_id_bank,
    load_embedding_cache,
)
from .scoring import (
    METHODS,
    all_variants,
    calibrate_threshold,
    embed_dataset,
    score_dataset,
    score_rows,
    variant_id,
    write_scores_csv,
)
from .training import CacheTargets, SyntheticTargets, TrainConfig, train

EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload


def _merge_options(args: argparse.Namespace, allowed: dict) -> dict:
    """Defaults, then config-file entries, then explicit flags."""
    merged = {key: default for key, (default, _) in allowed.items()}
    config = _load_config_file(args.config)
    for key, value in config.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        _, cast = allowed[key]
        try:
            merged[key] = cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    for key in allowed:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(sorted(missing))}")
    return merged


_REQUIRED = object()


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


SYNTH_OPTIONS = {
    "seed": (_REQUIRED, int),
    "num_classes": (5, int),
    "channels": (32, int),
    "text_dim": (64, int),
    "n_train": (2000, int),
    "n_val_id": (500, int),
    "n_val_ood": (500, int),
    "margin_deg": (60.0, float),
    "noise_sigma": (0.3, float),
    "feature_gain": (2.0, float),
    "n_ood_clusters": (3, int),
    "ood_feature_scale": (0.7, float),
    "scene_size": (16, int),
    "mode": (MODE_MAPS, str),
}


def cmd_synth(args: argparse.Namespace) -> int:
    opts = _merge_options(args, SYNTH_OPTIONS)
    if opts["mode"] not in (MODE_MAPS, MODE_FEATURES):
        raise ConfigError(f"unknown dataset mode {opts['mode']!r}")
    out = _out_dir(args)
    spec = SyntheticSpec(**opts)
    train_split, val_split = generate_synthetic(spec)
    write_dataset(out / "train.alds", train_split)
    write_dataset(out / "val.alds", val_split)
    n_scenes = len(train_split.scenes) + len(val_split.scenes)
    print(f"wrote train.alds and val.alds ({n_scenes} scenes) to {out}")
    return 0


TRAIN_OPTIONS = {
    "seed": (_REQUIRED, int),
    "dataset": (_REQUIRED, str),
    "text_source": ("synthetic", str),
    "encoder_seed": (0, int),
    "epochs": (5, int),
    "base_lr": (1.5e-4, float),
    "weight_decay": (0.01, float),
    "scene_weight": (0.1, float),
    "use_box": (True, _bool),
    "box_dim": (64, int),
    "tau_init": (0.07, float),
    "use_stored_features": (False, _bool),
    "start_epoch": (0, int),
}


def _make_targets(text_source: str, encoder_seed: int, text_dim: int):
    if text_source == "synthetic":
        return SyntheticTargets(SyntheticEncoderConfig(seed=encoder_seed, dim=text_dim))
    cache = load_embedding_cache(text_source)
    if cache.dim != text_dim:
        raise DataError(
            f"embedding cache dim {cache.dim} does not match dataset text_dim {text_dim}"
        )
    return CacheTargets(cache)


def cmd_train(args: argparse.Namespace) -> int:
    opts = _merge_options(args, TRAIN_OPTIONS)
    out = _out_dir(args)
    dataset = read_dataset(opts["dataset"])
    targets = _make_targets(
        opts["text_source"], opts["encoder_seed"], dataset.header.text_dim
    )
    config = TrainConfig(
        seed=opts["seed"],
        epochs=opts["epochs"],
        base_lr=opts["base_lr"],
        weight_decay=opts["weight_decay"],
        scene_weight=opts["scene_weight"],
        use_box=opts["use_box"],
        box_dim=opts["box_dim"],
        tau_init=opts["tau_init"],
        use_stored_features=opts["use_stored_features"],
    )
    params = train(dataset, targets, config, out, start_epoch=opts["start_epoch"])
    print(f"trained {config.epochs} epochs; final scale {params.scale():.4f}; "
          f"checkpoint.alod written to {out}")
    return 0


EVAL_OPTIONS = {
    "checkpoint": (_REQUIRED, str),
    "dataset": (_REQUIRED, str),
    "text_source": ("synthetic", str),
    "encoder_seed": (0, int),
    "scene_weight": (0.1, float),
    "use_stored_features": (False, _bool),
    "target_tpr": (0.95, float),
    "bins": (20, int),
}


def _bank_for(dataset_header, text_source: str, encoder_seed: int):
    if text_source == "synthetic":
        source = SyntheticEncoderConfig(seed=encoder_seed, dim=dataset_header.text_dim)
    else:
        source = load_embedding_cache(text_source)
        if source.dim != dataset_header.text_dim:
            raise DataError(
                f"embedding cache dim {source.dim} does not match dataset "
                f"text_dim {dataset_header.text_dim}"
            )
    return build_id_bank(dataset_header.classes, source)


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _merge_options(args, EVAL_OPTIONS)
    out = _out_dir(args)
    params = HeadParams.load(opts["checkpoint"])
    dataset = read_dataset(opts["dataset"])
    bank = _bank_for(dataset.header, opts["text_source"], opts["encoder_seed"])
    fusion = FusionConfig(scene_weight=opts["scene_weight"])
    v, index = embed_dataset(params, fusion, dataset, opts["use_stored_features"])
    is_id = np.array([not obj.is_ood for _, obj in index])
    reports = []
    for method, norm_scaling in all_variants():
        variant = variant_id(method, norm_scaling)
        scores = score_rows(v, bank, method, norm_scaling, params.scale())
        reports.append(evaluate(scores, is_id, variant, opts["target_tpr"]))
        write_histogram_csv(out / f"hist_{variant}.csv", scores, is_id, opts["bins"])
    write_report_json(out / "report.json", reports, {
        "n_objects": len(index),
        "target_tpr": opts["target_tpr"],
        "scale": params.scale(),
    })
    print(format_report_table(reports))
    print(f"report.json and histograms written to {out}")
    return 0


SCORE_OPTIONS = {
    "checkpoint": (_REQUIRED, str),
    "dataset": (_REQUIRED, str),
    "text_source": ("synthetic", str),
    "encoder_seed": (0, int),
    "scene_weight": (0.1, float),
    "use_stored_features": (False, _bool),
    "method": ("maxlogit", str),
    "norm_scaling": (True, _bool),
    "threshold": (None, float),
    "target_tpr": (0.95, float),
}


def cmd_score(args: argparse.Namespace) -> int:
    opts = _merge_options(args, SCORE_OPTIONS)
    if opts["method"] not in METHODS:
        raise ConfigError(
            f"unknown scoring method {opts['method']!r}; choose from {METHODS}"
        )
    out = _out_dir(args)
    params = HeadParams.load(opts["checkpoint"])
    dataset = read_dataset(opts["dataset"])
    bank = _bank_for(dataset.header, opts["text_source"], opts["encoder_seed"])
    fusion = FusionConfig(scene_weight=opts["scene_weight"])
    threshold = opts["threshold"]
    if threshold is None:
        # calibrate on the dataset's own ID objects
        v, index = embed_dataset(params, fusion, dataset, opts["use_stored_features"])
        id_rows = np.array([not obj.is_ood for _, obj in index])
        if not id_rows.any():
            raise DataError("cannot calibrate a threshold: dataset has no ID objects")
        id_scores = score_rows(
            v[id_rows], bank, opts["method"], opts["norm_scaling"], params.scale()
        )
        threshold = calibrate_threshold(id_scores, opts["target_tpr"])
    records = score_dataset(
        params, fusion, dataset, bank,
        opts["method"], opts["norm_scaling"], threshold,
        opts["use_stored_features"],
    )
    write_scores_csv(out / "scores.csv", records)
    n_id = sum(1 for r in records if r.decision == "ID")
    print(
        f"{variant_id(opts['method'], opts['norm_scaling'])} threshold {threshold!r}: "
        f"{n_id}/{len(records)} objects accepted as ID; scores.csv written to {out}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_command(sub, name: str, options: dict, handler, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--out-dir", required=True, help="directory for outputs")
    for key, (default, cast) in options.items():
        flag = "--" + key.replace("_", "-")
        if cast is _bool:
            p.add_argument(flag, type=_bool, default=None, metavar="BOOL")
        else:
            p.add_argument(flag, type=cast, default=None)
    p.set_defaults(handler=handler)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodalign",
        description="Post-hoc OOD detection for object-detector features",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_command(sub, "synth", SYNTH_OPTIONS, cmd_synth,
                 "generate a synthetic benchmark dataset")
    _add_command(sub, "train", TRAIN_OPTIONS, cmd_train,
                 "train the alignment head")
    _add_command(sub, "eval", EVAL_OPTIONS, cmd_eval,
                 "evaluate every scoring variant on a labeled dataset")
    _add_command(sub, "score", SCORE_OPTIONS, cmd_score,
                 "score objects and write per-object decisions")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except OodAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for kind, code in EXIT_CODES.items():
            if isinstance(exc, kind):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
