"""Command-line orchestration of the experiments: the 1-D Gaussian study,
synthetic scene generation, estimator training, scoring, metric evaluation,
and the cosine-distance extrapolation analysis.

Every subcommand is deterministic given its config, reads a flat key=value
config file, and writes a manifest JSON recording the resolved config, its
hash, the code version, and checksums of all output files.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evidential as ev
from . import metrics
from . import model as mdl
from .data import (
    DataError,
    anomaly_mix,
    class_means,
    ellipse_mask,
    gen_gaussian_1d,
    analytic_gaussian_lr,
    gen_synthetic_scene,
    make_feature_object,
    read_tensor_file,
    sample_unit_directions,
    write_tensor_file,
)
from .model import TrainingDivergedError
from .numkernel import Rng

__all__ = ["ConfigError", "main", "run_command", "load_config"]


class ConfigError(ValueError):
    """Invalid config file, unknown key, bad value, or missing input path."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_paths(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty path list")
    return parts


def _parse_ints(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


# key -> (converter, default); required keys carry the REQUIRED sentinel
REQUIRED = object()

SCHEMAS: dict[str, dict] = {
    "toy-gaussian": {
        "seed": (int, 0),
        "n_per_class": (int, 100_000),
        "mu0": (float, -0.4),
        "mu1": (float, 0.4),
        "epochs": (int, 100),
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 1024),
        "hidden": (int, 16),
        "patience": (int, 5),
        "val_fraction": (float, 0.1),
        "grid_lo": (float, -6.0),
        "grid_hi": (float, 6.0),
        "grid_step": (float, 0.05),
    },
    "train": {
        "features": (_parse_paths, REQUIRED),
        "labels": (_parse_paths, REQUIRED),
        "head": (str, "evidential"),
        "hidden_dims": (_parse_ints, [256, 64]),
        "epochs": (int, 10),
        "learning_rate": (float, 2e-5),
        "batch_size": (int, 1024),
        "seed": (int, 0),
        "early_stopping": (_parse_bool, False),
        "patience": (int, 5),
        "val_fraction": (float, 0.1),
    },
    "score": {
        "checkpoint": (str, REQUIRED),
        "features": (str, REQUIRED),
        "head": (str, ""),
        "out_height": (int, 0),
        "out_width": (int, 0),
        "sigma": (float, 1.0),
        "seed": (int, 0),
    },
    "eval": {
        "scores": (_parse_paths, REQUIRED),
        "labels": (_parse_paths, REQUIRED),
        "seed": (int, 0),
    },
    "extrapolate": {
        "train_features": (str, REQUIRED),
        "eval_features": (str, REQUIRED),
        "checkpoint_edl": (str, ""),
        "checkpoint_bce": (str, ""),
        "bin_width": (float, 0.05),
        "seed": (int, 0),
    },
    "gen-synthetic": {
        "seed": (int, 0),
        "scene_seed": (int, 100),
        "n_scenes": (int, 1),
        "height": (int, 64),
        "width": (int, 64),
        "dim": (int, 16),
        "n_classes": (int, 4),
        "noise_sigma": (float, 0.1),
        "mean_scale": (float, 1.0),
        "min_angle": (float, 0.5),
        "n_ood_directions": (int, 2),
        "ood_index": (int, 0),
        "ood_per_scene": (_parse_bool, False),
        "paste_ood": (_parse_bool, True),
        "ood_sigma": (float, 0.8),
        "ood_min_size": (int, 8),
        "ood_max_size": (int, 16),
        "scale_lo": (float, 0.5),
        "scale_hi": (float, 2.0),
    },
}


def load_config(path) -> dict[str, str]:
    """Parse a flat key=value text file; '#' starts a comment line."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def resolve_config(command: str, raw: dict[str, str], seed_override=None) -> dict:
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    resolved = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                resolved[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r} for {command}")
        else:
            resolved[key] = list(default) if isinstance(default, list) else default
    if seed_override is not None:
        if "seed" in schema:
            resolved["seed"] = int(seed_override)
        else:  # pragma: no cover - every schema carries a seed today
            raise ConfigError(f"{command} takes no seed")
    return resolved


def _require_files(resolved: dict, keys: list[str]) -> None:
    for key in keys:
        value = resolved[key]
        paths = value if isinstance(value, list) else [value]
        for p in paths:
            if p and not Path(p).is_file():
                raise ConfigError(f"config key {key!r}: no such file: {p}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()


def _write_manifest(out_dir: Path, command: str, resolved: dict, outputs) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "config_sha256": _config_hash(resolved),
        "outputs": {name: _sha256(out_dir / name) for name in outputs},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")


def _score_map_from_model(model: mdl.Estimator, fmap: np.ndarray) -> np.ndarray:
    prediction = mdl.predict_map(model, fmap)
    if model.head == "evidential":
        return ev.lr_score(prediction)
    return ev.lr_from_sigmoid(prediction)


def _prob_rows_from_model(model: mdl.Estimator, rows: np.ndarray) -> np.ndarray:
    logits = mdl.forward(model, rows)
    if model.head == "evidential":
        alpha = ev.dirichlet_from_evidence(ev.evidence_from_logits(logits))
        return ev.expected_prob(alpha)[:, 1]
    return ev.sigmoid(logits[:, 0])


def cmd_toy_gaussian(resolved: dict, out_dir: Path) -> list[str]:
    seed = resolved["seed"]
    features, labels = gen_gaussian_1d(
        resolved["n_per_class"], resolved["mu0"], resolved["mu1"], seed
    )
    common = dict(
        epochs=resolved["epochs"],
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        early_stopping=True,
        patience=resolved["patience"],
        val_fraction=resolved["val_fraction"],
    )
    hidden = resolved["hidden"]
    m_edl, rep_edl = mdl.train(
        mdl.init_model([1, hidden, 2], seed + 3, "evidential"),
        features,
        labels,
        mdl.TrainConfig(seed=seed + 1, head="evidential", **common),
    )
    m_bce, rep_bce = mdl.train(
        mdl.init_model([1, hidden, 1], seed + 4, "sigmoid"),
        features,
        labels,
        mdl.TrainConfig(seed=seed + 2, head="sigmoid", **common),
    )

    lo, hi, step = resolved["grid_lo"], resolved["grid_hi"], resolved["grid_step"]
    n_grid = int(round((hi - lo) / step)) + 1
    x = np.linspace(lo, hi, n_grid)
    alpha = ev.dirichlet_from_evidence(
        ev.evidence_from_logits(mdl.forward(m_edl, x.reshape(-1, 1)))
    )
    p_edl = ev.expected_prob(alpha)[:, 1]
    vac = ev.vacuity(alpha)
    lr_edl = ev.lr_score(alpha)
    p_bce = ev.sigmoid(mdl.forward(m_bce, x.reshape(-1, 1))[:, 0])
    lr_true = analytic_gaussian_lr(x, resolved["mu0"], resolved["mu1"])
    entropy = ev.binary_entropy(p_bce)

    lines = ["x,p_edl,vacuity,p_bce,entropy_bce,lr_edl,lr_true"]
    for i in range(n_grid):
        lines.append(
            f"{x[i]:.10g},{p_edl[i]:.10g},{vac[i]:.10g},{p_bce[i]:.10g},"
            f"{entropy[i]:.10g},{lr_edl[i]:.10g},{lr_true[i]:.10g}"
        )
    (out_dir / "toy_grid.csv").write_text("\n".join(lines) + "\n", "utf-8")

    i0 = int(np.argmin(np.abs(x)))
    fit = np.abs(x) <= 2.0
    slope = float(np.polyfit(x[fit], np.log(lr_edl[fit]), 1)[0])
    summary = {
        "p_edl_at_0": float(p_edl[i0]),
        "p_edl_at_hi": float(p_edl[-1]),
        "p_bce_at_hi": float(p_bce[-1]),
        "vacuity_at_0": float(vac[i0]),
        "vacuity_at_lo": float(vac[0]),
        "vacuity_at_hi": float(vac[-1]),
        "vacuity_tail_center_ratio": float(min(vac[0], vac[-1]) / vac[i0]),
        "lnlr_slope_center": slope,
        "lr_true_at_0": float(lr_true[i0]),
        "edl_epochs_run": rep_edl.epochs_run,
        "bce_epochs_run": rep_bce.epochs_run,
        "edl_best_epoch": rep_edl.best_epoch,
        "bce_best_epoch": rep_bce.best_epoch,
    }
    _write_json(out_dir / "toy_summary.json", summary)
    return ["toy_grid.csv", "toy_summary.json"]


def _load_pixel_rows(feature_paths, label_paths):
    if len(feature_paths) != len(label_paths):
        raise DataError("train: features and labels lists differ in length")
    xs, ys = [], []
    dim = None
    for fpath, lpath in zip(feature_paths, label_paths):
        frec = read_tensor_file(fpath)
        lrec = read_tensor_file(lpath)
        if "features" not in frec:
            raise DataError(f"{fpath}: missing 'features' record")
        if "labels" not in lrec:
            raise DataError(f"{lpath}: missing 'labels' record")
        fm = frec["features"]
        lab = lrec["labels"]
        if fm.ndim != 3:
            raise DataError(f"{fpath}: 'features' must be H x W x D")
        if lab.shape != fm.shape[:2]:
            raise DataError(
                f"{lpath}: labels shape {lab.shape} does not match "
                f"features {fm.shape[:2]}"
            )
        if dim is None:
            dim = fm.shape[2]
        elif fm.shape[2] != dim:
            raise DataError(f"{fpath}: feature dim {fm.shape[2]} != {dim}")
        if not np.isin(lab, (0, 1)).all():
            bad = sorted(set(np.unique(lab)) - {0, 1})
            raise DataError(f"{lpath}: labels contain non-binary values {bad}")
        xs.append(fm.reshape(-1, dim))
        ys.append(lab.reshape(-1))
    return np.concatenate(xs), np.concatenate(ys), dim


def cmd_train(resolved: dict, out_dir: Path) -> list[str]:
    x, y, dim = _load_pixel_rows(resolved["features"], resolved["labels"])
    head = resolved["head"]
    if head not in mdl.HEAD_WIDTHS:
        raise ConfigError(f"unknown head: {head!r}")
    dims = [dim, *resolved["hidden_dims"], mdl.HEAD_WIDTHS[head]]
    cfg = mdl.TrainConfig(
        epochs=resolved["epochs"],
        learning_rate=resolved["learning_rate"],
        batch_size=resolved["batch_size"],
        seed=resolved["seed"] + 1,
        head=head,
        early_stopping=resolved["early_stopping"],
        patience=resolved["patience"],
        val_fraction=resolved["val_fraction"],
    )
    model, report = mdl.train(
        mdl.init_model(dims, resolved["seed"], head), x, y, cfg
    )
    mdl.save_model(out_dir / "model.ulre", model)
    _write_json(
        out_dir / "train_report.json",
        {
            "train_loss": report.train_loss,
            "val_loss": report.val_loss,
            "lambdas": report.lambdas,
            "epochs_run": report.epochs_run,
            "stopped_epoch": report.stopped_epoch,
            "best_epoch": report.best_epoch,
            "n_train": report.n_train,
            "n_val": report.n_val,
            "layer_dims": dims,
        },
    )
    return ["model.ulre", "train_report.json"]


def cmd_score(resolved: dict, out_dir: Path) -> list[str]:
    model = mdl.load_model(resolved["checkpoint"])
    if resolved["head"] and resolved["head"] != model.head:
        raise DataError(
            f"checkpoint head {model.head!r} does not match requested "
            f"{resolved['head']!r}"
        )
    frec = read_tensor_file(resolved["features"])
    if "features" not in frec:
        raise DataError(f"{resolved['features']}: missing 'features' record")
    fmap = frec["features"]
    if fmap.ndim != 3:
        raise DataError(f"{resolved['features']}: 'features' must be H x W x D")
    raw = _score_map_from_model(model, fmap)
    out_h = resolved["out_height"] or fmap.shape[0]
    out_w = resolved["out_width"] or fmap.shape[1]
    scores = metrics.postprocess_scores(raw, out_h, out_w, resolved["sigma"])
    write_tensor_file(out_dir / "scores.ulre", {"scores": scores})
    return ["scores.ulre"]


def cmd_eval(resolved: dict, out_dir: Path) -> list[str]:
    score_paths = resolved["scores"]
    label_paths = resolved["labels"]
    if len(score_paths) != len(label_paths):
        raise DataError("eval: scores and labels lists differ in length")
    all_scores, all_labels, per_file = [], [], []
    for spath, lpath in zip(score_paths, label_paths):
        srec = read_tensor_file(spath)
        lrec = read_tensor_file(lpath)
        if "scores" not in srec:
            raise DataError(f"{spath}: missing 'scores' record")
        if "labels" not in lrec:
            raise DataError(f"{lpath}: missing 'labels' record")
        s = srec["scores"]
        lab = lrec["labels"]
        if s.shape != lab.shape:
            raise DataError(
                f"eval: scores {s.shape} and labels {lab.shape} shapes differ"
            )
        if not np.isin(lab, (0, 1)).all():
            raise DataError(f"{lpath}: labels contain non-binary values")
        all_scores.append(s.ravel())
        all_labels.append(lab.ravel())
        per_file.append((spath, s.ravel(), lab.ravel()))
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    try:
        payload = {
            "ap": metrics.average_precision(scores, labels),
            "fpr95": metrics.fpr_at_95_tpr(scores, labels),
            "n_pos": int(labels.sum()),
            "n_neg": int(len(labels) - labels.sum()),
        }
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if len(per_file) > 1:
        breakdown = []
        for spath, s, lab in per_file:
            entry = {"scores_file": str(spath)}
            if 0 < lab.sum() < len(lab):
                entry["ap"] = metrics.average_precision(s, lab)
                entry["fpr95"] = metrics.fpr_at_95_tpr(s, lab)
            breakdown.append(entry)
        payload["per_file"] = breakdown
    _write_json(out_dir / "metrics.json", payload)
    return ["metrics.json"]


def cmd_extrapolate(resolved: dict, out_dir: Path) -> list[str]:
    checkpoints = {
        head: resolved[f"checkpoint_{head}"]
        for head in ("edl", "bce")
        if resolved[f"checkpoint_{head}"]
    }
    if not checkpoints:
        raise ConfigError("extrapolate: provide checkpoint_edl and/or checkpoint_bce")
    trec = read_tensor_file(resolved["train_features"])
    for record in ("features", "class_ids"):
        if record not in trec:
            raise DataError(f"{resolved['train_features']}: missing {record!r} record")
    feats = trec["features"]
    ids = trec["class_ids"]
    if feats.ndim != 3 or ids.shape != feats.shape[:2]:
        raise DataError("extrapolate: malformed training features/class_ids")
    flat_ids = ids.reshape(-1)
    present = np.unique(flat_ids)
    expected = np.arange(present.max() + 1) if len(present) else present
    missing = sorted(set(expected.tolist()) - set(present.tolist()))
    if missing:
        raise DataError(f"extrapolate: class ids missing from class_ids: {missing}")
    means = class_means(feats.reshape(-1, feats.shape[2]), flat_ids)

    erec = read_tensor_file(resolved["eval_features"])
    if "features" not in erec:
        raise DataError(f"{resolved['eval_features']}: missing 'features' record")
    emap = erec["features"]
    if emap.ndim != 3 or emap.shape[2] != feats.shape[2]:
        raise DataError("extrapolate: eval features dim mismatch")
    rows = emap.reshape(-1, emap.shape[2])

    outputs = []
    for head, ckpt in checkpoints.items():
        model = mdl.load_model(ckpt)
        expected_head = "evidential" if head == "edl" else "sigmoid"
        if model.head != expected_head:
            raise DataError(
                f"extrapolate: checkpoint_{head} has head {model.head!r}, "
                f"expected {expected_head!r}"
            )
        probs = _prob_rows_from_model(model, rows)
        analysis = metrics.extrapolation_analysis(
            rows, means, probs, resolved["bin_width"]
        )
        name = f"extrapolation_{head}.csv"
        (out_dir / name).write_text(metrics.binned_csv(analysis), "utf-8")
        outputs.append(name)
    return outputs


def cmd_gen_synthetic(resolved: dict, out_dir: Path) -> list[str]:
    n_classes = resolved["n_classes"]
    n_dirs = n_classes + resolved["n_ood_directions"]
    master = Rng(resolved["seed"])
    directions = sample_unit_directions(
        resolved["dim"], n_dirs, resolved["min_angle"], master
    )
    id_dirs = directions[:n_classes]
    ood_dir = None
    if resolved["paste_ood"] and not resolved["ood_per_scene"]:
        idx = resolved["ood_index"]
        if not 0 <= idx < resolved["n_ood_directions"]:
            raise ConfigError(
                f"ood_index {idx} out of range "
                f"[0, {resolved['n_ood_directions']})"
            )
        ood_dir = directions[n_classes + idx]
    outputs = []
    lo, hi = resolved["ood_min_size"], resolved["ood_max_size"]
    if not 1 <= lo <= hi:
        raise ConfigError("gen-synthetic: need 1 <= ood_min_size <= ood_max_size")
    for i in range(resolved["n_scenes"]):
        scene_seed = resolved["scene_seed"] + i
        feats, ids = gen_synthetic_scene(
            resolved["height"],
            resolved["width"],
            resolved["dim"],
            n_classes,
            scene_seed,
            directions=id_dirs,
            noise_sigma=resolved["noise_sigma"],
            mean_scale=resolved["mean_scale"],
        )
        labels = np.zeros(feats.shape[:2], dtype=np.uint8)
        if resolved["paste_ood"]:
            obj_rng = Rng(scene_seed * 2 + 1)
            if resolved["ood_per_scene"]:
                # a fresh outlier direction per scene, kept away from every
                # reserved direction so held-out clusters stay disjoint
                scene_dir = sample_unit_directions(
                    resolved["dim"],
                    1,
                    resolved["min_angle"],
                    obj_rng,
                    avoid=directions,
                )[0]
            else:
                scene_dir = ood_dir
            oh = lo + int(obj_rng.integers(1, hi - lo + 1)[0])
            ow = lo + int(obj_rng.integers(1, hi - lo + 1)[0])
            obj = make_feature_object(
                oh,
                ow,
                scene_dir,
                obj_rng,
                noise_sigma=resolved["ood_sigma"],
                mean_scale=resolved["mean_scale"],
            )
            feats, labels = anomaly_mix(
                feats,
                obj,
                ellipse_mask(oh, ow),
                obj_rng,
                scale_range=(resolved["scale_lo"], resolved["scale_hi"]),
            )
        name = f"scene_{i:03d}.ulre"
        write_tensor_file(
            out_dir / name,
            {"features": feats, "labels": labels, "class_ids": ids},
        )
        outputs.append(name)
    return outputs


_COMMANDS = {
    "toy-gaussian": (cmd_toy_gaussian, []),
    "train": (cmd_train, ["features", "labels"]),
    "score": (cmd_score, ["checkpoint", "features"]),
    "eval": (cmd_eval, ["scores", "labels"]),
    "extrapolate": (
        cmd_extrapolate,
        ["train_features", "eval_features", "checkpoint_edl", "checkpoint_bce"],
    ),
    "gen-synthetic": (cmd_gen_synthetic, []),
}


def run_command(command: str, resolved: dict, out_dir) -> list[str]:
    """Run one subcommand with a fully resolved config; returns output names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler, _ = _COMMANDS[command]
    outputs = handler(resolved, out_dir)
    _write_manifest(out_dir, command, resolved, outputs)
    return outputs + ["manifest.json"]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ulre",
        description=(
            "Uncertainty-aware likelihood ratio estimation for pixel-wise "
            "out-of-distribution detection"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
    args = parser.parse_args(argv)

    try:
        raw = load_config(args.config) if args.config else {}
        resolved = resolve_config(args.command, raw, seed_override=args.seed)
        _require_files(resolved, _COMMANDS[args.command][1])
        run_command(args.command, resolved, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
