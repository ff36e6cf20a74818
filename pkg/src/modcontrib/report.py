"""Report serialization and artifact rendering.

A report is one JSON document holding every metric of a run plus the raw
per-patch distance mass, so artifacts (PGM heatmaps, CSV score tables) can be
re-rendered later without touching the model or the dataset.  All output is
deterministic byte for byte: floats are written with nine significant digits,
no timestamps enter the document, and image/CSV writers have a single fixed
encoding.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .engine import reduce_class_scores
from .masking import PatchGrid

REPORT_FORMAT = "modality-contribution-report"
REPORT_VERSION = 1


class ReportError(ValueError):
    """Raised when a report cannot be rendered or is internally inconsistent."""


def round_sig(value: float, digits: int = 9) -> float:
    """Round to ``digits`` significant decimal digits."""
    return float(f"{value:.{digits}g}")


def _rounded(obj):
    if isinstance(obj, float):
        return round_sig(obj)
    if isinstance(obj, dict):
        return {key: _rounded(val) for key, val in obj.items()}
    if isinstance(obj, list):
        return [_rounded(val) for val in obj]
    return obj


def ratio_string(contributions) -> str:
    """Two-decimal contribution split, e.g. ``"0.50 : 0.50"``."""
    return " : ".join(f"{float(v):.2f}" for v in contributions)


def _float_list(values):
    return [float(v) for v in np.asarray(values, dtype=np.float64)]


def _matrix(values):
    return [_float_list(row) for row in np.asarray(values, dtype=np.float64)]


def render_document(table, summary, modalities, *, dataset_name,
                    model_identity, model_name=None, post_transform="none",
                    fills=None, per_class=False) -> dict:
    """Assemble the JSON-ready report document for one run."""
    n = table.modality_count
    if len(modalities) != n:
        raise ReportError(f"{len(modalities)} modality specs for {n} results")
    contributions = _float_list(summary.contributions)

    entries = []
    weighted_total = 0.0
    importance_sums = []
    for i, spec in enumerate(modalities):
        entry = {
            "name": spec.name,
            "kind": spec.kind,
            "fill": fills[i].label() if fills else spec.fill,
            "patch_count": spec.patch_count,
            "contribution": contributions[i],
        }
        if spec.kind != "text":
            entry["shape"] = list(spec.shape)
        if spec.kind == "image":
            entry["patch_shape"] = list(spec.patch_shape)
            entry["channel_axis"] = spec.channel_axis
        if spec.kind == "tabular":
            entry["feature_names"] = list(spec.feature_names)

        if summary.patch_importance[i] is not None:
            entry["patch_importance"] = _float_list(summary.patch_importance[i])
            entry["importance_uniform"] = bool(summary.importance_uniform[i])
            entry["weighted_importance"] = _float_list(
                summary.weighted_importance[i])
            entry["patch_sums"] = _float_list(table.per_patch[i].sum(axis=1))
            if per_class:
                entry["per_class"] = _matrix(table.per_patch[i])
            weighted_total += float(np.sum(summary.weighted_importance[i]))
            importance_sums.append(float(np.sum(summary.patch_importance[i])))
        else:
            # Patch counts vary per sample, so importance is per sample.
            blocks = []
            token_lists = table.tokens.get(i, [])
            for k, sid in enumerate(table.sample_ids):
                matrix = table.per_sample_patch[i][k]
                importance = summary.per_sample_importance[i][k]
                block = {
                    "id": sid,
                    "patch_count": int(matrix.shape[0]),
                    "patch_importance": _float_list(importance),
                    "importance_uniform": bool(summary.per_sample_uniform[i][k]),
                    "weighted_importance": _float_list(
                        importance * contributions[i]),
                    "patch_sums": _float_list(matrix.sum(axis=1)),
                }
                if k < len(token_lists):
                    block["tokens"] = list(token_lists[k])
                if per_class:
                    block["per_class"] = _matrix(matrix)
                blocks.append(block)
            entry["per_sample"] = blocks
            # Each sample's importance sums to one, so the modality's share
            # of the global weighted mass is its contribution, counted once.
            weighted_total += contributions[i]
            importance_sums.append(None)
        entries.append(entry)

    per_sample_contribution = []
    for k, sid in enumerate(table.sample_ids):
        sums = table.per_sample_sums[:, k]
        total = float(sums.sum())
        if total == 0.0:
            values = [1.0 / n] * n
            degenerate = True
        else:
            values = _float_list(sums / total)
            degenerate = False
        per_sample_contribution.append(
            {"id": sid, "contributions": values, "degenerate": degenerate})

    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "dataset": {
            "name": dataset_name,
            "sample_count": table.sample_count,
            "sample_ids": list(table.sample_ids),
        },
        "model": {
            "identity": model_identity,
            "name": model_name,
            "output_dim": table.output_dim,
            "post_transform": post_transform,
        },
        "settings": {
            "collapse_threshold": float(summary.collapse_threshold),
            "per_class": bool(per_class),
        },
        "contributions": contributions,
        "ratio": ratio_string(contributions),
        "degenerate": bool(summary.degenerate),
        "collapse_hits": [int(i) for i in summary.collapse_hits],
        "collapsed_modalities": [modalities[i].name for i in summary.collapse_hits],
        "modalities": entries,
        "per_sample_contribution": per_sample_contribution,
        "checks": {
            "sum_contributions": float(np.sum(summary.contributions)),
            "sum_patch_importance": importance_sums,
            "sum_weighted_importance": weighted_total,
        },
    }
    return doc


def write_report(doc: dict, path) -> None:
    """Serialize a report document; floats carry nine significant digits."""
    text = json.dumps(_rounded(doc), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot load report {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != REPORT_FORMAT:
        raise ReportError(f"{path} is not a {REPORT_FORMAT} document")
    if doc.get("version") != REPORT_VERSION:
        raise ReportError(
            f"{path} has report version {doc.get('version')!r}; this build "
            f"reads version {REPORT_VERSION}")
    return doc


def write_pgm(path, image: np.ndarray) -> None:
    """Write one 2-D uint8 array as a binary (P5) PGM file."""
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ReportError(f"PGM writer needs a 2-D uint8 array, got "
                          f"{arr.dtype} with shape {arr.shape}")
    height, width = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _to_levels(scores: np.ndarray) -> np.ndarray:
    lo = float(scores.min())
    hi = float(scores.max())
    if hi > lo:
        return np.rint((scores - lo) / (hi - lo) * 255.0).astype(np.uint8)
    # A flat map carries no ordering information; mid-gray marks that.
    return np.full(scores.shape, 128, dtype=np.uint8)


def render_patch_heatmap(scores, grid: PatchGrid, out_stem) -> list[Path]:
    """Render per-patch scores as grayscale PGM at full image resolution.

    Scores are normalized to 0..255 (a constant map renders mid-gray 128)
    and each patch paints its whole tile (nearest-neighbor upscale).  A 2-D
    grid yields ``<stem>.pgm``; a 3-D grid yields one PGM per slice along
    the first spatial axis, ``<stem>_s000.pgm`` onward.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size != grid.patch_count:
        raise ReportError(
            f"{scores.size} scores for a grid of {grid.patch_count} patches")
    tiles = _to_levels(scores).reshape(grid.grid_counts)
    for axis, reps in enumerate(grid.patch_shape):
        tiles = np.repeat(tiles, reps, axis=axis)
    out_stem = Path(out_stem)
    if tiles.ndim == 2:
        path = out_stem.with_name(out_stem.name + ".pgm")
        write_pgm(path, tiles)
        return [path]
    written = []
    for index in range(tiles.shape[0]):
        path = out_stem.with_name(f"{out_stem.name}_s{index:03d}.pgm")
        write_pgm(path, tiles[index])
        written.append(path)
    return written


def write_token_scores(tokens, mean_scores, max_scores, argmax_classes,
                       path) -> None:
    """CSV of per-token (or per-field) scores: token,mean,max,argmax_class."""
    rows = [tokens, mean_scores, max_scores, argmax_classes]
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise ReportError(f"score table columns disagree on length: {lengths}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token", "mean", "max", "argmax_class"])
        for token, mean, peak, cls in zip(*rows):
            writer.writerow([token, f"{float(mean):.9g}", f"{float(peak):.9g}",
                             int(cls)])


def _grid_from_entry(entry) -> PatchGrid:
    shape = tuple(entry["shape"])
    patch_shape = tuple(entry["patch_shape"])
    channel_axis = entry.get("channel_axis")
    if channel_axis is None:
        return PatchGrid(shape, patch_shape)
    spatial = tuple(s for d, s in enumerate(shape) if d != channel_axis)
    return PatchGrid(spatial, patch_shape, channel_axis=channel_axis,
                     channels=shape[channel_axis])


def _safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def _table_from_block(names, per_class, path, written):
    matrix = np.asarray(per_class, dtype=np.float64)
    means, _ = reduce_class_scores(matrix, "mean")
    peaks, classes = reduce_class_scores(matrix, "max")
    write_token_scores(names, means, peaks, classes, path)
    written.append(path)


def render_artifacts(doc: dict, out_dir, mode: str = "auto") -> list[Path]:
    """Render every artifact a report can support into ``out_dir``.

    Image modalities yield mean-score heatmaps, plus strongest-class
    heatmaps when the report retained per-class matrices; tabular and text
    modalities yield CSV score tables (these need per-class data for the max
    column).  ``mode`` ``"max"`` demands per-class data and fails with
    guidance when the report was written without ``--per-class``.
    """
    if mode not in ("auto", "mean", "max"):
        raise ReportError(f"unknown render mode {mode!r} (auto, mean or max)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    max_possible = False
    for entry in doc.get("modalities", []):
        name = _safe_name(entry["name"])
        kind = entry["kind"]
        has_classes = "per_class" in entry or (
            kind == "text" and entry.get("per_sample")
            and all("per_class" in b for b in entry["per_sample"]))
        max_possible = max_possible or has_classes
        if kind == "image":
            grid = _grid_from_entry(entry)
            if mode in ("auto", "mean"):
                written += render_patch_heatmap(
                    entry["patch_sums"], grid, out_dir / f"heatmap_{name}_mean")
            if "per_class" in entry and mode in ("auto", "max"):
                peaks, _ = reduce_class_scores(entry["per_class"], "max")
                written += render_patch_heatmap(
                    peaks, grid, out_dir / f"heatmap_{name}_max")
        elif kind == "tabular":
            if "per_class" in entry:
                _table_from_block(entry["feature_names"], entry["per_class"],
                                  out_dir / f"scores_{name}.csv", written)
        else:
            for block in entry.get("per_sample", []):
                if "per_class" not in block:
                    continue
                labels = block.get("tokens") or [
                    f"t{j}" for j in range(block["patch_count"])]
                _table_from_block(
                    labels, block["per_class"],
                    out_dir / f"tokens_{name}_{_safe_name(block['id'])}.csv",
                    written)
    if mode == "max" and not max_possible:
        raise ReportError(
            "this report was written without per-class scores, so max-mode "
            "artifacts cannot be rendered; re-run analyze with --per-class")
    return written
