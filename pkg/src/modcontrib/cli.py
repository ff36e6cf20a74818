"""Command line interface: analyze, render, selftest."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from .engine import run_analysis, summarize, DEFAULT_COLLAPSE_THRESHOLD
from .manifest import load_manifest
from .masking import build_planners, parse_fill, resolve_fills
from .models import open_model
from .report import (load_report, render_artifacts, render_document,
                     write_report)


@click.group()
@click.version_option(version=__version__, prog_name="modcontrib")
def main():
    """Measure how much each input modality contributes to a black-box
    multimodal predictor, by occluding one patch at a time and accumulating
    the output differences.  Labels are never consulted: the analysis is
    independent of model performance."""


@main.command()
@click.argument("manifest_path", metavar="MANIFEST",
                type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_flag", required=True,
              help="builtin:<json|@file>, exec:<command>, or an http(s) URL "
                   "of a predictor speaking wire protocol v1.")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False),
              help="Output directory for report.json, run_log.json and artifacts.")
@click.option("--fill", "fill_flag", default=None,
              help="Override fill for numeric modalities: zero, mean or "
                   "token:<symbol> (token applies to text only).")
@click.option("--per-class", is_flag=True,
              help="Keep per-class patch scores in the report (needed for "
                   "max-mode heatmaps and score tables).")
@click.option("--post-transform", type=click.Choice(["none", "softmax", "sigmoid"]),
              default="none", show_default=True,
              help="Transform applied to every model output before distances "
                   "are taken; recorded in the report.")
@click.option("--collapse-threshold", type=float,
              default=DEFAULT_COLLAPSE_THRESHOLD, show_default=True,
              help="Contribution at or below this flags a modality as ignored.")
@click.option("--strict", is_flag=True,
              help="Exit with status 2 when the run is degenerate (the model "
                   "never reacted to any occlusion).")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Concurrent model calls; results merge deterministically.")
@click.option("--timeout", type=float, default=60.0, show_default=True,
              envvar="MODCONTRIB_MODEL_TIMEOUT",
              help="Per-call timeout in seconds for external models "
                   "(env MODCONTRIB_MODEL_TIMEOUT).")
@click.option("--recheck", is_flag=True,
              help="Re-issue every baseline call at run end and fail if the "
                   "model is not deterministic.")
@click.option("--artifacts/--no-artifacts", default=True, show_default=True,
              help="Render heatmaps and score tables next to the report.")
def analyze(manifest_path, model_flag, out_dir, fill_flag, per_class,
            post_transform, collapse_threshold, strict, jobs, timeout,
            recheck, artifacts):
    """Run the occlusion sweep for MANIFEST and write the report."""
    started = time.monotonic()
    try:
        manifest = load_manifest(manifest_path)
        override = parse_fill(fill_flag) if fill_flag else None
        fills = resolve_fills(manifest, manifest.modalities, override)
        plans = build_planners(manifest.modalities)
        with open_model(model_flag, timeout=timeout) as model:
            table = run_analysis(manifest, model, plans, fills,
                                 post_transform=post_transform, jobs=jobs,
                                 recheck=recheck)
            model_name = model.name
            model_identity = model.identity
        summary = summarize(table, collapse_threshold)
        doc = render_document(
            table, summary, manifest.modalities,
            dataset_name=manifest.name, model_identity=model_identity,
            model_name=model_name, post_transform=post_transform,
            fills=fills, per_class=per_class)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "report.json"
        write_report(doc, report_path)
        files = [report_path]
        if artifacts:
            files += render_artifacts(doc, out, mode="auto")
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc

    wall = time.monotonic() - started
    run_log = {
        "model_calls": table.model_calls,
        "wall_time_seconds": wall,
        "report_file": report_path.name,
        "artifacts": sorted(p.name for p in files if p != report_path),
        "settings": {
            "manifest": str(manifest_path),
            "model": model_flag,
            "fill_override": fill_flag,
            "fills": [f.label() for f in fills],
            "per_class": per_class,
            "post_transform": post_transform,
            "collapse_threshold": collapse_threshold,
            "strict": strict,
            "jobs": jobs,
            "timeout": timeout,
            "recheck": recheck,
        },
    }
    (out / "run_log.json").write_text(
        json.dumps(run_log, indent=2) + "\n", encoding="utf-8")

    names = " : ".join(manifest.modality_names)
    click.echo(f"modality contribution ({names}) = {doc['ratio']}")
    for index in doc["collapse_hits"]:
        name = manifest.modalities[index].name
        value = doc["contributions"][index]
        click.echo(
            f"warning: modality {name!r} contributes {value:.2f} "
            f"<= threshold {collapse_threshold:g} (possible unimodal collapse)",
            err=True)
    if doc["degenerate"]:
        click.echo("warning: degenerate run, the model never reacted to any "
                   "occlusion; contributions are uniform by convention",
                   err=True)
        if strict:
            sys.exit(2)
    click.echo(f"report written to {report_path}")


@main.command()
@click.argument("report_path", metavar="REPORT",
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False),
              help="Directory to render artifacts into.")
@click.option("--mode", type=click.Choice(["auto", "mean", "max"]),
              default="auto", show_default=True,
              help="Which score reduction to render; max needs a report "
                   "written with --per-class.")
def render(report_path, out_dir, mode):
    """Re-render heatmaps and score tables from a stored REPORT.

    Rendering is idempotent: the same report yields byte-identical files."""
    try:
        doc = load_report(report_path)
        files = render_artifacts(doc, out_dir, mode=mode)
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"rendered {len(files)} artifact file(s) into {out_dir}")


@main.command()
def selftest():
    """Run the built-in sanity checks (a few seconds, no files needed)."""
    from .selftest import run_selftest
    failed = 0
    for name, ok, detail in run_selftest():
        mark = "ok  " if ok else "FAIL"
        click.echo(f"{mark} {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        raise click.ClickException(f"{failed} selftest check(s) failed")
    click.echo("all selftest checks passed")


if __name__ == "__main__":
    main()
