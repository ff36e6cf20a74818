"""Built-in sanity checks runnable on an installed copy, no files needed.

Each check exercises the public API end to end against values that can be
verified by hand, so a broken build fails loudly in seconds.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import run_analysis, summarize
from .manifest import ArrayDataset, ModalitySpec
from .masking import Fill, build_planners
from .models import BuiltinModel


def _two_field_dataset():
    modalities = [
        ModalitySpec(name="a", kind="tabular", shape=(2,)),
        ModalitySpec(name="b", kind="tabular", shape=(1,)),
    ]
    samples = [{"a": np.array([1.0, 2.0]), "b": np.array([3.0])}]
    return ArrayDataset(modalities, samples)


def _run(dataset, model):
    plans = build_planners(dataset.modalities)
    fills = [Fill(kind="zero")] * len(dataset.modalities)
    return run_analysis(dataset, model, plans, fills)


def check_hand_example():
    """Sum model over [1,2] and [3]: each modality moves the output by 3."""
    dataset = _two_field_dataset()
    model = BuiltinModel({"kind": "linear",
                          "weights": {"a": [1.0, 1.0], "b": [1.0]}})
    table = _run(dataset, model)
    contributions, degenerate = engine.modality_contribution(table)
    importance, _ = engine.patch_importance(table, 0)
    ok = (not degenerate
          and np.allclose(contributions, [0.5, 0.5], atol=1e-12)
          and np.allclose([t.sum() for t in table.per_modality], [3.0, 3.0],
                          atol=1e-12)
          and np.allclose(importance, [1 / 3, 2 / 3], atol=1e-12)
          and table.model_calls == 4)
    return ok, f"contributions={contributions.tolist()}"


def check_closed_form():
    """Per-field occlusion of a linear model must move the output by |w*x|."""
    rng = np.random.default_rng(7)
    modalities = [ModalitySpec(name="x", kind="tabular", shape=(5,)),
                  ModalitySpec(name="y", kind="tabular", shape=(3,))]
    weights = {"x": rng.normal(size=(2, 5)), "y": rng.normal(size=(2, 3))}
    samples = [{"x": rng.normal(size=5), "y": rng.normal(size=3)}
               for _ in range(4)]
    dataset = ArrayDataset(modalities, samples)
    model = BuiltinModel({"kind": "linear",
                          "weights": {k: w.tolist() for k, w in weights.items()}})
    table = _run(dataset, model)
    contributions, _ = engine.modality_contribution(table)
    expected = np.zeros(2)
    for name, i in (("x", 0), ("y", 1)):
        per_sample = [np.abs(weights[name] * s[name]).sum() for s in samples]
        expected[i] = np.mean(per_sample)
    expected = expected / expected.sum()
    drift = float(np.abs(contributions - expected).max())
    return drift < 1e-9, f"max drift {drift:.2e}"


def check_collapse():
    """A model wired to one modality puts all contribution there."""
    dataset = _two_field_dataset()
    model = BuiltinModel({"kind": "single", "modality": "b",
                          "inner": {"kind": "linear", "weights": {"b": [2.0]}}})
    table = _run(dataset, model)
    contributions, _ = engine.modality_contribution(table)
    hits = engine.detect_collapse(contributions)
    ok = contributions[0] == 0.0 and contributions[1] == 1.0 and hits == [0]
    return ok, f"contributions={contributions.tolist()}, hits={hits}"


def check_normalization():
    """Contributions, importances and weighted values each sum to one."""
    rng = np.random.default_rng(11)
    modalities = [ModalitySpec(name="u", kind="tabular", shape=(4,)),
                  ModalitySpec(name="v", kind="tabular", shape=(6,))]
    samples = [{"u": rng.normal(size=4), "v": rng.normal(size=6)}
               for _ in range(3)]
    model = BuiltinModel({"kind": "softmax_linear",
                          "weights": {"u": rng.normal(size=(3, 4)).tolist(),
                                      "v": rng.normal(size=(3, 6)).tolist()}})
    table = _run(ArrayDataset(modalities, samples), model)
    summary = summarize(table)
    total = float(np.sum(summary.contributions))
    sums = [float(np.sum(mp)) for mp in summary.patch_importance]
    weighted = sum(float(np.sum(w)) for w in summary.weighted_importance)
    ok = (abs(total - 1.0) <= 1e-9
          and all(abs(s - 1.0) <= 1e-9 for s in sums)
          and abs(weighted - 1.0) <= 1e-9)
    return ok, f"sum={total!r}, per-modality={sums!r}, weighted={weighted!r}"


def check_degenerate():
    """A constant model has zero distance mass: uniform split, flagged."""
    dataset = _two_field_dataset()
    model = BuiltinModel({"kind": "constant", "output": [0.25, 0.75]})
    table = _run(dataset, model)
    contributions, degenerate = engine.modality_contribution(table)
    ok = degenerate and np.array_equal(contributions, [0.5, 0.5])
    return ok, f"degenerate={degenerate}"


CHECKS = [
    ("hand example", check_hand_example),
    ("linear closed form", check_closed_form),
    ("unimodal collapse", check_collapse),
    ("normalization", check_normalization),
    ("degenerate fallback", check_degenerate),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
