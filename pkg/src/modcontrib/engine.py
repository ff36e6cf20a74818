"""Occlusion analysis engine and contribution metrics.

The engine treats the model as a black box: for every sample it records the
unmasked baseline output once, then re-runs the model with one patch of one
modality occluded at a time and accumulates the absolute output differences.
A modality's contribution is its share of the total accumulated difference;
a patch's importance is its share within its modality.  No labels or
performance figures enter anywhere.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .masking import OcclusionPlan, apply_mask

DEFAULT_COLLAPSE_THRESHOLD = 0.02


class AnalysisError(RuntimeError):
    """A model call or accumulation failed; the message carries the
    sample/modality/patch coordinates."""


class NondeterministicModelError(AnalysisError):
    """Re-issuing a baseline call did not reproduce the recorded output."""


class KahanSum:
    """Elementwise compensated summation.

    Keeps the accumulated rounding error in a carry term so that merge
    results are stable (well below 1e-9) under sample reordering.
    """

    __slots__ = ("total", "_carry")

    def __init__(self, shape):
        self.total = np.zeros(shape, dtype=np.float64)
        self._carry = np.zeros(shape, dtype=np.float64)

    def add(self, values) -> None:
        y = np.asarray(values, dtype=np.float64) - self._carry
        t = self.total + y
        self._carry = (t - self.total) - y
        self.total = t


def output_distance(baseline, masked, context="") -> np.ndarray:
    """Elementwise absolute difference between two output vectors."""
    p0 = np.asarray(baseline, dtype=np.float64)
    pm = np.asarray(masked, dtype=np.float64)
    if p0.shape != pm.shape:
        where = f" ({context})" if context else ""
        raise AnalysisError(
            f"output length changed between calls{where}: baseline has "
            f"{p0.shape}, masked call has {pm.shape}")
    return np.abs(p0 - pm)


def _softmax(values):
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


_TRANSFORMS = {
    "none": lambda v: v,
    "softmax": _softmax,
    "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)),
}


@dataclass
class DistanceTable:
    """Accumulated masked-output distances for one analysis run.

    ``per_patch[i]`` is the dataset-averaged (patches x classes) matrix for
    fixed-geometry modalities; for text, whose patch count varies per sample,
    it is None and ``per_sample_patch[i]`` holds one matrix per sample.
    """

    modality_names: list
    output_dim: int
    sample_ids: list
    per_modality: list            # per modality: (C,) dataset-averaged totals
    per_patch: list               # per modality: (h, C) or None
    per_sample_patch: list        # per modality: [per sample (h_k, C)] or None
    per_sample_sums: np.ndarray   # (n, N) scalar distance mass per sample
    tokens: dict = field(default_factory=dict)  # modality index -> token lists
    model_calls: int = 0

    @property
    def modality_count(self) -> int:
        return len(self.modality_names)

    @property
    def sample_count(self) -> int:
        return len(self.sample_ids)

    def check(self) -> None:
        """Verify that per-modality totals match their per-patch sums."""
        for i, name in enumerate(self.modality_names):
            if self.per_patch[i] is not None:
                resummed = self.per_patch[i].sum(axis=0)
            else:
                per_sample = self.per_sample_patch[i]
                resummed = sum((m.sum(axis=0) for m in per_sample),
                               np.zeros(self.output_dim)) / self.sample_count
            drift = np.abs(resummed - self.per_modality[i]).max()
            scale = max(float(np.abs(self.per_modality[i]).max()), 1.0)
            if drift > 1e-9 * scale:
                raise AnalysisError(
                    f"distance table inconsistent for modality {name!r}: "
                    f"per-patch sum drifts by {drift}")


def _invoke(model, inputs, transform, context):
    try:
        out = model.predict(inputs)
    except Exception as exc:
        raise AnalysisError(f"model call failed ({context}): {exc}") from exc
    arr = np.asarray(out, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise AnalysisError(
            f"model output must be a non-empty flat vector ({context}), got "
            f"shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise AnalysisError(f"model output is not finite ({context})")
    return transform(arr)


def run_analysis(dataset, model, plans, fills, *, post_transform="none",
                 jobs=1, recheck=False) -> DistanceTable:
    """Run the full occlusion sweep and return the distance table.

    ``plans`` holds one entry per modality: an :class:`OcclusionPlan` for
    fixed geometry, or a callable mapping the sample's value to a plan (used
    for text, where the patch count follows the token count).  ``fills``
    is the resolved fill strategy per modality.

    The baseline output is computed once per sample and reused across all
    modalities, so a run costs exactly ``N * (1 + sum_i h_i)`` model calls
    (with per-sample h for text).  Masked calls may be evaluated by ``jobs``
    concurrent workers, but results are merged in (modality, sample, patch)
    index order with compensated summation, so the outcome is deterministic
    and independent of worker scheduling.

    With ``recheck`` the baseline call of every sample is re-issued at the
    end and compared against the recorded output
    (:class:`NondeterministicModelError` on mismatch).
    """
    names = list(dataset.modality_names)
    n = len(names)
    if n == 0:
        raise AnalysisError("dataset declares no modalities")
    total = len(dataset)
    if total == 0:
        raise AnalysisError("dataset has no samples")
    if len(plans) != n:
        raise AnalysisError(f"{len(plans)} plans for {n} modalities")
    if len(fills) != n:
        raise AnalysisError(f"{len(fills)} fills for {n} modalities")
    if post_transform not in _TRANSFORMS:
        raise AnalysisError(
            f"unknown post transform {post_transform!r} "
            f"(expected one of {sorted(_TRANSFORMS)})")
    transform = _TRANSFORMS[post_transform]
    if jobs < 1:
        raise AnalysisError(f"jobs must be >= 1, got {jobs}")

    fixed = [isinstance(p, OcclusionPlan) for p in plans]
    executor = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    calls = 0
    sample_ids = []
    baselines = []
    mod_acc = None       # per modality KahanSum over samples of d_i^k / N
    patch_acc = [None] * n
    per_sample_patch = [([] if not fx else None) for fx in fixed]
    sums = []
    tokens = {i for i in range(n) if not fixed[i]}
    token_store = {i: [] for i in tokens}

    try:
        for sid, sample in dataset.iter_samples():
            sample_ids.append(str(sid))
            missing = set(names) - set(sample)
            if missing:
                raise AnalysisError(
                    f"sample {sid!r} is missing modalities {sorted(missing)}")
            baseline = _invoke(model, sample, transform,
                               f"baseline of sample {sid!r}")
            calls += 1
            if mod_acc is None:
                dim = baseline.size
                mod_acc = [KahanSum(dim) for _ in range(n)]
            elif baseline.size != dim:
                raise AnalysisError(
                    f"output length changed between calls (baseline of sample "
                    f"{sid!r}): {dim} then {baseline.size}")
            baselines.append((sid, dict(sample), baseline))
            sample_sums = np.zeros(n)

            for i, name in enumerate(names):
                plan_src = plans[i]
                if fixed[i]:
                    plan = plan_src
                else:
                    try:
                        plan = plan_src(sample[name])
                    except Exception as exc:
                        raise AnalysisError(
                            f"cannot plan occlusion for modality {name!r} of "
                            f"sample {sid!r}: {exc}") from exc
                patches = plan.patches
                if not patches:
                    raise AnalysisError(
                        f"empty occlusion plan for modality {name!r} of "
                        f"sample {sid!r}")

                def masked_call(patch_index, patch, _name=name, _i=i, _sid=sid):
                    masked = dict(sample)
                    masked[_name] = apply_mask(sample[_name], patch, fills[_i])
                    return _invoke(
                        model, masked, transform,
                        f"sample {_sid!r}, modality {_name!r}, patch {patch_index}")

                if executor is None:
                    outputs = [masked_call(l, p) for l, p in enumerate(patches)]
                else:
                    outputs = list(executor.map(
                        masked_call, range(len(patches)), patches))
                calls += len(patches)

                distances = np.empty((len(patches), dim))
                for l, out in enumerate(outputs):
                    distances[l] = output_distance(
                        baseline, out,
                        f"sample {sid!r}, modality {name!r}, patch {l}")
                row_acc = KahanSum(dim)
                for row in distances:
                    row_acc.add(row)
                d_sample = row_acc.total
                mod_acc[i].add(d_sample / total)
                if fixed[i]:
                    if patch_acc[i] is None:
                        patch_acc[i] = KahanSum((len(patches), dim))
                    elif patch_acc[i].total.shape[0] != len(patches):
                        raise AnalysisError(
                            f"fixed plan for modality {name!r} changed patch "
                            f"count at sample {sid!r}")
                    patch_acc[i].add(distances / total)
                else:
                    per_sample_patch[i].append(distances)
                    if isinstance(sample[name], list):
                        token_store[i].append(list(sample[name]))
                sample_sums[i] = d_sample.sum()
            sums.append(sample_sums)

        if recheck:
            tolerance = float(getattr(model, "recheck_tolerance", 0.0))
            for sid, sample, baseline in baselines:
                again = _invoke(model, sample, transform,
                                f"baseline recheck of sample {sid!r}")
                calls += 1
                drift = float(np.abs(again - baseline).max())
                if drift > tolerance:
                    raise NondeterministicModelError(
                        f"model is not deterministic: baseline of sample "
                        f"{sid!r} drifted by {drift} (allowed {tolerance})")
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)

    return DistanceTable(
        modality_names=names,
        output_dim=dim,
        sample_ids=sample_ids,
        per_modality=[acc.total for acc in mod_acc],
        per_patch=[acc.total if acc is not None else None for acc in patch_acc],
        per_sample_patch=per_sample_patch,
        per_sample_sums=np.array(sums).T if sums else np.zeros((n, 0)),
        tokens=token_store,
        model_calls=calls,
    )


def _normalize(sums: np.ndarray) -> tuple[np.ndarray, bool]:
    total = float(sums.sum())
    if total == 0.0:
        return np.full(sums.size, 1.0 / sums.size), True
    return sums / total, False


def modality_contribution(table: DistanceTable) -> tuple[np.ndarray, bool]:
    """Share of the total accumulated output distance per modality.

    Returns ``(contributions, degenerate)``.  Contributions are non-negative
    and sum to one; when the model never reacted to any occlusion (zero total
    distance) the split is uniform and the degenerate flag is set.
    """
    sums = np.array([float(d.sum()) for d in table.per_modality])
    return _normalize(sums)


def patch_importance(table: DistanceTable, index: int) -> tuple[np.ndarray, bool]:
    """Within-modality share of distance per patch, for fixed-geometry
    modalities.  Uniform (with flag) if the modality has zero total."""
    matrix = table.per_patch[index]
    if matrix is None:
        raise AnalysisError(
            f"modality {table.modality_names[index]!r} has per-sample patch "
            "counts; use per_sample_patch_importance")
    return _normalize(matrix.sum(axis=1))


def per_sample_patch_importance(table: DistanceTable, index: int) -> list:
    """Per-sample patch importance for variable-geometry (text) modalities."""
    matrices = table.per_sample_patch[index]
    if matrices is None:
        raise AnalysisError(
            f"modality {table.modality_names[index]!r} has a fixed plan; "
            "use patch_importance")
    return [_normalize(m.sum(axis=1)) for m in matrices]


def weighted_patch_importance(importance: np.ndarray,
                              contribution: float) -> np.ndarray:
    """Patch importance scaled by its modality's contribution, so that the
    weighted values of all modalities sum to one globally."""
    return np.asarray(importance, dtype=np.float64) * float(contribution)


def per_class_scores(table: DistanceTable, index: int, mode: str = "mean"):
    """Reduce per-patch distance vectors across classes.

    ``mean`` averages the class components per patch; ``max`` takes the
    strongest component and also returns the class index attaining it (ties
    resolve to the lowest index).  Returns ``(scores, classes_or_None)``.
    """
    matrix = table.per_patch[index]
    if matrix is None:
        raise AnalysisError(
            f"modality {table.modality_names[index]!r} retains per-sample "
            "matrices; reduce those individually")
    return reduce_class_scores(matrix, mode)


def reduce_class_scores(matrix: np.ndarray, mode: str = "mean"):
    matrix = np.asarray(matrix, dtype=np.float64)
    if mode == "mean":
        return matrix.mean(axis=1), None
    if mode == "max":
        return matrix.max(axis=1), matrix.argmax(axis=1)
    raise AnalysisError(f"unknown class reduction {mode!r} (mean or max)")


def detect_collapse(contributions,
                    threshold: float = DEFAULT_COLLAPSE_THRESHOLD) -> list[int]:
    """Indices of modalities the model (nearly) ignores: contribution at or
    below ``threshold``."""
    values = np.asarray(contributions, dtype=np.float64)
    return [int(i) for i in np.flatnonzero(values <= threshold)]


@dataclass
class ContributionReport:
    """Metric summary of one analysis run, ready for serialization."""

    contributions: np.ndarray
    degenerate: bool
    patch_importance: list          # per modality: (h,) or None for text
    importance_uniform: list        # per modality: uniform-fallback flag
    weighted_importance: list       # per modality: (h,) or None
    per_sample_importance: dict     # modality index -> [(h_k,) per sample]
    per_sample_uniform: dict        # modality index -> [flag per sample]
    per_class: list                 # per modality: (h, C) or None
    collapse_hits: list
    collapse_threshold: float


def summarize(table: DistanceTable,
              collapse_threshold: float = DEFAULT_COLLAPSE_THRESHOLD
              ) -> ContributionReport:
    """Compute every contribution metric from an accumulated table."""
    contributions, degenerate = modality_contribution(table)
    importance = []
    uniform = []
    weighted = []
    per_sample_importance = {}
    per_sample_uniform = {}
    for i in range(table.modality_count):
        if table.per_patch[i] is not None:
            mp, flat = patch_importance(table, i)
            importance.append(mp)
            uniform.append(flat)
            weighted.append(weighted_patch_importance(mp, contributions[i]))
        else:
            importance.append(None)
            uniform.append(False)
            weighted.append(None)
            pairs = per_sample_patch_importance(table, i)
            per_sample_importance[i] = [mp for mp, _ in pairs]
            per_sample_uniform[i] = [flag for _, flag in pairs]
    return ContributionReport(
        contributions=contributions,
        degenerate=degenerate,
        patch_importance=importance,
        importance_uniform=uniform,
        weighted_importance=weighted,
        per_sample_importance=per_sample_importance,
        per_sample_uniform=per_sample_uniform,
        per_class=[table.per_patch[i] for i in range(table.modality_count)],
        collapse_hits=detect_collapse(contributions, collapse_threshold),
        collapse_threshold=collapse_threshold,
    )
