"""Independent brute-force reference for the occlusion metric.

Deliberately naive and self-contained: triple loop in the published order
(modality, then sample, then patch), the baseline recomputed inside the
modality loop, plain float accumulation, its own masking and fill logic.
Shares nothing with the package under test except numpy.
"""

import numpy as np


def mean_fill(arrays):
    """Dataset mean at input precision, accumulated in double."""
    stack = np.stack([np.asarray(a) for a in arrays], axis=0)
    return np.mean(stack, axis=0, dtype=np.float64).astype(stack.dtype)


def brute_force(samples, model_fn, partitions, fill_kind="zero"):
    """Reference contributions for numeric modalities.

    samples: list of dicts name -> 1-D-reshapable array
    model_fn: callable(dict) -> output vector
    partitions: dict name -> list of flat index lists
    fill_kind: "zero" or "mean" (mean computed here, independently)

    Returns (contribution vector over modalities in dict order,
             {name: per-patch importance} with the same uniform fallback
             convention as the analyzer: a zero denominator splits evenly).
    """
    names = list(samples[0].keys())
    count = len(samples)
    fills = {}
    for name in names:
        if fill_kind == "mean":
            fills[name] = np.asarray(mean_fill([s[name] for s in samples]))
        else:
            fills[name] = np.zeros_like(np.asarray(samples[0][name]))

    totals = {}
    patch_totals = {}
    for name in names:
        d_i = None
        d_il = None
        for k in range(count):
            sample = samples[k]
            p0 = np.asarray(model_fn(sample), dtype=np.float64)
            if d_i is None:
                d_i = np.zeros_like(p0)
                d_il = [np.zeros_like(p0) for _ in partitions[name]]
            d_ik = np.zeros_like(p0)
            for l, patch in enumerate(partitions[name]):
                original = np.asarray(sample[name])
                masked = original.copy().reshape(-1)
                for j in patch:
                    masked[j] = fills[name].reshape(-1)[j]
                masked = masked.reshape(original.shape)
                bundle = dict(sample)
                bundle[name] = masked
                p = np.asarray(model_fn(bundle), dtype=np.float64)
                diff = np.abs(p0 - p)
                d_ik = d_ik + diff
                d_il[l] = d_il[l] + diff / count
            d_i = d_i + d_ik / count
        totals[name] = d_i
        patch_totals[name] = d_il

    grand = sum(float(v.sum()) for v in totals.values())
    if grand == 0.0:
        contributions = np.full(len(names), 1.0 / len(names))
    else:
        contributions = np.array([float(totals[n].sum()) / grand for n in names])

    importance = {}
    for name in names:
        per_patch = np.array([float(v.sum()) for v in patch_totals[name]])
        denom = per_patch.sum()
        if denom == 0.0:
            importance[name] = np.full(per_patch.size, 1.0 / per_patch.size)
        else:
            importance[name] = per_patch / denom
    return contributions, importance
