"""Occlusion planning and mask application.

An occlusion plan splits one modality's flattened input into index sets
("patches"); a fill strategy says what replaces the occluded positions.
Everything here is pure: inputs are never modified in place, so plans and
fills are safe to share across concurrent workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class PlanError(ValueError):
    """Raised for geometry or fill configurations that cannot be occluded."""


@dataclass(frozen=True)
class OcclusionPlan:
    """Partition of one modality's flat indices into patches.

    ``patches`` are sorted int arrays; together they must be pairwise
    disjoint and cover every index of the flattened input exactly once.
    """

    modality: int
    patches: tuple

    @property
    def patch_count(self) -> int:
        return len(self.patches)


def validate_partition(plan: OcclusionPlan, size: int) -> None:
    """Check that ``plan`` is a true partition of ``range(size)``."""
    seen = np.concatenate([np.asarray(p, dtype=np.int64) for p in plan.patches]) \
        if plan.patches else np.empty(0, dtype=np.int64)
    if seen.size != size or not np.array_equal(np.sort(seen), np.arange(size)):
        raise PlanError(
            f"plan for modality {plan.modality} is not a partition of "
            f"{size} indices: covers {seen.size} entries")


def plan_tabular(length: int, modality: int = 0) -> OcclusionPlan:
    """One patch per field: a tabular input of ``length`` fields yields
    ``length`` single-index patches."""
    if length < 1:
        raise PlanError(f"tabular modality must have at least one field, got {length}")
    patches = tuple(np.array([j], dtype=np.int64) for j in range(length))
    return OcclusionPlan(modality=modality, patches=patches)


def plan_text(token_count: int, modality: int = 0) -> OcclusionPlan:
    """One patch per whitespace token."""
    if token_count < 1:
        raise PlanError("text input has no tokens")
    patches = tuple(np.array([j], dtype=np.int64) for j in range(token_count))
    return OcclusionPlan(modality=modality, patches=patches)


def _nearest_divisors(extent: int, wanted: int) -> list[int]:
    divisors = [k for k in range(1, extent + 1) if extent % k == 0]
    best = min(abs(k - wanted) for k in divisors)
    return [k for k in divisors if abs(k - wanted) == best]


@dataclass(frozen=True)
class PatchGrid:
    """Regular tiling of a 2-D or 3-D image by rectangular patches.

    ``image_shape`` and ``patch_shape`` cover the spatial axes only.  An
    optional channel axis (its position within the full stored shape) is
    never partitioned: every patch takes all channels of its tile.
    """

    image_shape: tuple
    patch_shape: tuple
    channel_axis: int | None = None
    channels: int = 1

    def __post_init__(self):
        image = tuple(int(s) for s in self.image_shape)
        patch = tuple(int(p) for p in self.patch_shape)
        object.__setattr__(self, "image_shape", image)
        object.__setattr__(self, "patch_shape", patch)
        if len(image) not in (2, 3):
            raise PlanError(f"image grids support 2 or 3 spatial axes, got {len(image)}")
        if len(patch) != len(image):
            raise PlanError(
                f"patch_shape has {len(patch)} axes but image_shape has {len(image)}")
        if any(s < 1 for s in image) or any(p < 1 for p in patch):
            raise PlanError(f"extents must be positive: image {image}, patch {patch}")
        for d, (s, p) in enumerate(zip(image, patch)):
            if s % p != 0:
                hint = " or ".join(str(k) for k in _nearest_divisors(s, p))
                raise PlanError(
                    f"patch extent {p} does not divide image extent {s} on axis "
                    f"{d}; nearest valid patch extent: {hint}")
        if self.channels < 1:
            raise PlanError(f"channel count must be positive, got {self.channels}")
        if self.channel_axis is not None:
            rank = len(image) + 1
            ax = self.channel_axis
            if not -rank <= ax < rank:
                raise PlanError(f"channel_axis {ax} out of range for rank {rank}")
            object.__setattr__(self, "channel_axis", ax % rank)

    @property
    def grid_counts(self) -> tuple:
        return tuple(s // p for s, p in zip(self.image_shape, self.patch_shape))

    @property
    def patch_count(self) -> int:
        h = 1
        for c in self.grid_counts:
            h *= c
        return h

    @property
    def full_shape(self) -> tuple:
        """Shape of the stored tensor, channel axis included."""
        if self.channel_axis is None:
            return self.image_shape
        shape = list(self.image_shape)
        shape.insert(self.channel_axis, self.channels)
        return tuple(shape)


def plan_image(grid: PatchGrid, modality: int = 0) -> OcclusionPlan:
    """Tile the image into ``grid.patch_count`` patches in row-major tile
    order; each patch holds the flat indices of one tile across all channels.
    """
    counts = grid.grid_counts
    # Tile id per spatial position, row-major over the tile grid.
    coords = np.indices(grid.image_shape)
    tile = np.zeros(grid.image_shape, dtype=np.int64)
    for d, c in enumerate(counts):
        tile = tile * c + coords[d] // grid.patch_shape[d]
    if grid.channel_axis is not None:
        tile = np.broadcast_to(np.expand_dims(tile, grid.channel_axis),
                               grid.full_shape)
    flat = tile.reshape(-1)
    # Stable sort groups equal tile ids while keeping flat indices ascending
    # inside each patch.
    order = np.argsort(flat, kind="stable")
    patches = tuple(np.ascontiguousarray(p)
                    for p in np.split(order, grid.patch_count))
    return OcclusionPlan(modality=modality, patches=patches)


@dataclass(frozen=True)
class Fill:
    """Replacement values for occluded positions.

    ``kind`` is ``"zero"``, ``"mean"`` or ``"token"``.  A mean fill carries
    the dataset-mean tensor once resolved; a token fill carries the mask
    symbol and applies to token inputs only.
    """

    kind: str
    token: str | None = None
    mean: np.ndarray | None = None

    def label(self) -> str:
        return f"token:{self.token}" if self.kind == "token" else self.kind


DEFAULT_MASK_TOKEN = "[MASK]"


def parse_fill(text: str) -> Fill:
    """Parse a fill flag: ``zero``, ``mean`` or ``token:<symbol>``."""
    if text == "zero":
        return Fill(kind="zero")
    if text == "mean":
        return Fill(kind="mean")
    if text.startswith("token:"):
        symbol = text[len("token:"):]
        if not symbol:
            raise PlanError("token fill needs a symbol, e.g. token:[MASK]")
        return Fill(kind="token", token=symbol)
    raise PlanError(f"unknown fill strategy {text!r} (expected zero, mean or token:<symbol>)")


def compute_fill(dataset, modality: str) -> np.ndarray:
    """Elementwise mean of ``modality`` across all samples of ``dataset``.

    Accumulates in double precision and returns the result at the input
    dtype, so repeated computation is bit-reproducible.
    """
    stack = []
    shape = None
    for sid, sample in dataset.iter_samples():
        value = sample[modality]
        if isinstance(value, list):
            raise PlanError(
                f"mean fill is unavailable for token modality {modality!r} "
                "(token counts vary per sample); use token:<symbol>")
        arr = np.asarray(value)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise PlanError(
                f"modality {modality!r} has shape {arr.shape} in sample {sid!r} "
                f"but {shape} earlier; mean fill needs a fixed shape")
        stack.append(arr)
    if not stack:
        raise PlanError("cannot compute a dataset mean from zero samples")
    if len(stack) == 1:
        warnings.warn(
            f"mean fill for modality {modality!r} over a single sample equals "
            "the sample itself; its masked distances will all be zero",
            stacklevel=2)
    mean = np.mean(np.stack(stack, axis=0), axis=0, dtype=np.float64)
    return mean.astype(stack[0].dtype)


def apply_mask(value, patch, fill: Fill):
    """Return a copy of ``value`` with ``patch`` positions replaced.

    ``value`` is either a numeric array (any shape; ``patch`` indexes its
    row-major flattening) or a list of tokens.  Positions outside ``patch``
    are preserved bit-for-bit.
    """
    patch = np.asarray(patch, dtype=np.int64)
    if isinstance(value, list):
        if fill.kind != "token":
            raise PlanError(
                f"{fill.kind} fill cannot be applied to a token sequence")
        if patch.size and (patch.min() < 0 or patch.max() >= len(value)):
            raise PlanError(
                f"patch index out of range for {len(value)} tokens")
        masked = list(value)
        for j in patch:
            masked[int(j)] = fill.token
        return masked
    arr = np.asarray(value)
    if fill.kind == "token":
        raise PlanError("token fill only applies to text modalities")
    out = arr.copy()
    flat = out.reshape(-1)
    if patch.size and (patch.min() < 0 or patch.max() >= flat.size):
        raise PlanError(f"patch index out of range for {flat.size} entries")
    if fill.kind == "zero":
        flat[patch] = 0.0
    else:
        if fill.mean is None:
            raise PlanError("mean fill was not resolved against a dataset")
        if fill.mean.shape != arr.shape:
            raise PlanError(
                f"mean tensor shape {fill.mean.shape} does not match input "
                f"shape {arr.shape}")
        flat[patch] = fill.mean.reshape(-1)[patch]
    return out


def _grid_for(spec) -> PatchGrid:
    if spec.channel_axis is None:
        spatial = tuple(spec.shape)
        return PatchGrid(spatial, tuple(spec.patch_shape))
    ax = spec.channel_axis % len(spec.shape)
    spatial = tuple(s for d, s in enumerate(spec.shape) if d != ax)
    return PatchGrid(spatial, tuple(spec.patch_shape),
                     channel_axis=ax, channels=spec.shape[ax])


def build_planners(modalities) -> list:
    """Per-modality plan sources for the analysis engine.

    Fixed-geometry modalities (tabular, image) get a ready
    :class:`OcclusionPlan`; text modalities get a callable that plans one
    patch per token of the sample at hand.
    """
    planners = []
    for i, spec in enumerate(modalities):
        if spec.kind == "tabular":
            planners.append(plan_tabular(spec.shape[0], modality=i))
        elif spec.kind == "image":
            planners.append(plan_image(_grid_for(spec), modality=i))
        elif spec.kind == "text":
            planners.append(lambda tokens, _i=i: plan_text(len(tokens), modality=_i))
        else:
            raise PlanError(f"unknown modality kind {spec.kind!r}")
    return planners


def _compatible(kind: str, fill: Fill) -> bool:
    if kind == "text":
        return fill.kind == "token"
    return fill.kind in ("zero", "mean")


def resolve_fills(dataset, modalities, override: Fill | None = None) -> list[Fill]:
    """Concrete fill per modality, dataset means resolved.

    ``override`` (the CLI flag) replaces each modality's declared fill where
    the strategy is valid for that modality's kind; token fill stays with
    text, zero/mean stay with numeric kinds.
    """
    fills = []
    for spec in modalities:
        declared = parse_fill(spec.fill)
        if not _compatible(spec.kind, declared):
            raise PlanError(
                f"modality {spec.name!r} ({spec.kind}) cannot use fill "
                f"{declared.label()!r}")
        chosen = declared
        if override is not None and _compatible(spec.kind, override):
            chosen = override
        if chosen.kind == "mean":
            chosen = Fill(kind="mean", mean=compute_fill(dataset, spec.name))
        fills.append(chosen)
    return fills
