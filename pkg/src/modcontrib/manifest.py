"""Dataset manifests: declaration and loading of multimodal samples.

A manifest is one JSON document naming the modalities (kind, shape, fill,
patch geometry, field encodings) and the samples (per-modality data, inline
or by file reference).  Loading is read-only and pure: the same manifest and
sample index always produce the same tensors and tokens.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import PlanError, _grid_for
from .tensors import read_tensor

KINDS = ("tabular", "text", "image")


class ManifestError(ValueError):
    """Schema violation; the message carries the offending field path."""


class SampleError(ValueError):
    """A sample failed to load or parse; the message names the sample."""


class EncodingError(SampleError):
    """A tabular field value could not be encoded."""


@dataclass(frozen=True)
class FieldRule:
    """Encoding rule for one tabular field.

    Without a mapping the raw value is parsed as a number.  With a mapping,
    the raw string must be one of the enumerated categories.  ``missing``
    is the sentinel substituted for an empty field.
    """

    name: str
    mapping: dict | None = None
    missing: float | None = None


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    shape: tuple | None = None
    patch_shape: tuple | None = None
    channel_axis: int | None = None
    fill: str | None = None           # None picks the kind's default
    encoding: tuple | None = None

    def __post_init__(self):
        if self.fill is None:
            default = "token:[MASK]" if self.kind == "text" else "zero"
            object.__setattr__(self, "fill", default)

    @property
    def feature_names(self) -> list[str] | None:
        if self.kind != "tabular":
            return None
        if self.encoding:
            return [rule.name for rule in self.encoding]
        return [f"f{j}" for j in range(self.shape[0])]

    @property
    def patch_count(self) -> int | None:
        """Patches per sample; None for text, where it varies by sample."""
        if self.kind == "tabular":
            return self.shape[0]
        if self.kind == "image":
            return _grid_for(self).patch_count
        return None


@dataclass(frozen=True)
class SampleRecord:
    id: str
    inputs: dict


def encode_tabular(row, rules) -> np.ndarray:
    """Encode one row of raw strings into a float32 vector via ``rules``."""
    if len(row) != len(rules):
        raise EncodingError(
            f"row has {len(row)} fields but the encoding declares {len(rules)}")
    out = np.empty(len(rules), dtype=np.float32)
    for j, (raw, rule) in enumerate(zip(row, rules)):
        raw = raw.strip() if isinstance(raw, str) else raw
        if raw == "" or raw is None:
            if rule.missing is None:
                raise EncodingError(
                    f"field {rule.name!r} is empty and declares no missing sentinel")
            out[j] = rule.missing
            continue
        if rule.mapping is not None:
            if raw not in rule.mapping:
                allowed = ", ".join(sorted(rule.mapping))
                raise EncodingError(
                    f"field {rule.name!r} has unmapped category {raw!r} "
                    f"(allowed: {allowed})")
            out[j] = rule.mapping[raw]
            continue
        try:
            out[j] = float(raw)
        except (TypeError, ValueError) as exc:
            raise EncodingError(
                f"field {rule.name!r} value {raw!r} is not numeric and no "
                "mapping is declared") from exc
    return out


def _expect(mapping, key, path, types, required=True, default=None):
    if key not in mapping:
        if required:
            raise ManifestError(f"{path}.{key}: required field is missing")
        return default
    value = mapping[key]
    if types is not None and not isinstance(value, types):
        raise ManifestError(
            f"{path}.{key}: expected {getattr(types, '__name__', types)}, "
            f"got {type(value).__name__}")
    return value


def _int_tuple(value, path):
    if (not isinstance(value, list) or not value
            or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0
                       for v in value)):
        raise ManifestError(f"{path}: expected a non-empty list of positive integers")
    return tuple(value)


_SOURCE_KEYS = {
    "tabular": ({"values"}, {"path"}, {"csv", "row"}),
    "image": ({"values"}, {"path"}),
    "text": ({"text"}, {"path"}),
}


def _parse_encoding(raw, path):
    rules = []
    for j, item in enumerate(raw):
        ipath = f"{path}[{j}]"
        if not isinstance(item, dict):
            raise ManifestError(f"{ipath}: expected an object")
        name = _expect(item, "name", ipath, str)
        mapping = _expect(item, "map", ipath, dict, required=False)
        if mapping is not None:
            for key, val in mapping.items():
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ManifestError(
                        f"{ipath}.map[{key!r}]: mapped value must be numeric")
            mapping = {k: float(v) for k, v in mapping.items()}
        missing = _expect(item, "missing", ipath, (int, float), required=False)
        extra = set(item) - {"name", "map", "missing"}
        if extra:
            raise ManifestError(f"{ipath}: unknown keys {sorted(extra)}")
        rules.append(FieldRule(name=name, mapping=mapping,
                               missing=None if missing is None else float(missing)))
    return tuple(rules)


def _parse_modality(raw, path):
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: expected an object")
    name = _expect(raw, "name", path, str)
    kind = _expect(raw, "kind", path, str)
    if kind not in KINDS:
        raise ManifestError(f"{path}.kind: {kind!r} is not one of {KINDS}")
    allowed = {"name", "kind", "shape", "patch_shape", "channel_axis",
               "fill", "encoding"}
    extra = set(raw) - allowed
    if extra:
        raise ManifestError(f"{path}: unknown keys {sorted(extra)}")

    shape = patch_shape = channel_axis = encoding = None
    if kind == "tabular":
        shape = _int_tuple(_expect(raw, "shape", path, list), f"{path}.shape")
        if len(shape) != 1:
            raise ManifestError(f"{path}.shape: tabular shape must be 1-D")
        for key in ("patch_shape", "channel_axis"):
            if key in raw:
                raise ManifestError(f"{path}.{key}: not valid for tabular modalities")
        if "encoding" in raw:
            enc = _expect(raw, "encoding", path, list)
            encoding = _parse_encoding(enc, f"{path}.encoding")
            if len(encoding) != shape[0]:
                raise ManifestError(
                    f"{path}.encoding: {len(encoding)} rules for shape {shape[0]}")
    elif kind == "image":
        shape = _int_tuple(_expect(raw, "shape", path, list), f"{path}.shape")
        patch_shape = _int_tuple(_expect(raw, "patch_shape", path, list),
                                 f"{path}.patch_shape")
        channel_axis = _expect(raw, "channel_axis", path, int, required=False)
        if isinstance(channel_axis, bool):
            raise ManifestError(f"{path}.channel_axis: expected int")
        if channel_axis is not None and not -len(shape) <= channel_axis < len(shape):
            raise ManifestError(
                f"{path}.channel_axis: {channel_axis} out of range for shape {shape}")
        if channel_axis is not None:
            channel_axis %= len(shape)
        if "encoding" in raw:
            raise ManifestError(f"{path}.encoding: not valid for image modalities")
    else:  # text
        for key in ("shape", "patch_shape", "channel_axis", "encoding"):
            if key in raw:
                raise ManifestError(f"{path}.{key}: not valid for text modalities")

    default_fill = "token:[MASK]" if kind == "text" else "zero"
    fill = _expect(raw, "fill", path, str, required=False, default=default_fill)

    spec = ModalitySpec(name=name, kind=kind, shape=shape,
                        patch_shape=patch_shape, channel_axis=channel_axis,
                        fill=fill, encoding=encoding)
    # Geometry and fill must be coherent before any sample is touched.
    try:
        if kind == "image":
            _grid_for(spec)
        from .masking import parse_fill, _compatible
        parsed = parse_fill(fill)
        if not _compatible(kind, parsed):
            raise PlanError(f"{parsed.label()} fill is not valid for {kind}")
    except PlanError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return spec


def _check_source(source, spec, root, path):
    if not isinstance(source, dict):
        raise ManifestError(f"{path}: expected an object")
    forms = _SOURCE_KEYS[spec.kind]
    keys = set(source)
    if keys not in [set(f) for f in forms]:
        options = " | ".join("{" + ", ".join(sorted(f)) + "}" for f in forms)
        raise ManifestError(f"{path}: keys {sorted(keys)} do not match {options}")
    if "values" in source:
        values = source["values"]
        if not isinstance(values, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool)
                for v in values):
            raise ManifestError(f"{path}.values: expected a list of numbers")
        want = 1
        for s in spec.shape:
            want *= s
        if len(values) != want:
            raise ManifestError(
                f"{path}.values: {len(values)} values for shape "
                f"{list(spec.shape)} ({want} expected)")
    if "text" in source:
        if not isinstance(source["text"], str) or not source["text"].strip():
            raise ManifestError(f"{path}.text: expected a non-empty string")
    for key in ("path", "csv"):
        if key in source:
            if not isinstance(source[key], str):
                raise ManifestError(f"{path}.{key}: expected a file path string")
            target = root / source[key]
            if not target.is_file():
                raise ManifestError(f"{path}.{key}: file not found: {target}")
    if "row" in source:
        row = source["row"]
        if not isinstance(row, int) or isinstance(row, bool) or row < 0:
            raise ManifestError(f"{path}.row: expected a non-negative integer")


@dataclass
class Manifest:
    """Parsed manifest; doubles as the dataset object for the engine.

    The optional ``labels`` entry is recorded verbatim and never opened:
    analysis is independent of model performance by construction.
    """

    name: str
    root: Path
    modalities: list
    samples: list
    labels: str | None = None
    _csv_cache: dict = field(default_factory=dict, repr=False)

    @property
    def modality_names(self) -> list[str]:
        return [spec.name for spec in self.modalities]

    @property
    def sample_ids(self) -> list[str]:
        return [rec.id for rec in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def load(self, index: int) -> dict:
        return load_sample(self, index)

    def iter_samples(self):
        for k, rec in enumerate(self.samples):
            yield rec.id, self.load(k)


def load_manifest(path) -> Manifest:
    """Parse and eagerly validate a manifest file.

    Structural invariants (unique names, coherent shapes and fills, referenced
    files present, inline values sized) are checked up front; file payloads
    are parsed lazily by :func:`load_sample`.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError("manifest: top level must be a JSON object")
    allowed = {"name", "labels", "modalities", "samples"}
    extra = set(raw) - allowed
    if extra:
        raise ManifestError(f"manifest: unknown keys {sorted(extra)}")
    name = _expect(raw, "name", "manifest", str, required=False,
                   default=path.stem)
    labels = _expect(raw, "labels", "manifest", str, required=False)

    raw_mods = _expect(raw, "modalities", "manifest", list)
    if not raw_mods:
        raise ManifestError("manifest.modalities: at least one modality is required")
    modalities = [_parse_modality(m, f"manifest.modalities[{i}]")
                  for i, m in enumerate(raw_mods)]
    names = [m.name for m in modalities]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ManifestError(f"manifest.modalities: duplicate names {dupes}")

    root = path.parent
    raw_samples = _expect(raw, "samples", "manifest", list)
    if not raw_samples:
        raise ManifestError("manifest.samples: at least one sample is required")
    samples = []
    seen_ids = set()
    by_name = {m.name: m for m in modalities}
    for k, item in enumerate(raw_samples):
        spath = f"manifest.samples[{k}]"
        if not isinstance(item, dict):
            raise ManifestError(f"{spath}: expected an object")
        extra = set(item) - {"id", "inputs"}
        if extra:
            raise ManifestError(f"{spath}: unknown keys {sorted(extra)}")
        sid = _expect(item, "id", spath, str)
        if sid in seen_ids:
            raise ManifestError(f"{spath}.id: duplicate sample id {sid!r}")
        seen_ids.add(sid)
        inputs = _expect(item, "inputs", spath, dict)
        missing = set(by_name) - set(inputs)
        if missing:
            raise ManifestError(
                f"{spath}.inputs: sample {sid!r} is missing modalities "
                f"{sorted(missing)}")
        unknown = set(inputs) - set(by_name)
        if unknown:
            raise ManifestError(
                f"{spath}.inputs: sample {sid!r} names undeclared modalities "
                f"{sorted(unknown)}")
        for mname, source in inputs.items():
            _check_source(source, by_name[mname], root,
                          f"{spath}.inputs.{mname}")
        samples.append(SampleRecord(id=sid, inputs=inputs))

    return Manifest(name=name, root=root, modalities=modalities,
                    samples=samples, labels=labels)


def _read_csv(manifest: Manifest, relpath: str):
    if relpath not in manifest._csv_cache:
        target = manifest.root / relpath
        with open(target, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise SampleError(f"{target}: CSV file is empty")
        manifest._csv_cache[relpath] = (rows[0], rows[1:])
    return manifest._csv_cache[relpath]


def _load_tabular(manifest, spec, source, sid):
    rules = spec.encoding or tuple(FieldRule(name=f"f{j}")
                                   for j in range(spec.shape[0]))
    if "values" in source:
        return np.asarray(source["values"], dtype=np.float32)
    if "csv" in source:
        header, rows = _read_csv(manifest, source["csv"])
        if source["row"] >= len(rows):
            raise SampleError(
                f"sample {sid!r}: {source['csv']} has {len(rows)} data rows, "
                f"row {source['row']} requested")
        row = rows[source["row"]]
        if spec.encoding is None:
            # No declared encoding: take the whole row positionally.
            columns = row
        else:
            columns = []
            for rule in rules:
                if rule.name not in header:
                    raise SampleError(
                        f"sample {sid!r}: {source['csv']} has no column "
                        f"{rule.name!r} (header: {header})")
                columns.append(row[header.index(rule.name)])
        try:
            return encode_tabular(columns, rules)
        except EncodingError as exc:
            raise EncodingError(f"sample {sid!r}: {exc}") from exc
    arr = read_tensor(manifest.root / source["path"])
    if arr.shape != tuple(spec.shape):
        raise SampleError(
            f"sample {sid!r}: {source['path']} has shape {list(arr.shape)}, "
            f"manifest declares {list(spec.shape)}")
    return arr


def _load_image(manifest, spec, source, sid):
    if "values" in source:
        return np.asarray(source["values"], dtype=np.float32).reshape(spec.shape)
    arr = read_tensor(manifest.root / source["path"])
    if arr.shape != tuple(spec.shape):
        raise SampleError(
            f"sample {sid!r}: {source['path']} has shape {list(arr.shape)}, "
            f"manifest declares {list(spec.shape)}")
    return arr


def _load_text(manifest, spec, source, sid):
    if "text" in source:
        content = source["text"]
    else:
        try:
            content = (manifest.root / source["path"]).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise SampleError(
                f"sample {sid!r}: cannot read {source['path']}: {exc}") from exc
    tokens = content.split()
    if not tokens:
        raise SampleError(
            f"sample {sid!r}: text modality {spec.name!r} has no tokens")
    return tokens


def load_sample(manifest: Manifest, index: int) -> dict:
    """Load sample ``index`` as a mapping from modality name to value.

    Numeric modalities load as float32 arrays of the declared shape; text
    loads as the list of whitespace tokens, case preserved.  Loading is pure:
    repeated calls return equal values.
    """
    if not 0 <= index < len(manifest.samples):
        raise SampleError(
            f"sample index {index} out of range for {len(manifest.samples)} samples")
    rec = manifest.samples[index]
    out = {}
    for spec in manifest.modalities:
        source = rec.inputs[spec.name]
        if spec.kind == "tabular":
            value = _load_tabular(manifest, spec, source, rec.id)
        elif spec.kind == "image":
            value = _load_image(manifest, spec, source, rec.id)
        else:
            value = _load_text(manifest, spec, source, rec.id)
        if isinstance(value, np.ndarray) and not np.isfinite(value).all():
            raise SampleError(
                f"sample {rec.id!r}: modality {spec.name!r} contains "
                "non-finite values")
        out[spec.name] = value
    return out


class ArrayDataset:
    """In-memory dataset with the same interface as :class:`Manifest`.

    ``samples`` is a list of mappings from modality name to array or token
    list; handy for library callers and tests that have data in hand.
    """

    def __init__(self, modalities, samples, ids=None):
        self.modalities = list(modalities)
        names = [m.name for m in self.modalities]
        self._samples = []
        for k, sample in enumerate(samples):
            if set(sample) != set(names):
                raise SampleError(
                    f"sample {k} modalities {sorted(sample)} do not match "
                    f"declared {sorted(names)}")
            self._samples.append(dict(sample))
        if ids is None:
            ids = [f"s{k}" for k in range(len(self._samples))]
        if len(ids) != len(self._samples):
            raise SampleError("ids and samples have different lengths")
        self.sample_ids = [str(i) for i in ids]

    @property
    def modality_names(self):
        return [m.name for m in self.modalities]

    def __len__(self):
        return len(self._samples)

    def load(self, index):
        return dict(self._samples[index])

    def iter_samples(self):
        for k in range(len(self._samples)):
            yield self.sample_ids[k], self.load(k)
