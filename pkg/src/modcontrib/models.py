"""Model handles: built-in reference models and wire-protocol clients.

Every handle answers ``predict(inputs) -> output vector`` where ``inputs``
maps modality names to arrays or token lists.  External predictors speak
newline-delimited JSON, protocol version "1":

    request   {"id": 7, "op": "predict", "inputs": {"scan": {"shape": [2, 2],
               "data": [...]}, "note": {"tokens": ["..."]}}}
    response  {"id": 7, "output": [0.9, 0.1]}   |   {"id": 7, "error": "..."}
    handshake {"op": "hello"}  ->  {"version": "1", "output_dim": 2,
               "batch": 16, "name": "demo"}

over a subprocess's stdin/stdout (one message per line) or HTTP
(``POST /predict``, ``GET /hello``).  Floats travel as decimal literals with
full round-trip precision.
"""

from __future__ import annotations

import itertools
import json
import queue
import shlex
import subprocess
import threading
import time
import urllib.error
import urllib.request
from collections import deque

import numpy as np

PROTOCOL_VERSION = "1"


class ModelError(Exception):
    """Base class for everything a model handle can raise."""


class TransportError(ModelError):
    """The channel to an external model failed (process, socket, timeout)."""


class ProtocolError(ModelError):
    """The external model sent something that is not valid protocol v1."""


class PredictionError(ModelError):
    """The model itself reported an error for a request."""


class OutputShapeError(ModelError):
    """The output length changed between calls or is not a flat vector."""


class NonFiniteOutputError(ModelError):
    """The model produced NaN or infinite values."""


class BatchError(ModelError):
    """A batched prediction failed; ``index`` names the failing request."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


def _excerpt(payload, limit=200) -> str:
    text = payload if isinstance(payload, str) else repr(payload)
    return text[:limit] + ("..." if len(text) > limit else "")


def _check_output(raw, expected_dim, context) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise OutputShapeError(
            f"{context}: output must be a non-empty flat vector, got shape "
            f"{arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteOutputError(
            f"{context}: output contains non-finite values: {_excerpt(raw)}")
    if expected_dim is not None and arr.size != expected_dim:
        raise OutputShapeError(
            f"{context}: output length drifted from {expected_dim} to {arr.size}")
    return arr


class Model:
    """Common behaviour for every handle.

    ``recheck_tolerance`` is the allowed slack when the engine re-issues a
    baseline call to detect nondeterminism: in-process models must reproduce
    outputs bit-identically, wire transports get float-transport slack.
    """

    identity = "model"
    name: str | None = None
    recheck_tolerance = 0.0
    batch_limit = 1
    output_dim: int | None = None

    def predict(self, inputs) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, batch) -> list:
        return [self.predict(inputs) for inputs in batch]

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class CallableModel(Model):
    """Wrap any in-process ``fn(inputs) -> vector`` as a model handle."""

    def __init__(self, fn, identity="callable"):
        self._fn = fn
        self.identity = identity

    def predict(self, inputs):
        out = _check_output(self._fn(inputs), self.output_dim, self.identity)
        if self.output_dim is None:
            self.output_dim = out.size
        return out


def _as_weight_matrix(raw, name):
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.size == 0:
        raise ModelError(
            f"builtin weights for modality {name!r} must be a vector or a "
            f"matrix of class rows, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ModelError(f"builtin weights for modality {name!r} are not finite")
    return arr


class _LinearCore:
    """Shared evaluation for the linear built-ins."""

    def __init__(self, weights, bias=None):
        if not isinstance(weights, dict) or not weights:
            raise ModelError("linear builtin needs a weights object keyed by modality")
        self.weights = {name: _as_weight_matrix(w, name)
                        for name, w in weights.items()}
        dims = {w.shape[0] for w in self.weights.values()}
        if len(dims) != 1:
            raise ModelError(
                f"linear builtin weight matrices disagree on output length: {sorted(dims)}")
        self.output_dim = dims.pop()
        if bias is None:
            self.bias = np.zeros(self.output_dim)
        else:
            self.bias = np.asarray(bias, dtype=np.float64)
            if self.bias.shape != (self.output_dim,):
                raise ModelError(
                    f"linear builtin bias must have length {self.output_dim}, "
                    f"got shape {self.bias.shape}")

    def logits(self, inputs):
        if set(inputs) != set(self.weights):
            raise ModelError(
                f"linear builtin expects modalities {sorted(self.weights)}, "
                f"got {sorted(inputs)}")
        out = self.bias.copy()
        for name, weight in self.weights.items():
            value = inputs[name]
            if isinstance(value, list):
                raise ModelError(
                    f"linear builtin cannot consume token modality {name!r}")
            flat = np.asarray(value, dtype=np.float64).reshape(-1)
            if flat.size != weight.shape[1]:
                raise ModelError(
                    f"linear builtin weights for {name!r} expect {weight.shape[1]} "
                    f"features, input has {flat.size}")
            out = out + weight @ flat
        return out


def _softmax(logits):
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


class BuiltinModel(Model):
    """Deterministic reference models described by a small JSON spec.

    kinds: ``linear`` (affine fusion of all modalities), ``softmax_linear``
    (softmax on top of the same), ``constant`` (fixed output vector, inputs
    ignored) and ``single`` (delegates exactly one modality to an inner
    spec, all other modalities ignored).
    """

    def __init__(self, spec):
        if isinstance(spec, str):
            spec = json.loads(spec)
        if not isinstance(spec, dict):
            raise ModelError("builtin spec must be a JSON object")
        self.spec = spec
        kind = spec.get("kind")
        self._kind = kind
        if kind in ("linear", "softmax_linear"):
            self._core = _LinearCore(spec.get("weights"), spec.get("bias"))
            self.output_dim = self._core.output_dim
        elif kind == "constant":
            out = np.asarray(spec.get("output"), dtype=np.float64)
            if out.ndim != 1 or out.size == 0 or not np.isfinite(out).all():
                raise ModelError("constant builtin needs a finite output vector")
            self._constant = out
            self.output_dim = out.size
        elif kind == "single":
            if "modality" not in spec or "inner" not in spec:
                raise ModelError("single builtin needs 'modality' and 'inner'")
            self._selector = spec["modality"]
            self._inner = BuiltinModel(spec["inner"])
            self.output_dim = self._inner.output_dim
        else:
            raise ModelError(
                f"unknown builtin kind {kind!r} (expected linear, "
                "softmax_linear, constant or single)")
        self.identity = "builtin:" + json.dumps(
            spec, sort_keys=True, separators=(",", ":"))
        self.name = kind

    def predict(self, inputs):
        if self._kind == "constant":
            out = self._constant
        elif self._kind == "single":
            if isinstance(self._selector, int):
                names = list(inputs)
                if not 0 <= self._selector < len(names):
                    raise ModelError(
                        f"single builtin selects modality index {self._selector}, "
                        f"inputs have {len(names)}")
                chosen = names[self._selector]
            else:
                chosen = self._selector
                if chosen not in inputs:
                    raise ModelError(
                        f"single builtin selects modality {chosen!r}, "
                        f"inputs have {sorted(inputs)}")
            out = self._inner.predict({chosen: inputs[chosen]})
        else:
            logits = self._core.logits(inputs)
            out = _softmax(logits) if self._kind == "softmax_linear" else logits
        return _check_output(out, self.output_dim, self.identity[:60])


def parse_builtin(text) -> BuiltinModel:
    """Build a :class:`BuiltinModel` from inline JSON or ``@file.json``."""
    if isinstance(text, dict):
        return BuiltinModel(text)
    if text.startswith("@"):
        with open(text[1:], encoding="utf-8") as fh:
            return BuiltinModel(json.load(fh))
    try:
        return BuiltinModel(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ModelError(f"builtin spec is not valid JSON: {exc}") from exc


def encode_inputs(inputs) -> dict:
    """Wire encoding of an input map: arrays as shape+data, tokens verbatim."""
    wire = {}
    for name, value in inputs.items():
        if isinstance(value, list):
            wire[name] = {"tokens": [str(t) for t in value]}
        else:
            arr = np.asarray(value)
            wire[name] = {"shape": list(arr.shape),
                          "data": [float(v) for v in arr.reshape(-1)]}
    return wire


def _validate_hello(raw, context) -> dict:
    if not isinstance(raw, dict):
        raise ProtocolError(f"{context}: handshake reply is not an object: "
                            f"{_excerpt(raw)}")
    version = raw.get("version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(
            f"{context}: protocol version {version!r} is not supported; this "
            f"client speaks version {PROTOCOL_VERSION!r} - upgrade one side")
    output_dim = raw.get("output_dim")
    if not isinstance(output_dim, int) or isinstance(output_dim, bool) or output_dim < 1:
        raise ProtocolError(
            f"{context}: handshake must declare a positive integer output_dim, "
            f"got {output_dim!r}")
    batch = raw.get("batch", 1)
    if not isinstance(batch, int) or isinstance(batch, bool) or batch < 1:
        raise ProtocolError(f"{context}: batch must be a positive integer, "
                            f"got {batch!r}")
    return {"version": version, "output_dim": output_dim, "batch": batch,
            "name": raw.get("name")}


def _parse_response(raw, context):
    if not isinstance(raw, dict):
        raise ProtocolError(f"{context}: response is not an object: {_excerpt(raw)}")
    if "error" in raw:
        raise PredictionError(f"{context}: model reported: {raw['error']}")
    if "output" not in raw:
        raise ProtocolError(
            f"{context}: response has neither output nor error: {_excerpt(raw)}")
    out = raw["output"]
    if not isinstance(out, list):
        raise ProtocolError(f"{context}: output is not a list: {_excerpt(raw)}")
    return out


class SubprocessModel(Model):
    """Client for a predictor served over a child process's stdin/stdout.

    Requests are serialized: the pipe is a strictly ordered channel.  A
    reader thread drains stdout so a slow consumer can never deadlock the
    child; stderr is retained (bounded) for error reports.
    """

    recheck_tolerance = 1e-6

    def __init__(self, command, timeout=60.0):
        self.command = command
        args = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self.identity = f"exec:{command if isinstance(command, str) else ' '.join(args)}"
        try:
            self._proc = subprocess.Popen(
                args, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise TransportError(f"cannot start model process {args!r}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._stderr: deque = deque(maxlen=50)
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._pending: dict = {}
        threading.Thread(target=self._drain_stdout, daemon=True).start()
        threading.Thread(target=self._drain_stderr, daemon=True).start()
        info = self._handshake()
        self.output_dim = info["output_dim"]
        self.batch_limit = info["batch"]
        self.name = info["name"]
        self.protocol_info = info

    def _drain_stdout(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _drain_stderr(self):
        for line in self._proc.stderr:
            self._stderr.append(line.rstrip("\n"))

    def _stderr_excerpt(self):
        if not self._stderr:
            return ""
        return " | stderr: " + _excerpt("; ".join(self._stderr), 300)

    def _next_line(self, deadline):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TransportError(
                f"{self.identity}: timed out after {self.timeout}s waiting for a "
                f"response{self._stderr_excerpt()}")
        try:
            line = self._lines.get(timeout=remaining)
        except queue.Empty:
            raise TransportError(
                f"{self.identity}: timed out after {self.timeout}s waiting for a "
                f"response{self._stderr_excerpt()}") from None
        if line is None:
            code = self._proc.poll()
            raise TransportError(
                f"{self.identity}: model process closed its output "
                f"(exit code {code}){self._stderr_excerpt()}")
        return line

    def _send(self, message):
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise TransportError(
                f"{self.identity}: cannot write to model process: {exc}"
                f"{self._stderr_excerpt()}") from exc

    def _receive(self, want_id, deadline):
        # Responses normally arrive in order; out-of-order ids are parked.
        while True:
            if want_id in self._pending:
                return self._pending.pop(want_id)
            line = self._next_line(deadline)
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ProtocolError(
                    f"{self.identity}: response is not valid JSON: "
                    f"{_excerpt(line)}") from exc
            if not isinstance(raw, dict):
                raise ProtocolError(
                    f"{self.identity}: response is not an object: {_excerpt(line)}")
            got = raw.get("id", None)
            if want_id is None or got == want_id:
                return raw
            self._pending[got] = raw

    def _handshake(self):
        with self._lock:
            self._send({"op": "hello"})
            raw = self._receive(None, time.monotonic() + self.timeout)
        return _validate_hello(raw, self.identity)

    def predict(self, inputs):
        with self._lock:
            rid = next(self._ids)
            self._send({"id": rid, "op": "predict",
                        "inputs": encode_inputs(inputs)})
            raw = self._receive(rid, time.monotonic() + self.timeout)
        out = _parse_response(raw, self.identity)
        return _check_output(out, self.output_dim, self.identity)

    def predict_batch(self, batch):
        if len(batch) > self.batch_limit:
            raise BatchError(
                f"{self.identity}: batch of {len(batch)} exceeds the model's "
                f"limit of {self.batch_limit}", index=self.batch_limit)
        if not batch:
            return []
        with self._lock:
            rids = []
            for inputs in batch:
                rid = next(self._ids)
                rids.append(rid)
                self._send({"id": rid, "op": "predict",
                            "inputs": encode_inputs(inputs)})
            deadline = time.monotonic() + self.timeout
            raws = [self._receive(rid, deadline) for rid in rids]
        outputs = []
        for index, raw in enumerate(raws):
            try:
                out = _parse_response(raw, self.identity)
                outputs.append(_check_output(out, self.output_dim, self.identity))
            except ModelError as exc:
                raise BatchError(
                    f"batch request {index} failed: {exc}", index=index) from exc
        return outputs

    def close(self):
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=3)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        for stream in (proc.stdout, proc.stderr):
            try:
                stream.close()
            except OSError:
                pass


class HttpModel(Model):
    """Client for a predictor served over HTTP.

    ``GET <base>/hello`` performs the handshake, ``POST <base>/predict``
    takes one request document per call.  Calls are independent, so this
    handle is safe to use from concurrent workers.
    """

    recheck_tolerance = 1e-6

    def __init__(self, url, timeout=60.0):
        self.base = url.rstrip("/")
        self.timeout = float(timeout)
        self.identity = f"http:{self.base}"
        self._ids = itertools.count(1)
        info = _validate_hello(self._get("/hello"), self.identity)
        self.output_dim = info["output_dim"]
        self.batch_limit = info["batch"]
        self.name = info["name"]
        self.protocol_info = info

    def _get(self, route):
        try:
            with urllib.request.urlopen(self.base + route,
                                        timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(f"{self.identity}: GET {route} failed: {exc}") from exc
        return self._decode(body)

    def _post(self, route, message):
        data = json.dumps(message).encode("utf-8")
        req = urllib.request.Request(
            self.base + route, data=data,
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            # An error response may still be a protocol-level error document.
            body = exc.read()
            if not body:
                raise TransportError(
                    f"{self.identity}: POST {route} failed: {exc}") from exc
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise TransportError(f"{self.identity}: POST {route} failed: {exc}") from exc
        return self._decode(body)

    def _decode(self, body):
        try:
            return json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(
                f"{self.identity}: response is not valid JSON: "
                f"{_excerpt(body.decode('utf-8', 'replace'))}") from exc

    def predict(self, inputs):
        rid = next(self._ids)
        raw = self._post("/predict", {"id": rid, "op": "predict",
                                      "inputs": encode_inputs(inputs)})
        out = _parse_response(raw, self.identity)
        return _check_output(out, self.output_dim, self.identity)

    def predict_batch(self, batch):
        if len(batch) > self.batch_limit:
            raise BatchError(
                f"{self.identity}: batch of {len(batch)} exceeds the model's "
                f"limit of {self.batch_limit}", index=self.batch_limit)
        outputs = []
        for index, inputs in enumerate(batch):
            try:
                outputs.append(self.predict(inputs))
            except ModelError as exc:
                raise BatchError(
                    f"batch request {index} failed: {exc}", index=index) from exc
        return outputs


def open_model(flag: str, timeout=60.0) -> Model:
    """Open a model handle from a CLI flag.

    ``builtin:<json|@file>`` for reference models, ``exec:<command>`` for a
    subprocess speaking protocol v1 on stdio, ``http://...`` (or
    ``http:<url>``) for an HTTP endpoint.
    """
    if flag.startswith("builtin:"):
        return parse_builtin(flag[len("builtin:"):])
    if flag.startswith("exec:"):
        command = flag[len("exec:"):].strip()
        if not command:
            raise ModelError("exec: needs a command line")
        return SubprocessModel(command, timeout=timeout)
    if flag.startswith(("http://", "https://")):
        return HttpModel(flag, timeout=timeout)
    if flag.startswith("http:"):
        rest = flag[len("http:"):]
        if not rest.startswith(("http://", "https://")):
            rest = "http://" + rest.lstrip("/")
        return HttpModel(rest, timeout=timeout)
    raise ModelError(
        f"unrecognized model flag {flag!r} (expected builtin:, exec: or an "
        "http(s) URL)")
