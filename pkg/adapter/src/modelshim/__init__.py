"""Serve a Python predict function over the analyzer's wire protocol.

The analyzer (`modcontrib analyze --model exec:"<command>"`) spawns the
command and speaks newline-delimited JSON v1: a ``hello`` handshake, then
``predict`` requests carrying the already-occluded inputs.  ``serve`` turns
any ``predict(inputs) -> sequence of floats`` into such a command:

    import modelshim

    def predict(inputs):          # inputs: name -> ndarray | token list
        ...
        return [score_a, score_b]

    modelshim.serve(predict, output_dim=2)

No analyzer code is imported; the only coupling is the documented message
format.
"""

from __future__ import annotations

import json
import math
import sys

import numpy as np

PROTOCOL_VERSION = "1"

__all__ = ["PROTOCOL_VERSION", "decode_inputs", "serve"]


def decode_inputs(wire: dict) -> dict:
    """Turn wire-format inputs into predict-ready values.

    Numeric modalities ``{"shape": [...], "data": [...]}`` become float64
    arrays of that shape; token modalities ``{"tokens": [...]}`` become
    string lists.
    """
    if not isinstance(wire, dict):
        raise ValueError("inputs must be an object keyed by modality name")
    decoded = {}
    for name, spec in wire.items():
        if not isinstance(spec, dict):
            raise ValueError(f"modality {name!r}: expected an object")
        if "tokens" in spec:
            decoded[name] = [str(t) for t in spec["tokens"]]
        elif "data" in spec:
            arr = np.asarray(spec["data"], dtype=np.float64)
            decoded[name] = arr.reshape(spec.get("shape", arr.shape))
        else:
            raise ValueError(f"modality {name!r}: needs 'data' or 'tokens'")
    return decoded


def _encode_output(raw, output_dim: int) -> list:
    values = np.asarray(raw, dtype=np.float64).reshape(-1)
    if values.size != output_dim:
        raise ValueError(f"output has {values.size} values, "
                         f"expected {output_dim}")
    out = [float(v) for v in values]
    if not all(math.isfinite(v) for v in out):
        raise ValueError("output contains non-finite values")
    return out


def serve(predict, output_dim: int, *, batch_limit: int = 64,
          name: str = "model", stdin=None, stdout=None) -> None:
    """Answer protocol messages on stdin until EOF.

    ``predict`` receives decoded inputs and must return ``output_dim``
    finite floats.  Exceptions it raises become per-request error
    responses; the loop itself never dies on bad input.  ``stdin`` and
    ``stdout`` default to the process streams and can be any text streams
    (handy for tests).
    """
    if output_dim < 1:
        raise ValueError(f"output_dim must be positive, got {output_dim}")
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout

    def reply(message):
        stdout.write(json.dumps(message, separators=(",", ":")) + "\n")
        stdout.flush()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
        except json.JSONDecodeError:
            reply({"id": None, "error": "request is not valid JSON"})
            continue
        if not isinstance(message, dict):
            reply({"id": None, "error": "request must be a JSON object"})
            continue
        rid = message.get("id")
        op = message.get("op")
        if op == "hello":
            reply({"version": PROTOCOL_VERSION, "output_dim": output_dim,
                   "batch": batch_limit, "name": name})
            continue
        if op != "predict":
            reply({"id": rid, "error": f"unknown op {op!r}"})
            continue
        try:
            inputs = decode_inputs(message.get("inputs", {}))
            output = _encode_output(predict(inputs), output_dim)
        except Exception as exc:
            reply({"id": rid, "error": f"{type(exc).__name__}: {exc}"})
            continue
        reply({"id": rid, "output": output})
