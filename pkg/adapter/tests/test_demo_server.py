"""Drive the demo model as a real subprocess, speaking the protocol by hand."""

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from modelshim.demo import (DEMO_BIAS, DEMO_CLINICAL_WEIGHTS,
                            DEMO_SCAN_WEIGHTS, demo_predict)


@pytest.fixture
def server():
    proc = subprocess.Popen(
        [sys.executable, "-m", "modelshim.demo"],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE,
        stderr=subprocess.PIPE, text=True, bufsize=1)
    yield proc
    proc.stdin.close()
    proc.wait(timeout=10)


def ask(proc, message):
    proc.stdin.write(json.dumps(message) + "\n")
    proc.stdin.flush()
    return json.loads(proc.stdout.readline())


def test_handshake(server):
    hello = ask(server, {"op": "hello"})
    assert hello == {"version": "1", "output_dim": 2, "batch": 64,
                     "name": "modelshim-demo"}


def test_predict_matches_hand_computation(server):
    scan = [float(v) / 8.0 for v in range(16)]
    clinical = [1.0, 0.5, -0.25]
    response = ask(server, {
        "id": 1, "op": "predict",
        "inputs": {"scan": {"shape": [4, 4], "data": scan},
                   "clinical": {"shape": [3], "data": clinical}}})
    logits = [
        sum(w * x for w, x in zip(DEMO_SCAN_WEIGHTS[c], scan))
        + sum(w * x for w, x in zip(DEMO_CLINICAL_WEIGHTS[c], clinical))
        + DEMO_BIAS[c]
        for c in range(2)
    ]
    peak = max(logits)
    exp = [math.exp(v - peak) for v in logits]
    expected = [v / sum(exp) for v in exp]
    assert response["id"] == 1
    assert len(response["output"]) == 2
    assert abs(sum(response["output"]) - 1.0) < 1e-12
    for got, want in zip(response["output"], expected):
        assert abs(got - want) < 1e-12


def test_predict_function_directly():
    inputs = {"scan": np.zeros((4, 4)), "clinical": np.zeros(3)}
    out = demo_predict(inputs)
    assert len(out) == 2
    assert abs(sum(out) - 1.0) < 1e-12
    # with zero inputs only the bias drives the split
    assert out[0] > out[1]


def test_error_response_keeps_server_alive(server):
    bad = ask(server, {"id": 1, "op": "predict",
                       "inputs": {"scan": {"data": [1.0]}}})
    assert "error" in bad
    hello = ask(server, {"op": "hello"})
    assert hello["version"] == "1"
