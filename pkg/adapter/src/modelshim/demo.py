"""Reference model: a softmax-linear classifier over two modalities.

Run ``python3 -m modelshim.demo`` to serve it; the analyzer consumes it as
``--model exec:"python3 -m modelshim.demo"``.  The weights are literal so a
byte-equal twin can be built elsewhere for cross-checking.
"""

from __future__ import annotations

import numpy as np

from . import serve

# 2 classes x 16 flattened pixels of a 4x4 scan
DEMO_SCAN_WEIGHTS = [
    [0.25, -0.5, 0.125, 0.75, -0.25, 0.5, -0.125, 0.375,
     0.0625, -0.75, 0.25, -0.375, 0.5, 0.125, -0.0625, 0.25],
    [-0.125, 0.25, -0.75, 0.5, 0.375, -0.25, 0.0625, -0.5,
     0.75, 0.125, -0.375, 0.25, -0.0625, 0.5, 0.25, -0.25],
]
# 2 classes x 3 clinical fields
DEMO_CLINICAL_WEIGHTS = [
    [0.5, -0.25, 0.75],
    [-0.375, 0.625, -0.125],
]
DEMO_BIAS = [0.125, -0.25]

OUTPUT_DIM = 2


def demo_predict(inputs: dict) -> list:
    logits = (np.asarray(DEMO_SCAN_WEIGHTS) @ inputs["scan"].reshape(-1)
              + np.asarray(DEMO_CLINICAL_WEIGHTS) @ inputs["clinical"].reshape(-1)
              + np.asarray(DEMO_BIAS))
    shifted = np.exp(logits - logits.max())
    return (shifted / shifted.sum()).tolist()


def main() -> None:
    serve(demo_predict, OUTPUT_DIM, name="modelshim-demo")


if __name__ == "__main__":
    main()
