import json
import sys
from pathlib import Path

import numpy as np
import pytest

from modcontrib import write_tensor

TESTS_DIR = Path(__file__).parent
PROTO_SERVER = TESTS_DIR / "proto_server.py"

sys.path.insert(0, str(TESTS_DIR))


def server_command(config=None) -> str:
    parts = [sys.executable, str(PROTO_SERVER)]
    if config is not None:
        parts.append(json.dumps(config))
    import shlex
    return " ".join(shlex.quote(p) for p in parts)


def write_demo_dataset(root: Path, sample_count=2, seed=0, with_text=False,
                       labels=None):
    """Small on-disk dataset: 4x4 image + 3 tabular fields (+ optional text).

    Returns the manifest path.
    """
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = ["age,sex,flag"]
    samples = []
    texts = ["the heart is normal in size",
             "no acute disease seen today",
             "left lung base opacity noted",
             "pectus deformity is noted here"]
    for k in range(sample_count):
        write_tensor(root / f"img{k}.mtn",
                     rng.normal(size=(4, 4)).astype(np.float32))
        rows.append(f"{50 + k},{'M' if k % 2 == 0 else 'F'},{k % 2}")
        inputs = {
            "scan": {"path": f"img{k}.mtn"},
            "clinical": {"csv": "clinical.csv", "row": k},
        }
        if with_text:
            inputs["note"] = {"text": texts[k % len(texts)]}
        samples.append({"id": f"p{k}", "inputs": inputs})
    (root / "clinical.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    modalities = [
        {"name": "scan", "kind": "image", "shape": [4, 4], "patch_shape": [2, 2]},
        {"name": "clinical", "kind": "tabular", "shape": [3],
         "encoding": [{"name": "age"},
                      {"name": "sex", "map": {"M": 1, "F": 2}},
                      {"name": "flag"}]},
    ]
    if with_text:
        modalities.append({"name": "note", "kind": "text"})
    manifest = {"name": "demo", "modalities": modalities, "samples": samples}
    if labels is not None:
        manifest["labels"] = labels
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def demo_builtin_spec(seed=0, output_dim=2, with_text=False):
    """A linear builtin matched to write_demo_dataset's numeric modalities."""
    rng = np.random.default_rng(seed + 1000)
    spec = {
        "kind": "linear",
        "weights": {
            "scan": rng.normal(size=(output_dim, 16)).tolist(),
            "clinical": rng.normal(size=(output_dim, 3)).tolist(),
        },
        "bias": rng.normal(size=output_dim).tolist(),
    }
    assert not with_text, "builtins cannot consume token modalities"
    return spec


@pytest.fixture
def demo_dataset(tmp_path):
    return write_demo_dataset(tmp_path / "data")
