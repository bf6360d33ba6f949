import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from roadfusion import cli, toydata
from roadfusion.features import BackboneSpec, FeatureExtractor

TINY_SPEC = BackboneSpec(architecture="tiny", levels=(2, 3), weights_id="untrained:0")


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


def make_corpus(root: Path, n_normal: int = 3, n_anomalous: int = 0, size: int = 16):
    """Small on-disk corpus in the canonical images/ + masks/ layout."""
    rng = np.random.default_rng(0)
    for i in range(n_normal):
        write_png(root / "images" / f"img_{i:02d}.png",
                  rng.uniform(0.2, 0.8, (size, size, 3)))
    for i in range(n_anomalous):
        name = f"bad_{i:02d}"
        write_png(root / "images" / f"{name}.png",
                  rng.uniform(0.2, 0.8, (size, size, 3)))
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[2 : 2 + 3, 3 : 3 + 4] = 255
        write_png(root / "masks" / f"{name}.png", mask)
    return root


@pytest.fixture(scope="session")
def tiny_extractor():
    return FeatureExtractor(TINY_SPEC, input_size=64, patchsize=3)


class ToyRun:
    """One full generate/train/evaluate pass over the toy corpus."""

    def __init__(self, workdir: Path, seed: int = 0):
        self.root = workdir / "corpus"
        self.out = workdir / "runs"
        self.manifest = toydata.build_toy_corpus(self.root, seed=seed)
        self.config_path = workdir / "toy.json"
        self.config_path.write_text(
            json.dumps(toydata.toy_config_dict(self.root, self.out, seed=seed))
        )
        for command in ("generate", "train", "evaluate"):
            rc = cli.main([command, "--config", str(self.config_path)])
            assert rc == 0, f"toy {command} failed"
        self.run_dir = next(self.out.glob("run-*"))
        self.report = json.loads((self.run_dir / "report.json").read_text())
        self.run_manifest = json.loads(
            (self.run_dir / "run_manifest.json").read_text()
        )


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    return ToyRun(tmp_path_factory.mktemp("toy_a"))


@pytest.fixture(scope="session")
def toy_run_repeat(tmp_path_factory) -> ToyRun:
    """Second pipeline pass with identical seeds, for determinism checks."""
    return ToyRun(tmp_path_factory.mktemp("toy_b"))
