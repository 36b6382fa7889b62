import json
from pathlib import Path

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib
from PIL import Image

from lusc.data import DatasetArchive, channel_stats
from lusc.synthetic import BLOB_CLASSES, make_blobs

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_archive():
    images, labels = make_blobs(per_class=100, size=64, seed=0)
    images = images.astype(np.float32) / 255.0
    mean, std = channel_stats(images)
    return DatasetArchive(images, labels, list(BLOB_CLASSES), mean, std)


def write_image_tree(root: Path, counts: dict, size=(8, 8), seed=0, fmt="png") -> Path:
    """Create ``root/<class>/<i>.<fmt>`` with random RGB content."""
    r = np.random.default_rng(seed)
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            px = r.integers(0, 256, size=(*size, 3), dtype=np.uint8)
            Image.fromarray(px).save(d / f"{i:03d}.{fmt}")
    return root


@pytest.fixture
def image_tree(tmp_path):
    return lambda counts, **kw: write_image_tree(tmp_path / "images", counts, **kw)


def read_toml(path) -> dict:
    return tomllib.loads(Path(path).read_text())


def write_toml(path: Path, raw: dict) -> Path:
    """Minimal TOML writer: JSON scalars and arrays are valid TOML values."""
    lines = []

    def emit(prefix, table):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        if prefix:
            lines.append(f"[{prefix}]")
        lines.extend(f"{k} = {json.dumps(v)}" for k, v in scalars.items())
        lines.append("")
        for k, v in table.items():
            if isinstance(v, dict):
                emit(f"{prefix}.{k}" if prefix else k, v)

    emit("", raw)
    Path(path).write_text("\n".join(lines))
    return Path(path)


def blob_config(tmp: Path, max_epochs=None, **sections) -> dict:
    """The committed blob compare config with every path moved under ``tmp``."""
    raw = read_toml(REPO / "configs" / "blobs_compare.toml")
    raw["dataset"]["root"] = str(REPO / "data" / "blobs")
    raw["dataset"]["archive"] = str(tmp / "blobs.lusc")
    raw["output"]["dir"] = str(tmp / "out")
    if max_epochs is not None:
        raw["train"]["max_epochs"] = max_epochs
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return raw
