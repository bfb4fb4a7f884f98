"""Dataset ingestion and the synthetic generators.

On-disk layout (bit-exact contract):

    <dir>/images/<id>.png   8-bit RGB
    <dir>/masks/<id>.png    8-bit grayscale, strictly {0, 255}
    <dir>/labels.csv        header id,label,stage; stage may be empty

Two synthetic regimes stand in for clinical data. DPSD places a textured
disc ellipse with a concentric inner cup whose radius ratio is the stage;
the class flips where the ratio crosses 0.6, so labels demand the ratio,
not any absolute size. SPDD draws identical-texture nodules whose radius
comes from two overlapping distributions; the label is the generating
distribution, so appearance alone is ambiguous.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DatasetError, YNetError
from .nn import bilinear_resize


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, N, N) float in [0,1]
    mask: np.ndarray   # (N, N) uint8 in {0,1}
    label: int
    stage: Optional[float] = None


def decode_image_bytes(data: bytes, size: int) -> np.ndarray:
    """PNG/JPEG bytes -> (3, size, size) float in [0,1], resizing if needed."""
    import io

    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_dataset(root) -> list[Sample]:
    """Read the layout above into samples sorted by id."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    labels_path = root / "labels.csv"
    if not images_dir.is_dir() or not masks_dir.is_dir() or not labels_path.is_file():
        raise DatasetError("expected images/, masks/ and labels.csv", str(root))

    labels: dict[str, tuple[int, Optional[float]]] = {}
    with open(labels_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "label", "stage"]:
            raise DatasetError(f"bad labels.csv header {reader.fieldnames}", str(labels_path))
        for row in reader:
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise DatasetError(f"unknown label {row['label']!r} for id {row['id']!r}", str(labels_path))
            stage = float(row["stage"]) if row["stage"] not in (None, "") else None
            labels[row["id"]] = (label, stage)

    samples: list[Sample] = []
    for img_path in sorted(images_dir.glob("*.png")):
        sid = img_path.stem
        mask_path = masks_dir / f"{sid}.png"
        if not mask_path.is_file():
            raise DatasetError(f"missing mask for image {sid!r}", str(mask_path))
        if sid not in labels:
            raise DatasetError(f"no labels.csv row for image {sid!r}", str(labels_path))
        with Image.open(img_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        image = rgb.transpose(2, 0, 1)
        with Image.open(mask_path) as im:
            raw = np.asarray(im.convert("L"))
        bad = np.setdiff1d(np.unique(raw), [0, 255])
        if bad.size:
            raise DatasetError(f"mask has non-binary pixel values {bad.tolist()}", str(mask_path))
        label, stage = labels[sid]
        samples.append(Sample(id=sid, image=image, mask=(raw == 255).astype(np.uint8), label=label, stage=stage))
    return samples


def split(samples: list[Sample], ratio: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Stratified train/test split; |test| = round((1-ratio)*n) per class."""
    if not 0 < ratio < 1:
        raise YNetError(f"split ratio must be in (0,1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    if any(len(v) == 0 for v in by_class.values()) or len(by_class) == 0:
        import warnings

        warnings.warn("empty stratum; falling back to an unstratified split")
        by_class = {0: list(samples)}

    train: list[Sample] = []
    test: list[Sample] = []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda s: s.id)
        n_test = round((1 - ratio) * len(group))
        order = rng.permutation(len(group))
        chosen = set(order[:n_test].tolist())
        for i, s in enumerate(group):
            (test if i in chosen else train).append(s)
    train.sort(key=lambda s: s.id)
    test.sort(key=lambda s: s.id)
    return train, test


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _texture(rng: np.random.Generator, size: int, coarse: int, amplitude: float) -> np.ndarray:
    noise = rng.random((coarse, coarse))
    return amplitude * bilinear_resize(noise, size, size)


def ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    """Pixels whose centers fall inside the ellipse; the rasterization rule
    the mask contract is tested against."""
    y, x = np.mgrid[0:size, 0:size]
    return (((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0).astype(np.uint8)


def _write_sample(root: Path, sid: str, image: np.ndarray, mask: np.ndarray) -> None:
    arr = np.clip(image, 0.0, 1.0)
    rgb = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{sid}.png")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(root / "masks" / f"{sid}.png")


@dataclass
class SynthRecord:
    id: str
    image: np.ndarray
    mask: np.ndarray
    label: int
    stage: Optional[float]
    geometry: dict  # ellipse parameters the mask was rasterized from


def _dpsd_sample(rng: np.random.Generator, size: int, label: int) -> tuple[np.ndarray, np.ndarray, float, dict]:
    # classes sit either side of the 0.6 ratio threshold with a small margin;
    # absolute sizes and intensities are shared across classes, so only the
    # cup/disc ratio carries the label
    stage = rng.uniform(0.62, 0.9) if label == 1 else rng.uniform(0.2, 0.58)
    base = rng.uniform(0.35, 0.5)
    img = base + _texture(rng, size, 6, 0.12) + _texture(rng, size, 16, 0.06)

    cx = size * rng.uniform(0.35, 0.65)
    cy = size * rng.uniform(0.35, 0.65)
    rx = size * rng.uniform(0.14, 0.3)
    ry = rx * rng.uniform(0.8, 1.25)
    disc = ellipse_mask(size, cx, cy, rx, ry)
    cup = ellipse_mask(size, cx, cy, stage * rx, stage * ry)

    img = img + disc * rng.uniform(0.16, 0.24) + cup * rng.uniform(0.18, 0.26)
    rgb = np.stack([img * g for g in (1.0, rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.9))])
    return np.clip(rgb, 0, 1), disc, stage, {"cx": cx, "cy": cy, "rx": rx, "ry": ry}


def _spdd_sample(rng: np.random.Generator, size: int, label: int) -> tuple[np.ndarray, np.ndarray, dict]:
    img = rng.uniform(0.35, 0.5) + _texture(rng, size, 6, 0.12) + _texture(rng, size, 16, 0.06)
    mean_r = size * (0.10 if label == 0 else 0.16)
    r = float(np.clip(rng.normal(mean_r, size * 0.03), size * 0.05, size * 0.28))
    cx = size * rng.uniform(0.35, 0.65)
    cy = size * rng.uniform(0.35, 0.65)
    nodule = ellipse_mask(size, cx, cy, r, r)
    img = img + nodule * 0.2
    rgb = np.stack([img, img, img])
    return np.clip(rgb, 0, 1), nodule, {"cx": cx, "cy": cy, "rx": r, "ry": r}


def generate_records(scenario: str, n: int, image_size: int, seed: int) -> list[SynthRecord]:
    """Pure generator core; deterministic under seed, alternating labels."""
    scenario = scenario.lower()
    if scenario not in ("spdd", "dpsd"):
        raise YNetError(f"unknown scenario {scenario!r}")
    if n < 4 or n % 2 != 0:
        raise YNetError(f"n must be even and >= 4, got {n}")
    rng = np.random.default_rng(seed)
    records: list[SynthRecord] = []
    for i in range(n):
        label = i % 2
        sid = f"{scenario}_{i:05d}"
        if scenario == "dpsd":
            image, mask, stage, geom = _dpsd_sample(rng, image_size, label)
        else:
            image, mask, geom = _spdd_sample(rng, image_size, label)
            stage = None
        records.append(SynthRecord(id=sid, image=image, mask=mask, label=label, stage=stage, geometry=geom))
    return records


def synth_generate(scenario: str, n: int, image_size: int, seed: int, out_dir) -> Path:
    """Write a synthetic dataset in the ingestion layout; deterministic under seed."""
    records = generate_records(scenario, n, image_size, seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for rec in records:
        _write_sample(out, rec.id, rec.image, rec.mask)
    with open(out / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "label", "stage"])
        for rec in sorted(records, key=lambda r: r.id):
            writer.writerow([rec.id, rec.label, "" if rec.stage is None else f"{rec.stage:.6f}"])
    return out
