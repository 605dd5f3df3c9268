"""Corpus plumbing: labeled grayscale views, pose encoding, pair building.

A corpus is a flat list of 64x64 single-channel views, each tagged with an
object class, an azimuth, a day/night flag, and a capture range. Training
units are ordered (input view, target view) pairs of the same class, plus a
5-entry pose vector describing the requested target viewpoint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 64
POSE_DIM = 5

SampleKey = tuple[int, float, int, float]


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Map an 8-bit raster with values in [0, 255] onto [-1, 1].

    The decoder's tanh output lives in (-1, 1), so inputs are brought onto
    the same scale: out = raw / 127.5 - 1.
    """
    raw = np.asarray(raw)
    if raw.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(
            f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} raster, got shape {raw.shape}"
        )
    values = raw.astype(np.float64)
    if values.min() < 0 or values.max() > 255:
        raise ValueError("raw raster values must lie in [0, 255]")
    return (values / 127.5 - 1.0).astype(np.float32)


def denormalize_image(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_image`, re-quantized to uint8."""
    image = np.asarray(image)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(
            f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} raster, got shape {image.shape}"
        )
    out = np.round((image.astype(np.float64) + 1.0) * 127.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def encode_pose(
    input_azimuth_deg: float, target_azimuth_deg: float, target_day_night: int
) -> np.ndarray:
    """Build the 5-entry conditioning vector for a requested target view.

    Entries: [sin t, cos t, sin d, cos d, flag] where t is the target azimuth,
    d = (target - input) mod 360, both in radians, and flag is the target
    day/night regime. Sin/cos pairs avoid the 0/360 wraparound discontinuity.
    """
    for name, az in (("input", input_azimuth_deg), ("target", target_azimuth_deg)):
        if not 0.0 <= az < 360.0:
            raise ValueError(f"{name} azimuth {az} outside [0, 360)")
    if target_day_night not in (0, 1):
        raise ValueError(f"day/night flag must be 0 or 1, got {target_day_night}")
    t = math.radians(target_azimuth_deg)
    d = math.radians((target_azimuth_deg - input_azimuth_deg) % 360.0)
    return np.array(
        [math.sin(t), math.cos(t), math.sin(d), math.cos(d), float(target_day_night)],
        dtype=np.float64,
    )


def check_pose(pose: np.ndarray) -> None:
    """Validate a pose vector: unit sin/cos pairs and a binary flag."""
    pose = np.asarray(pose)
    if pose.shape != (POSE_DIM,):
        raise ValueError(f"pose vector must have length {POSE_DIM}, got {pose.shape}")
    for i in (0, 2):
        norm = pose[i] ** 2 + pose[i + 1] ** 2
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"pose entries {i},{i + 1} not on the unit circle: {norm}")
    if pose[4] not in (0.0, 1.0):
        raise ValueError(f"pose day/night entry must be 0 or 1, got {pose[4]}")


def angular_distance_deg(a: float, b: float) -> float:
    """Shortest circular distance between two azimuths, in degrees."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


@dataclass(eq=False)
class ViewSample:
    """One labeled grayscale view."""

    image: np.ndarray  # (64, 64) float32 in [-1, 1]
    class_id: int
    azimuth_deg: float
    day_night: int  # 0 = day, 1 = night
    range_m: float  # metadata only

    def key(self) -> SampleKey:
        return (self.class_id, self.azimuth_deg, self.day_night, self.range_m)

    def validate(self) -> None:
        img = np.asarray(self.image)
        if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"sample image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError("sample image contains non-finite values")
        if img.min() < -1.0 or img.max() > 1.0:
            raise ValueError("sample image values must lie in [-1, 1]")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth {self.azimuth_deg} outside [0, 360)")
        if self.day_night not in (0, 1):
            raise ValueError(f"day/night flag must be 0 or 1, got {self.day_night}")


@dataclass(eq=False)
class ViewPair:
    """An (input view, target view, pose) training unit."""

    input: ViewSample
    target: ViewSample
    pose: np.ndarray

    def validate(self) -> None:
        if self.input.class_id != self.target.class_id:
            raise ValueError(
                f"pair crosses classes: {self.input.class_id} vs {self.target.class_id}"
            )
        check_pose(self.pose)
        expected = encode_pose(
            self.input.azimuth_deg, self.target.azimuth_deg, self.target.day_night
        )
        if not np.allclose(self.pose, expected, atol=1e-9):
            raise ValueError("pose vector inconsistent with the pair's azimuths/regime")


@dataclass
class ManifestRecord:
    path: str  # relative to the manifest root
    class_id: int
    azimuth_deg: float
    day_night: int
    range_m: float

    def key(self) -> SampleKey:
        return (self.class_id, self.azimuth_deg, self.day_night, self.range_m)


@dataclass
class DatasetManifest:
    """Index of a view corpus on disk plus its angular sampling step."""

    records: list[ManifestRecord]
    angular_step_deg: float
    root: Path = field(default_factory=Path)
    meta: dict[str, str] = field(default_factory=dict)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


_MANIFEST_HEADER = ["path", "class_id", "azimuth_deg", "day_night", "range_m"]


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the line-delimited manifest: header, comment lines, records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_MANIFEST_HEADER)
        fh.write(f"#step={manifest.angular_step_deg:g}\n")
        for key in sorted(manifest.meta):
            fh.write(f"#{key}={manifest.meta[key]}\n")
        for rec in manifest.records:
            writer.writerow(
                [rec.path, rec.class_id, f"{rec.azimuth_deg:g}", rec.day_night, f"{rec.range_m:g}"]
            )
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records: list[ManifestRecord] = []
    meta: dict[str, str] = {}
    step: float | None = None
    header_seen = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key == "step":
                    step = float(value)
                else:
                    meta[key] = value
                continue
            if not header_seen:
                if [c.strip() for c in line.split(",")] != _MANIFEST_HEADER:
                    raise ValueError(f"unexpected manifest header: {line!r}")
                header_seen = True
                continue
            row = next(csv.reader([line]))
            records.append(
                ManifestRecord(
                    path=row[0],
                    class_id=int(row[1]),
                    azimuth_deg=float(row[2]),
                    day_night=int(row[3]),
                    range_m=float(row[4]),
                )
            )
    if step is None:
        raise ValueError(f"manifest {path} is missing the '#step=' line")
    return DatasetManifest(records=records, angular_step_deg=step, root=path.parent, meta=meta)


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check key uniqueness, file existence, raster size, and azimuth grid."""
    seen: set[SampleKey] = set()
    for rec in manifest.records:
        key = rec.key()
        if key in seen:
            raise ValueError(f"duplicate manifest key {key}")
        seen.add(key)
        if not 0.0 <= rec.azimuth_deg < 360.0:
            raise ValueError(f"azimuth {rec.azimuth_deg} outside [0, 360) in {rec.path}")
        ratio = rec.azimuth_deg / manifest.angular_step_deg
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError(
                f"azimuth {rec.azimuth_deg} is not a multiple of the "
                f"{manifest.angular_step_deg} degree step"
            )
        if rec.day_night not in (0, 1):
            raise ValueError(f"day/night flag must be 0 or 1 in {rec.path}")
        full = manifest.resolve(rec)
        if not full.exists():
            raise FileNotFoundError(f"manifest references missing file {full}")
        with Image.open(full) as im:
            if im.size != (IMAGE_SIZE, IMAGE_SIZE):
                raise ValueError(f"{full} decodes to {im.size}, expected {IMAGE_SIZE}x{IMAGE_SIZE}")


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as a (64, 64) uint8 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {arr.shape}")
    return arr


def load_samples(manifest: DatasetManifest) -> list[ViewSample]:
    samples = []
    for rec in manifest.records:
        image = normalize_image(load_image(manifest.resolve(rec)))
        samples.append(
            ViewSample(
                image=image,
                class_id=rec.class_id,
                azimuth_deg=rec.azimuth_deg,
                day_night=rec.day_night,
                range_m=rec.range_m,
            )
        )
    return samples


def generate_pairs(
    samples: Sequence[ViewSample],
    max_delta_deg: float = 360.0,
    cross_regime: bool = False,
    angular_step_deg: float | None = None,
) -> list[ViewPair]:
    """Emit every ordered same-class pair within the angular window.

    A pair (a, b) qualifies when a and b share a class, are distinct samples,
    their circular azimuth distance is at most ``max_delta_deg``, and their
    day/night regimes match unless ``cross_regime`` is set. Output order is
    deterministic: sorted by class, input azimuth, target azimuth, then
    regimes and ranges.
    """
    if angular_step_deg is not None:
        ratio = max_delta_deg / angular_step_deg
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError(
                f"max_delta_deg={max_delta_deg} is not a multiple of the "
                f"{angular_step_deg} degree step"
            )
    by_class: dict[int, list[ViewSample]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)
    pairs: list[ViewPair] = []
    for class_id in sorted(by_class):
        group = by_class[class_id]
        for a in group:
            for b in group:
                if a is b or a.key() == b.key():
                    continue
                if not cross_regime and a.day_night != b.day_night:
                    continue
                if angular_distance_deg(a.azimuth_deg, b.azimuth_deg) > max_delta_deg + 1e-9:
                    continue
                pose = encode_pose(a.azimuth_deg, b.azimuth_deg, b.day_night)
                pairs.append(ViewPair(input=a, target=b, pose=pose))
    pairs.sort(
        key=lambda p: (
            p.input.class_id,
            p.input.azimuth_deg,
            p.target.azimuth_deg,
            p.input.day_night,
            p.target.day_night,
            p.input.range_m,
            p.target.range_m,
        )
    )
    return pairs


def pairs_from_manifest(
    manifest: DatasetManifest, max_delta_deg: float = 360.0, cross_regime: bool = False
) -> list[ViewPair]:
    samples = load_samples(manifest)
    return generate_pairs(
        samples,
        max_delta_deg=max_delta_deg,
        cross_regime=cross_regime,
        angular_step_deg=manifest.angular_step_deg,
    )


def split_train_test(
    pairs: Sequence[ViewPair], test_fraction: float, seed: int
) -> tuple[list[ViewPair], list[ViewPair]]:
    """Disjoint, exhaustive split that never leaks a target view across sets.

    Pairs are grouped by target-view identity and whole groups are assigned
    to the test side until it reaches round(test_fraction * n) pairs, so a
    view that appears as a test target is never also a train target.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if not pairs:
        return [], []
    groups: dict[SampleKey, int] = {}
    for p in pairs:
        groups[p.target.key()] = groups.get(p.target.key(), 0) + 1
    keys = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    wanted = int(round(test_fraction * len(pairs)))
    test_keys: set[SampleKey] = set()
    assigned = 0
    for idx in order:
        if assigned >= wanted:
            break
        key = keys[idx]
        test_keys.add(key)
        assigned += groups[key]
    train = [p for p in pairs if p.target.key() not in test_keys]
    test = [p for p in pairs if p.target.key() in test_keys]
    return train, test
