"""Procedural stand-in corpus with an infrared look.

Each class is a fixed arrangement of 3-6 box/ellipsoid parts living in a 3D
object frame, rendered orthographically after rotation about the vertical
axis, with 2-4 additive heat blobs riding on the object and noisy clutter in
the background. The night regime darkens the background and raises the
object/background contrast. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    IMAGE_SIZE,
    DatasetManifest,
    ManifestRecord,
    write_manifest,
)

DEFAULT_RANGE_M = 500.0

# day/night composition constants: background level, object gain, clutter
# amplitude, pixel noise sigma (all on the [0, 1] intensity scale)
_REGIME_PARAMS = {
    0: dict(background=0.36, object_gain=0.38, clutter=0.05, noise=0.035),
    1: dict(background=0.12, object_gain=0.62, clutter=0.03, noise=0.025),
}


@dataclass
class PartSpec:
    kind: str  # "box" or "ellipsoid"
    center: np.ndarray  # (3,) object-frame coordinates, axes (x, y, z)
    half_sizes: np.ndarray  # (3,)
    intensity: float


@dataclass
class BlobSpec:
    center: np.ndarray  # (3,)
    sigma_px: float
    amplitude: float


@dataclass
class ObjectSpec:
    parts: list[PartSpec]
    blobs: list[BlobSpec]


def _class_rng(seed: int, class_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 101, class_id]))


def _view_rng(seed: int, class_id: int, day_night: int, view_idx: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, 211, class_id, day_night, view_idx])
    )


def build_object_spec(seed: int, class_id: int) -> ObjectSpec:
    """Sample the fixed part/blob arrangement for one class."""
    rng = _class_rng(seed, class_id)
    parts: list[PartSpec] = []

    # hull: every object gets a long central body
    body_half = np.array(
        [rng.uniform(0.45, 0.62), rng.uniform(0.15, 0.24), rng.uniform(0.18, 0.3)]
    )
    body_top = rng.uniform(-0.02, 0.1)
    parts.append(
        PartSpec(
            kind="box" if rng.random() < 0.7 else "ellipsoid",
            center=np.array([0.0, body_top + body_half[1], 0.0]),
            half_sizes=body_half,
            intensity=rng.uniform(0.55, 0.75),
        )
    )
    # cab, always offset toward +x so 0 and 180 degree views differ
    cab_half = np.array(
        [rng.uniform(0.12, 0.22), rng.uniform(0.1, 0.2), rng.uniform(0.1, 0.2)]
    )
    parts.append(
        PartSpec(
            kind="ellipsoid" if rng.random() < 0.5 else "box",
            center=np.array([rng.uniform(0.15, 0.34), body_top - cab_half[1] + 0.02, 0.0]),
            half_sizes=cab_half,
            intensity=rng.uniform(0.75, 0.95),
        )
    )
    # 1 to 4 accessory parts, shapes and placements fixed per class
    for _ in range(int(rng.integers(1, 5))):
        style = rng.choice(["barrel", "block", "skirt"])
        if style == "barrel":
            half = np.array([rng.uniform(0.2, 0.35), 0.035, 0.035])
            center = np.array(
                [rng.uniform(0.4, 0.6) * rng.choice([1.0, -1.0]), body_top - rng.uniform(0.0, 0.1), 0.0]
            )
        elif style == "block":
            half = rng.uniform(0.06, 0.16, size=3)
            center = np.array(
                [rng.uniform(-0.5, 0.5), body_top + rng.uniform(-0.15, 0.2), rng.uniform(-0.15, 0.15)]
            )
        else:  # skirt: low wide strip near the ground line
            half = np.array([rng.uniform(0.3, 0.5), rng.uniform(0.04, 0.08), rng.uniform(0.15, 0.25)])
            center = np.array([rng.uniform(-0.1, 0.1), body_top + 2 * body_half[1] - half[1], 0.0])
        parts.append(
            PartSpec(
                kind="box" if rng.random() < 0.6 else "ellipsoid",
                center=center,
                half_sizes=half,
                intensity=rng.uniform(0.5, 1.0),
            )
        )

    blobs = []
    for _ in range(int(rng.integers(2, 5))):
        blobs.append(
            BlobSpec(
                center=np.array(
                    [rng.uniform(-0.55, 0.55), body_top + rng.uniform(0.0, 0.3), rng.uniform(-0.2, 0.2)]
                ),
                sigma_px=rng.uniform(1.4, 3.2),
                amplitude=rng.uniform(0.3, 0.6),
            )
        )
    return ObjectSpec(parts=parts, blobs=blobs)


def _upsample_bilinear(coarse: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample of a small square grid to size x size."""
    n = coarse.shape[0]
    pos = np.linspace(0, n - 1, size)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    rows = coarse[lo][:, lo] * np.outer(1 - frac, 1 - frac)
    rows += coarse[lo][:, hi] * np.outer(1 - frac, frac)
    rows += coarse[hi][:, lo] * np.outer(frac, 1 - frac)
    rows += coarse[hi][:, hi] * np.outer(frac, frac)
    return rows


def render_view(
    spec: ObjectSpec,
    azimuth_deg: float,
    day_night: int,
    noise_rng: np.random.Generator,
    image_size: int = IMAGE_SIZE,
) -> np.ndarray:
    """Render one uint8 view of the object at the given azimuth and regime."""
    theta = np.radians(azimuth_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    scale = image_size * 0.38
    cx = cy = (image_size - 1) / 2.0

    vv, uu = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    objmap = np.zeros((image_size, image_size))

    # far-to-near paint order so near parts occlude far ones
    projected = []
    for part in spec.parts:
        x, y, z = part.center
        u = (x * cos_t + z * sin_t) * scale + cx
        depth = -x * sin_t + z * cos_t
        v = y * scale + cy
        sx, sy, sz = part.half_sizes
        if part.kind == "box":
            half_u = (abs(sx * cos_t) + abs(sz * sin_t)) * scale
        else:
            half_u = np.sqrt((sx * cos_t) ** 2 + (sz * sin_t) ** 2) * scale
        half_v = sy * scale
        # mild depth shading gives a view-dependent cue on symmetric parts
        shade = part.intensity * (1.0 - 0.15 * np.clip(depth, -1, 1))
        projected.append((depth, u, v, half_u, half_v, part.kind, shade))
    projected.sort(key=lambda item: -item[0])
    for depth, u, v, half_u, half_v, kind, shade in projected:
        if kind == "box":
            mask = (np.abs(uu - u) <= half_u) & (np.abs(vv - v) <= half_v)
        else:
            mask = ((uu - u) / max(half_u, 1e-6)) ** 2 + (
                (vv - v) / max(half_v, 1e-6)
            ) ** 2 <= 1.0
        objmap[mask] = shade

    heat = np.zeros_like(objmap)
    for blob in spec.blobs:
        x, y, z = blob.center
        u = (x * cos_t + z * sin_t) * scale + cx
        v = y * scale + cy
        depth = -x * sin_t + z * cos_t
        amp = blob.amplitude * (1.0 if depth >= 0 else 0.4)
        heat += amp * np.exp(-((uu - u) ** 2 + (vv - v) ** 2) / (2 * blob.sigma_px**2))

    params = _REGIME_PARAMS[day_night]
    clutter = _upsample_bilinear(noise_rng.normal(0.0, 1.0, size=(8, 8)), image_size)
    pixel_noise = noise_rng.normal(0.0, params["noise"], size=objmap.shape)

    frame = params["background"] + params["clutter"] * clutter
    frame = frame + params["object_gain"] * (objmap + heat) + pixel_noise
    return np.round(np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8)


def synth_generate(
    n_classes: int,
    views_per_circle: int,
    regimes: int,
    seed: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Render the full corpus to ``out_dir`` and write its manifest.

    Produces n_classes * views_per_circle * regimes PNG files; the same seed
    yields bit-identical rasters.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if views_per_circle <= 0 or 360 % views_per_circle != 0:
        raise ValueError(f"views_per_circle={views_per_circle} must divide 360")
    if regimes not in (1, 2):
        raise ValueError(f"regimes must be 1 or 2, got {regimes}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    step = 360.0 / views_per_circle

    records: list[ManifestRecord] = []
    for class_id in range(n_classes):
        spec = build_object_spec(seed, class_id)
        class_dir = out_dir / f"class{class_id:02d}"
        class_dir.mkdir(exist_ok=True)
        for day_night in range(regimes):
            for view_idx in range(views_per_circle):
                azimuth = view_idx * step
                rng = _view_rng(seed, class_id, day_night, view_idx)
                raster = render_view(spec, azimuth, day_night, rng)
                name = f"az{int(round(azimuth * 10)):04d}_{'n' if day_night else 'd'}.png"
                Image.fromarray(raster, mode="L").save(class_dir / name)
                records.append(
                    ManifestRecord(
                        path=f"{class_dir.name}/{name}",
                        class_id=class_id,
                        azimuth_deg=azimuth,
                        day_night=day_night,
                        range_m=DEFAULT_RANGE_M,
                    )
                )

    manifest = DatasetManifest(
        records=records,
        angular_step_deg=step,
        root=out_dir,
        meta={
            "generator": "irview-synth",
            "seed": str(seed),
            "classes": str(n_classes),
            "views_per_circle": str(views_per_circle),
            "regimes": str(regimes),
        },
    )
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest
