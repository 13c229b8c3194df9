"""Procedural nighttime scene generator.

Renders small co-registered (fully lit, unlit) scene pairs on a flat
road: ambient light is nearly absent, rectangular objects with
class-specific albedo stand on the ground plane, and the lit render
applies a beam gain that decays with distance.  Every scene carries a
depth map, a semantic mask, and box annotations with distances, so the
corpus supports the full evaluation stack at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .datasets import Dataset, SceneRecord, write_manifest
from .errors import ConfigError
from .images import Annotation, Image
from .io import write_image_png, write_raw
from .photometry import CameraModel

# class palette: albedo chromaticity per class (person, vehicle, cyclist)
CLASS_ALBEDO = np.array(
    [
        [1.00, 0.62, 0.45],
        [0.50, 0.62, 1.00],
        [0.55, 1.00, 0.55],
    ]
)
CLASS_SIZES_M = ((0.55, 1.75), (1.85, 1.50), (0.70, 1.80))
ROAD_ALBEDO = np.array([0.22, 0.22, 0.25])
SKY_ALBEDO = np.array([0.015, 0.02, 0.035])
EMISSIVE_COLOR = np.array([1.0, 0.95, 0.8])
NUM_CLASSES = len(CLASS_ALBEDO) + 1  # background label 0


@dataclass(frozen=True)
class ToyParams:
    width: int = 160
    height: int = 96
    focal_px: float = 140.0
    horizon_frac: float = 0.45
    camera_height_m: float = 1.4
    ambient_range: tuple[float, float] = (0.0, 0.05)
    objects_range: tuple[int, int] = (1, 4)
    near_distance_range: tuple[float, float] = (10.0, 45.0)
    far_distance_range: tuple[float, float] = (45.0, 75.0)
    far_fraction: float = 0.3
    lateral_range_m: float = 6.0
    gain_half_distance_m: float = 25.0
    albedo_magnitude_range: tuple[float, float] = (0.45, 0.85)
    road_patches: int = 5
    emissive_prob: float = 0.5
    albedo_noise: float = 0.02
    min_box_side_px: float = 2.5

    def camera(self) -> CameraModel:
        return CameraModel(
            fx=self.focal_px,
            fy=self.focal_px,
            cx=self.width / 2.0,
            cy=self.height * self.horizon_frac,
            width=self.width,
            height=self.height,
        )


def beam_gain(depth: np.ndarray, half_distance: float) -> np.ndarray:
    """Relative max-power illumination reaching a surface at `depth`."""
    d = np.asarray(depth, dtype=np.float64)
    g = 1.0 / (1.0 + (d / half_distance) ** 2)
    return np.where(d > 0, g, 0.0)


def _ground_depth(params: ToyParams) -> np.ndarray:
    cam = params.camera()
    v = np.arange(params.height, dtype=np.float64) + 0.5
    below = v - cam.cy
    with np.errstate(divide="ignore"):
        d = np.where(below > 0, cam.fy * params.camera_height_m / np.maximum(below, 1e-9), 0.0)
    d = np.clip(d, 0.0, 400.0)
    return np.repeat(d[:, None], params.width, axis=1)


def _render_scene(params: ToyParams, rng: np.random.Generator):
    h, w = params.height, params.width
    cam = params.camera()
    ambient = rng.uniform(*params.ambient_range)

    albedo = np.empty((h, w, 3))
    horizon = int(round(cam.cy))
    albedo[:horizon] = SKY_ALBEDO
    albedo[horizon:] = ROAD_ALBEDO * rng.uniform(0.85, 1.15)
    for _ in range(rng.integers(0, params.road_patches + 1)):
        pw, ph = rng.integers(8, 40), rng.integers(3, 12)
        r0 = rng.integers(horizon, max(horizon + 1, h - ph))
        c0 = rng.integers(0, max(1, w - pw))
        albedo[r0 : r0 + ph, c0 : c0 + pw] *= rng.uniform(0.7, 1.4)

    depth = _ground_depth(params)
    owner = np.full((h, w), -1, dtype=np.int64)
    semantic = np.zeros((h, w), dtype=np.uint8)

    # sample objects, paint far to near so nearer ones occlude
    n_objects = int(rng.integers(params.objects_range[0], params.objects_range[1] + 1))
    drafts = []
    for _ in range(n_objects):
        if rng.random() < params.far_fraction:
            d = rng.uniform(*params.far_distance_range)
        else:
            d = rng.uniform(*params.near_distance_range)
        cls = int(rng.integers(0, len(CLASS_ALBEDO)))
        drafts.append((d, cls, rng.uniform(-params.lateral_range_m, params.lateral_range_m),
                       rng.uniform(*params.albedo_magnitude_range)))
    drafts.sort(key=lambda t: -t[0])

    objects = []
    for idx, (d, cls, x_m, mag) in enumerate(drafts):
        w_m, h_m = CLASS_SIZES_M[cls]
        u_c = cam.cx + cam.fx * x_m / d
        v_b = cam.cy + cam.fy * params.camera_height_m / d
        bw = cam.fx * w_m / d
        bh = cam.fy * h_m / d
        x1, x2 = u_c - bw / 2, u_c + bw / 2
        y1, y2 = v_b - bh, v_b
        if bw < params.min_box_side_px or bh < params.min_box_side_px:
            continue
        cx1, cy1 = max(0.0, x1), max(0.0, y1)
        cx2, cy2 = min(float(w), x2), min(float(h), y2)
        if cx2 - cx1 < params.min_box_side_px or cy2 - cy1 < params.min_box_side_px:
            continue
        r0, r1 = int(math.floor(cy1)), int(math.ceil(cy2))
        c0, c1 = int(math.floor(cx1)), int(math.ceil(cx2))
        albedo[r0:r1, c0:c1] = CLASS_ALBEDO[cls] * mag
        depth[r0:r1, c0:c1] = d
        owner[r0:r1, c0:c1] = idx
        semantic[r0:r1, c0:c1] = cls + 1
        objects.append((idx, cls, d, (r1 - r0) * (c1 - c0)))

    annotations = []
    for idx, cls, d, nominal_area in objects:
        visible = owner == idx
        count = int(visible.sum())
        if count < 6 or count < 0.4 * nominal_area:
            continue
        rows, cols = np.nonzero(visible)
        box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
        annotations.append(Annotation(cls=cls, box=box, distance=float(d), mask=visible))

    emissive = np.zeros((h, w, 3))
    if rng.random() < params.emissive_prob:
        for _ in range(int(rng.integers(1, 3))):
            ec = rng.integers(0, w)
            er = rng.integers(max(0, horizon - 4), min(h, horizon + 10))
            radius = int(rng.integers(1, 4))
            strength = rng.uniform(0.3, 0.9)
            rr, cc = np.ogrid[:h, :w]
            disc = (rr - er) ** 2 + (cc - ec) ** 2 <= radius**2
            emissive[disc] = EMISSIVE_COLOR * strength

    albedo = np.clip(albedo + rng.uniform(-params.albedo_noise, params.albedo_noise, (h, w, 3)), 0.0, 1.0)
    gain = beam_gain(depth, params.gain_half_distance_m)[:, :, None]
    i_off = np.clip(ambient * albedo + emissive, 0.0, 1.0).astype(np.float32)
    i_full = np.clip((ambient + gain) * albedo + emissive, 0.0, 1.0).astype(np.float32)

    return Image(i_full), Image(i_off), depth.astype(np.float32), semantic, tuple(annotations)


def generate_toy_corpus(
    count: int,
    seed: int,
    params: ToyParams | None = None,
    out_dir=None,
    split: str = "test",
) -> Dataset:
    """Render `count` scenes deterministically and write them under
    `out_dir` with a manifest."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    params = params or ToyParams()
    if out_dir is None:
        raise ConfigError("out_dir is required")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        i_full, i_off, depth, semantic, annotations = _render_scene(params, rng)
        scene_dir = root / f"scene_{i:04d}"
        scene_dir.mkdir(exist_ok=True)
        write_image_png(scene_dir / "full.png", i_full, bit_depth=16)
        write_image_png(scene_dir / "off.png", i_off, bit_depth=16)
        write_raw(scene_dir / "depth.lidf", depth)
        cv2.imwrite(str(scene_dir / "semantic.png"), semantic)
        records.append(
            SceneRecord(
                i_full=f"scene_{i:04d}/full.png",
                i_off=f"scene_{i:04d}/off.png",
                depth=f"scene_{i:04d}/depth.lidf",
                seg_mask=f"scene_{i:04d}/semantic.png",
                annotations=tuple(
                    Annotation(cls=a.cls, box=a.box, distance=a.distance) for a in annotations
                ),
            )
        )

    dataset = Dataset(
        root=root,
        split=split,
        records=records,
        camera=params.camera(),
        num_classes=NUM_CLASSES,
        meta={"seed": seed, "generator": "toy", "count": count},
    )
    write_manifest(dataset)
    return dataset
