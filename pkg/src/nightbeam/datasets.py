"""Scene datasets: manifest format and record loading.

A dataset is a JSON manifest plus per-scene rasters.  The manifest
carries relative paths, so a dataset directory can be moved or shipped
wholesale.  Images may be PNG or the raw float container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .images import Annotation, ScenePair
from .io import read_image, read_raw
from .photometry import CameraModel


@dataclass(frozen=True)
class SceneRecord:
    i_full: str
    i_off: str
    depth: str | None = None
    seg_mask: str | None = None
    annotations: tuple[Annotation, ...] = ()


@dataclass
class Dataset:
    root: Path
    split: str
    records: list[SceneRecord]
    camera: CameraModel | None = None
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def load_pair(self, index: int) -> ScenePair:
        rec = self.records[index]
        i_full = read_image(self.root / rec.i_full)
        i_off = read_image(self.root / rec.i_off)
        depth = None
        if rec.depth is not None:
            depth = read_raw(self.root / rec.depth)[:, :, 0]
        return ScenePair(i_full=i_full, i_off=i_off, depth=depth, annotations=rec.annotations)

    def load_seg_mask(self, index: int) -> np.ndarray | None:
        rec = self.records[index]
        if rec.seg_mask is None:
            return None
        import cv2

        mask = cv2.imread(str(self.root / rec.seg_mask), cv2.IMREAD_UNCHANGED)
        if mask is None:
            raise ConfigError(f"missing segmentation mask {rec.seg_mask}")
        return mask.astype(np.int64)


def _annotation_to_json(a: Annotation) -> dict:
    out = {"cls": a.cls, "box": list(a.box)}
    if a.distance is not None:
        out["distance"] = a.distance
    return out


def _annotation_from_json(d: dict) -> Annotation:
    return Annotation(cls=int(d["cls"]), box=tuple(d["box"]), distance=d.get("distance"))


def write_manifest(dataset: Dataset, path=None) -> Path:
    path = Path(path) if path else dataset.root / "manifest.json"
    doc = {
        "split": dataset.split,
        "num_classes": dataset.num_classes,
        "meta": dataset.meta,
        "camera": None
        if dataset.camera is None
        else {
            "fx": dataset.camera.fx,
            "fy": dataset.camera.fy,
            "cx": dataset.camera.cx,
            "cy": dataset.camera.cy,
            "width": dataset.camera.width,
            "height": dataset.camera.height,
        },
        "records": [
            {
                "i_full": r.i_full,
                "i_off": r.i_off,
                "depth": r.depth,
                "seg_mask": r.seg_mask,
                "annotations": [_annotation_to_json(a) for a in r.annotations],
            }
            for r in dataset.records
        ],
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")
    return path


def read_manifest(path) -> Dataset:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    cam = CameraModel(**doc["camera"]) if doc.get("camera") else None
    records = [
        SceneRecord(
            i_full=r["i_full"],
            i_off=r["i_off"],
            depth=r.get("depth"),
            seg_mask=r.get("seg_mask"),
            annotations=tuple(_annotation_from_json(a) for a in r.get("annotations", [])),
        )
        for r in doc["records"]
    ]
    ds = Dataset(
        root=path.parent,
        split=doc.get("split", "test"),
        records=records,
        camera=cam,
        num_classes=int(doc.get("num_classes", 0)),
        meta=doc.get("meta", {}),
    )
    for rec in ds.records:
        if not (ds.root / rec.i_full).exists() or not (ds.root / rec.i_off).exists():
            raise ConfigError(f"dataset record points at missing files: {rec.i_full}, {rec.i_off}")
    return ds
