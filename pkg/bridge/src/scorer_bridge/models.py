"""Optional wrappers around real frozen perception models.

These are deliberately lazy: importing this module never pulls in
torch.  A wrapper loads its weights from a local file; there is no
network download path, so a missing weights file is a load failure the
CLI turns into an error message and a nonzero exit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ModelLoadError(RuntimeError):
    """The requested model is unavailable in this environment."""


class TorchvisionDetector:
    """Frozen torchvision detection model; score is mean confidence of
    detections above threshold (higher is better)."""

    tasks = ("detection",)

    def __init__(self, arch: str, weights_path: str, device: str = "cpu", conf_threshold: float = 0.25):
        try:
            import torch
            import torchvision.models.detection as det_models
        except ImportError as exc:
            raise ModelLoadError(f"torch/torchvision unavailable: {exc}") from exc
        if not hasattr(det_models, arch):
            raise ModelLoadError(f"unknown torchvision detection arch {arch!r}")
        if not Path(weights_path).is_file():
            raise ModelLoadError(f"weights file not found: {weights_path}")
        self.torch = torch
        self.conf_threshold = conf_threshold
        self.device = device
        self.model = getattr(det_models, arch)(weights=None, weights_backbone=None)
        state = torch.load(weights_path, map_location=device, weights_only=True)
        self.model.load_state_dict(state)
        self.model.eval().to(device)

    def score_image(self, rgb: np.ndarray, tasks):
        torch = self.torch
        with torch.no_grad():
            tensor = torch.from_numpy(rgb.transpose(2, 0, 1)).float().to(self.device)
            out = self.model([tensor])[0]
        keep = out["scores"] >= self.conf_threshold
        confs = out["scores"][keep].cpu().numpy()
        boxes = out["boxes"][keep].cpu().numpy()
        labels = out["labels"][keep].cpu().numpy()
        score = float(confs.mean()) if confs.size else 0.0
        detections = [
            {"cls": int(c), "box": [float(v) for v in b], "conf": float(min(1.0, s))}
            for c, b, s in zip(labels, boxes, confs)
        ]
        return {"detection": score}, detections, None


class TorchvisionSegmenter:
    """Frozen torchvision semantic segmentation model; score is mean
    max-softmax confidence over pixels."""

    tasks = ("segmentation",)

    def __init__(self, arch: str, weights_path: str, device: str = "cpu"):
        try:
            import torch
            import torchvision.models.segmentation as seg_models
        except ImportError as exc:
            raise ModelLoadError(f"torch/torchvision unavailable: {exc}") from exc
        if not hasattr(seg_models, arch):
            raise ModelLoadError(f"unknown torchvision segmentation arch {arch!r}")
        if not Path(weights_path).is_file():
            raise ModelLoadError(f"weights file not found: {weights_path}")
        self.torch = torch
        self.device = device
        self.model = getattr(seg_models, arch)(weights=None, weights_backbone=None)
        state = torch.load(weights_path, map_location=device, weights_only=True)
        self.model.load_state_dict(state)
        self.model.eval().to(device)

    def score_image(self, rgb: np.ndarray, tasks):
        torch = self.torch
        with torch.no_grad():
            tensor = torch.from_numpy(rgb.transpose(2, 0, 1)).float().unsqueeze(0).to(self.device)
            logits = self.model(tensor)["out"][0]
            conf = torch.softmax(logits, dim=0).max(dim=0).values
        return {"segmentation": float(conf.mean().item())}, None, None


class CompositeModel:
    """Routes each task to its wrapper; used when both heads are enabled."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.tasks = tuple(t for p in self.parts for t in p.tasks)

    def score_image(self, rgb: np.ndarray, tasks):
        scores, detections, mask_path = {}, None, None
        for part in self.parts:
            wanted = [t for t in tasks if t in part.tasks]
            if not wanted:
                continue
            s, d, m = part.score_image(rgb, wanted)
            scores.update(s)
            if d is not None:
                detections = d
            if m is not None:
                mask_path = m
        return scores, detections, mask_path


def load_model(detector: str | None, segmenter: str | None, device: str = "cpu"):
    """Build the model stack from CLI specs `arch:weights_path`."""

    def split(spec: str):
        if ":" not in spec:
            raise ModelLoadError(f"model spec needs arch:weights_path, got {spec!r}")
        arch, path = spec.split(":", 1)
        return arch, path

    parts = []
    if detector:
        arch, path = split(detector)
        parts.append(TorchvisionDetector(arch, path, device=device))
    if segmenter:
        arch, path = split(segmenter)
        parts.append(TorchvisionSegmenter(arch, path, device=device))
    if not parts:
        raise ModelLoadError("no model selected: pass --stub or --detector/--segmenter")
    return parts[0] if len(parts) == 1 else CompositeModel(parts)
