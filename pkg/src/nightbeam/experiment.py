"""Experiment orchestration: run field-producing methods over a dataset,
relight, score with the proxy heads, and reduce to a metrics table.

Scenes are independent work units; reduction is associative and applied
in scene order, so reports are bit-identical for any worker count.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .detector import DetectorParams, SegmenterParams, detect, segment
from .errors import ConfigError, ScorerError
from .external import ExternalScorerClient
from .images import LightField, ScenePair, relight
from .io import read_field
from .metrics import (
    BandMetrics,
    confusion_matrix,
    detection_metrics,
    distance_banded,
    power_of,
    seg_metrics_from_confusion,
)
from .photometry import default_rig, project_beam
from .policy import (
    BaselineContext,
    baseline_field,
    optimize_blackbox,
    optimize_gradient,
)
from .scoring import ScorerSpec, ScorerStack

METHOD_KINDS = (
    "uniform",
    "no_ego",
    "low_beam",
    "high_beam",
    "static",
    "stored",
    "gradient",
    "blackbox",
)


@dataclass(frozen=True)
class MethodSpec:
    """One field source evaluated at one power level."""

    name: str
    kind: str
    power: float = 1.0
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}")
        if self.power < 0:
            raise ConfigError(f"power must be nonnegative, got {self.power}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    bands: tuple = (0.0, 20.0, 60.0, 70.0)
    scorer_kinds: tuple = ("contrast_proxy",)
    external_endpoint: str | None = None
    external_tasks: tuple = ("detection",)
    timeout_ms: float | None = None
    steps: int = 40
    step_size: float = 0.25
    blackbox_iterations: int = 120
    block_size: int = 8
    detector: DetectorParams = dc_field(default_factory=DetectorParams)
    segmenter: SegmenterParams = dc_field(default_factory=SegmenterParams)
    mount_below_camera_m: float = 0.45
    eval_segmentation: bool = True


@dataclass
class MetricsReport:
    """Pooled evaluation of one method at one power level."""

    spec: MethodSpec
    power_measured: float
    precision: float
    recall: float
    map50: float
    map50_90: float
    miou: float | None
    macc: float | None
    bands: list[BandMetrics]
    n_scenes: int
    errors: list[tuple[int, str]]
    timing_ms: float
    per_scene_power: list[float]
    per_scene_detections: list[int]


@dataclass
class ExperimentReport:
    seed: int
    bands: tuple
    methods: list[MetricsReport]

    def to_dict(self, include_timing: bool = False) -> dict:
        rows = []
        for r in self.methods:
            row = {
                "method": r.spec.name,
                "kind": r.spec.kind,
                "power_target": r.spec.power,
                "power_measured": r.power_measured,
                "precision": r.precision,
                "recall": r.recall,
                "map50": r.map50,
                "map50_90": r.map50_90,
                "miou": r.miou,
                "macc": r.macc,
                "bands": [
                    {
                        "lo": b.lo,
                        "hi": None if b.hi == float("inf") else b.hi,
                        "map50": b.map50,
                        "tp": b.tp,
                        "fp": b.fp,
                        "fn": b.fn,
                        "n_gt": b.n_gt,
                    }
                    for b in r.bands
                ],
                "n_scenes": r.n_scenes,
                "errors": [{"scene": i, "reason": msg} for i, msg in r.errors],
                "per_scene": [
                    {"scene": i, "power": p, "detections": n}
                    for i, (p, n) in enumerate(zip(r.per_scene_power, r.per_scene_detections))
                ],
            }
            if include_timing:
                row["timing_ms"] = r.timing_ms
            rows.append(row)
        return {"schema": "nightbeam-report@1", "seed": self.seed, "bands": list(self.bands), "methods": rows}

    def to_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2), encoding="utf-8"
        )

    def to_csv(self, path) -> None:
        cols = [
            "method", "power_target", "power_measured", "precision", "recall",
            "map50", "map50_90", "miou", "macc",
        ]
        band_labels = [f"map50_band_{i}" for i in range(len(self.bands) + 1)]
        lines = [",".join(cols + band_labels)]
        for r in self.methods:
            vals = [
                r.spec.name, f"{r.spec.power:g}", f"{r.power_measured:.6f}",
                f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.map50:.6f}", f"{r.map50_90:.6f}",
                "" if r.miou is None else f"{r.miou:.6f}",
                "" if r.macc is None else f"{r.macc:.6f}",
            ]
            vals += ["" if b.map50 is None else f"{b.map50:.6f}" for b in r.bands]
            lines.append(",".join(vals))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def render_table(self) -> str:
        header = f"{'Method':<22} {'Power':>6} {'P':>7} {'R':>7} {'mAP50':>7} {'mAP50-90':>9} {'mIoU':>7} {'mAcc':>7}"
        lines = [header, "-" * len(header)]
        for r in self.methods:
            miou = "-" if r.miou is None else f"{r.miou:.3f}"
            macc = "-" if r.macc is None else f"{r.macc:.3f}"
            lines.append(
                f"{r.spec.name:<22} {r.power_measured:>6.2f} {r.precision:>7.3f} {r.recall:>7.3f} "
                f"{r.map50:>7.3f} {r.map50_90:>9.3f} {miou:>7} {macc:>7}"
            )
        return "\n".join(lines)


class _StackFactory:
    """Per-thread scorer stacks; external connections are never shared."""

    def __init__(self, cfg: ExperimentConfig, kinds):
        self.cfg = cfg
        self.kinds = tuple(kinds)
        self._local = threading.local()
        self._clients = []
        self._lock = threading.Lock()

    def get(self) -> ScorerStack:
        stack = getattr(self._local, "stack", None)
        if stack is None:
            client = None
            if "external" in self.kinds:
                if not self.cfg.external_endpoint:
                    raise ConfigError("external scorer requested but no endpoint configured")
                client = ExternalScorerClient(
                    self.cfg.external_endpoint,
                    tasks=self.cfg.external_tasks,
                    timeout_ms=self.cfg.timeout_ms,
                )
                with self._lock:
                    self._clients.append(client)
            stack = ScorerStack([ScorerSpec(k) for k in self.kinds], external_client=client)
            self._local.stack = stack
        return stack

    def close(self):
        with self._lock:
            for c in self._clients:
                c.close()
            self._clients.clear()


def scene_budget(power: float, m_lb: LightField) -> float:
    """Target mean intensity for a power level relative to low beam."""
    ref = float(m_lb.data.mean(dtype=np.float64))
    if ref <= 0:
        raise ConfigError("low-beam reference field carries no power on this scene")
    return min(1.0, power * ref)


def _spawn_seed(seed: int, method_idx: int, scene_idx: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(method_idx, scene_idx)).generate_state(1)[0])


def run_experiment(dataset: Dataset, methods, cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """Evaluate every method over every scene and pool the metrics.

    A scorer or endpoint failure on one scene records the reason for
    that cell and drops the scene from that method's pool; it never
    aborts the run.
    """
    cfg = cfg or ExperimentConfig()
    if dataset.camera is None:
        raise ConfigError("dataset manifest carries no camera model; power-relative evaluation needs one")
    cam = dataset.camera
    _, hl_lb, hl_hb = default_rig(cfg.mount_below_camera_m)
    n = len(dataset)

    results = []
    for method_idx, spec in enumerate(methods):
        factory = _StackFactory(cfg, spec.params.get("scorer_kinds", cfg.scorer_kinds))
        started = time.perf_counter()

        def eval_scene(i: int, spec=spec, method_idx=method_idx, factory=factory):
            pair = dataset.load_pair(i)
            if pair.depth is None:
                raise ConfigError(f"scene {i} has no depth; cannot reference the low beam")
            m_lb = project_beam(cam, hl_lb, pair.depth)
            eta = scene_budget(spec.power, m_lb)
            try:
                m = _resolve_field(spec, pair, i, eta, m_lb, hl_hb, cam, cfg, factory, method_idx)
            except ScorerError as exc:
                return {"error": str(exc)}
            img = relight(pair, m)
            dets = detect(img, cfg.detector)
            cm = None
            if cfg.eval_segmentation:
                seg_gt = dataset.load_seg_mask(i)
                if seg_gt is not None:
                    cm = confusion_matrix(segment(img, cfg.segmenter), seg_gt, dataset.num_classes)
            return {
                "detections": dets,
                "gts": list(pair.annotations),
                "power": power_of(m, m_lb),
                "confusion": cm,
            }

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                scene_outputs = list(pool.map(eval_scene, range(n)))
        else:
            scene_outputs = [eval_scene(i) for i in range(n)]
        factory.close()

        errors = [(i, out["error"]) for i, out in enumerate(scene_outputs) if "error" in out]
        kept = [(i, out) for i, out in enumerate(scene_outputs) if "error" not in out]
        preds = [out["detections"] for _, out in kept]
        gts = [out["gts"] for _, out in kept]
        det = detection_metrics(preds, gts)
        have_distances = all(g.distance is not None for scene in gts for g in scene)
        bands = distance_banded(preds, gts, cfg.bands) if have_distances else []
        cms = [out["confusion"] for _, out in kept if out["confusion"] is not None]
        miou = macc = None
        if cms:
            miou, macc = seg_metrics_from_confusion(np.sum(cms, axis=0))
        powers = [out["power"] for _, out in kept]
        results.append(
            MetricsReport(
                spec=spec,
                power_measured=float(np.mean(powers)) if powers else 0.0,
                precision=det.precision,
                recall=det.recall,
                map50=det.map50,
                map50_90=det.map50_90,
                miou=miou,
                macc=macc,
                bands=bands,
                n_scenes=len(kept),
                errors=errors,
                timing_ms=(time.perf_counter() - started) * 1000.0,
                per_scene_power=powers,
                per_scene_detections=[len(p) for p in preds],
            )
        )
    return ExperimentReport(seed=cfg.seed, bands=tuple(cfg.bands), methods=results)


def _resolve_field(
    spec: MethodSpec,
    pair: ScenePair,
    scene_idx: int,
    eta: float,
    m_lb: LightField,
    hl_hb,
    cam,
    cfg: ExperimentConfig,
    factory: _StackFactory,
    method_idx: int,
) -> LightField:
    ctx = BaselineContext(
        height=pair.height,
        width=pair.width,
        budget=eta,
        depth=pair.depth,
        cam=cam,
        hl_low=None,
        hl_high=hl_hb,
        fields=spec.params.get("fields"),
    )
    if spec.kind == "uniform":
        return baseline_field("uniform", ctx)
    if spec.kind == "no_ego":
        return baseline_field("no_ego", ctx)
    if spec.kind == "low_beam":
        return m_lb
    if spec.kind == "high_beam":
        return baseline_field("high_beam", ctx)
    if spec.kind == "static":
        return baseline_field("static", ctx)
    if spec.kind == "stored":
        directory = spec.params.get("dir")
        if not directory:
            raise ConfigError(f"method {spec.name!r} needs params['dir']")
        return read_field(Path(directory) / f"scene_{scene_idx:04d}.lidf")
    if spec.kind == "gradient":
        stack = factory.get()
        if not stack.differentiable:
            raise ConfigError("gradient method needs a differentiable scorer stack")
        return optimize_gradient(
            pair, stack, eta=eta, steps=cfg.steps, step_size=cfg.step_size
        ).field
    if spec.kind == "blackbox":
        stack = factory.get()
        return optimize_blackbox(
            pair,
            stack,
            eta=eta,
            iterations=cfg.blackbox_iterations,
            block_size=cfg.block_size,
            rng_seed=_spawn_seed(cfg.seed, method_idx, scene_idx),
        ).field
    raise ConfigError(f"unhandled method kind {spec.kind!r}")
