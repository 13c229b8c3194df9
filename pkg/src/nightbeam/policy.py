"""Illumination control loop: initialization, residual updates, budget
enforcement and scheduling, sequential refinement, built-in optimizers,
and the reference baselines.

The loop contract: a policy sees the latest observation, the previous
field, and coordinate channels, and emits a raw residual in [-1, 1].
The engine clamps the updated field to the valid range and renormalizes
it to the energy budget before the next step.  No gradients or other
state flow between steps; each step treats the observed image and field
as constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .errors import BudgetError, ConfigError, NumericalError, PolicyError
from .images import Image, LightField, ScenePair, relight, relight_gradient
from .io import write_raw
from .scoring import ScoreReport


@dataclass(frozen=True)
class BudgetSchedule:
    """Linear budget ramp: eta(e) = eta_final * (alpha + (1-alpha) e / e_max)."""

    eta_final: float
    alpha: float = 0.1
    e_max: int = 60

    def __post_init__(self):
        if not (0.0 < self.eta_final <= 1.0):
            raise BudgetError(f"eta_final must be in (0, 1], got {self.eta_final}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.e_max < 1:
            raise ConfigError(f"e_max must be >= 1, got {self.e_max}")


@dataclass(frozen=True)
class RefinementConfig:
    n_steps: int = 40
    k_scored: int = 5
    epsilon: float = 1e-6
    latency_frames: int = 1

    def __post_init__(self):
        if not (1 <= self.k_scored <= self.n_steps):
            raise ConfigError(
                f"k_scored must satisfy 1 <= k <= n_steps, got {self.k_scored}/{self.n_steps}"
            )
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.latency_frames < 0:
            raise ConfigError(f"latency_frames must be >= 0, got {self.latency_frames}")


@dataclass(frozen=True)
class PolicyInput:
    """What a policy observes: current image, previous field, coord channels."""

    image: Image
    prev_field: LightField
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float32)
        if c.shape != (self.image.height, self.image.width, 2):
            raise ConfigError(f"coords must be (H, W, 2), got {c.shape}")
        object.__setattr__(self, "coords", c)


class Policy(Protocol):
    def __call__(self, inp: PolicyInput) -> np.ndarray: ...


def coord_channels(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) position channels in [0, 1]^2, shape (H, W, 2)."""
    x = np.linspace(0.0, 1.0, width, dtype=np.float32) if width > 1 else np.zeros(1, np.float32)
    y = np.linspace(0.0, 1.0, height, dtype=np.float32) if height > 1 else np.zeros(1, np.float32)
    return np.stack(np.meshgrid(x, y), axis=-1)


def init_field(
    height: int,
    width: int,
    budget: float,
    black_prob: float = 0.5,
    block_range: tuple[int, int] = (20, 80),
    rng_seed: int = 0,
) -> LightField:
    """Randomized starting field: blockwise-constant noise rescaled to the
    budget, or (with probability `black_prob`) a fully black field."""
    if budget > 1.0 or budget < 0.0:
        raise BudgetError(f"budget {budget} outside [0, 1]")
    lo, hi = int(block_range[0]), int(block_range[1])
    if lo < 1 or lo > hi:
        raise ConfigError(f"invalid block range [{lo}, {hi}]")
    if not (0.0 <= black_prob <= 1.0):
        raise ConfigError(f"black_prob {black_prob} outside [0, 1]")
    rng = np.random.default_rng(rng_seed)
    if rng.random() < black_prob:
        return LightField.zeros(height, width)
    side = int(rng.integers(lo, hi + 1))
    blocks = rng.random((math.ceil(height / side), math.ceil(width / side)))
    fld = np.repeat(np.repeat(blocks, side, axis=0), side, axis=1)[:height, :width]
    mean = fld.mean()
    if mean > 0:
        fld = fld * (budget / mean)
    return LightField(np.clip(fld, 0.0, 1.0).astype(np.float32))


def residual_update(prev: LightField, delta: np.ndarray) -> LightField:
    """Apply a raw residual and project elementwise onto [0, 1]."""
    d = np.asarray(delta, dtype=np.float64)
    if d.shape != prev.data.shape:
        raise PolicyError(f"residual shape {d.shape} does not match field {prev.data.shape}")
    out = np.clip(prev.data.astype(np.float64) + d, 0.0, 1.0)
    return LightField(out.astype(np.float32))


@dataclass(frozen=True)
class BudgetResult:
    field: LightField
    clipped: bool


def normalize_budget(m: LightField, eta: float, epsilon: float = 1e-6) -> BudgetResult:
    """Rescale a field to mean intensity eta, then clip to [0, 1].

    A near-zero field passes through (the epsilon guard); if clipping
    triggered, the achieved mean falls short of eta and the flag reports
    it.
    """
    if not (0.0 < eta <= 1.0):
        raise BudgetError(f"eta must be in (0, 1], got {eta}")
    if epsilon <= 0:
        raise BudgetError(f"epsilon must be positive, got {epsilon}")
    data = m.data.astype(np.float64)
    scale = eta / max(epsilon, float(data.mean()))
    scaled = data * scale
    clipped = bool(np.any(scaled > 1.0))
    out = np.clip(scaled, 0.0, 1.0)
    return BudgetResult(LightField(out.astype(np.float32)), clipped)


def cap_budget(m: LightField, eta: float, epsilon: float = 1e-6) -> LightField:
    """Enforce the budget as an upper bound: scale down iff mean > eta.

    Unlike `normalize_budget` this never adds light, so an optimizer may
    settle below the budget when extra light hurts the score.
    """
    if not (0.0 < eta <= 1.0):
        raise BudgetError(f"eta must be in (0, 1], got {eta}")
    mean = float(m.data.mean(dtype=np.float64))
    if mean <= eta:
        return m
    scale = eta / max(epsilon, mean)
    return LightField((m.data.astype(np.float64) * scale).astype(np.float32))


def scheduled_eta(s: BudgetSchedule, epoch: float) -> float:
    """Budget target for a training epoch along the linear ramp."""
    if not (0 <= epoch <= s.e_max):
        raise ConfigError(f"epoch {epoch} outside [0, {s.e_max}]")
    return s.eta_final * (s.alpha + (1.0 - s.alpha) * epoch / s.e_max)


@dataclass(frozen=True)
class RefineStep:
    t: int
    field: LightField
    image: Image
    report: ScoreReport | None
    clipped: bool


def refine(
    pair: ScenePair,
    policy: Policy,
    cfg: RefinementConfig,
    eta: float,
    init: LightField,
    scorer: Callable[[Image], ScoreReport] | None = None,
    seed: int = 0,
) -> list[RefineStep]:
    """Unroll the closed loop on one scene for n_steps.

    Each step relights with the current field, lets the policy observe
    the (latency-delayed) image, applies the residual, and renormalizes
    to the budget.  Scores are recorded at step 0 plus k_scored - 1
    further steps sampled without replacement from the remaining steps.
    """
    if (init.height, init.width) != (pair.height, pair.width):
        raise PolicyError("init field does not match scene dimensions")
    rng = np.random.default_rng(seed)
    scored = {0}
    if cfg.k_scored > 1 and cfg.n_steps > 1:
        extra = rng.choice(np.arange(1, cfg.n_steps), size=cfg.k_scored - 1, replace=False)
        scored.update(int(t) for t in extra)

    coords = coord_channels(pair.height, pair.width)
    entry = normalize_budget(init, eta, cfg.epsilon)
    m = entry.field
    clipped = entry.clipped
    images: list[Image] = []
    steps: list[RefineStep] = []

    for t in range(cfg.n_steps):
        img = relight(pair, m)
        images.append(img)
        report = None
        if scorer is not None and t in scored:
            report = scorer(img)
        steps.append(RefineStep(t=t, field=m, image=img, report=report, clipped=clipped))
        if t == cfg.n_steps - 1:
            break
        obs = images[max(0, t - cfg.latency_frames)]
        delta = np.asarray(policy(PolicyInput(obs, m, coords)), dtype=np.float64)
        if delta.shape != (pair.height, pair.width):
            raise PolicyError(f"policy produced shape {delta.shape}, scene is {pair.height}x{pair.width}")
        if np.max(np.abs(delta)) > 1.0 + 1e-6:
            raise PolicyError("policy residual escapes [-1, 1]")
        res = normalize_budget(residual_update(m, delta), eta, cfg.epsilon)
        m = res.field
        clipped = res.clipped
    return steps


@dataclass
class GradientStepPolicy:
    """One projected-ascent step per call, driven by a differentiable
    scorer.  Stands in for a learned residual network."""

    pair: ScenePair
    scorer: object  # ScorerStack-like: .score(image, annotations) -> (report, grad)
    step_size: float = 0.15

    def __call__(self, inp: PolicyInput) -> np.ndarray:
        _, grad = self.scorer.score(inp.image, self.pair.annotations)
        if grad is None:
            raise PolicyError("gradient policy needs a differentiable scorer")
        g = relight_gradient(self.pair, grad)
        peak = float(np.max(np.abs(g)))
        if not math.isfinite(peak):
            raise NumericalError("non-finite policy gradient")
        if peak <= 0.0:
            return np.zeros_like(g)
        return np.clip(self.step_size * g / peak, -1.0, 1.0)


@dataclass(frozen=True)
class OptimizeResult:
    """Final field plus the accepted-move score history."""

    field: LightField
    scores: tuple[float, ...]

    @property
    def best_score(self) -> float:
        return self.scores[-1]


def _stack_score(scorer, pair, m, need_grad):
    img = relight(pair, m)
    report, grad = scorer.score(img, pair.annotations)
    if need_grad and grad is None:
        raise ConfigError("optimizer requires a differentiable scorer stack")
    return report.total, grad


def optimize_gradient(
    pair: ScenePair,
    scorer,
    eta: float,
    steps: int = 60,
    step_size: float = 0.25,
    epsilon: float = 1e-6,
    init: LightField | None = None,
) -> OptimizeResult:
    """Projected gradient ascent on the scored relit image.

    Fixed step along the normalized field gradient, budget projection
    (upper-bound cap) after every step, step halving on non-improvement.
    Returns the best-scoring field visited, never worse than the
    initialization.
    """
    if init is None:
        init = LightField.full(pair.height, pair.width, eta)
    m = cap_budget(init, eta, epsilon)
    score, grad = _stack_score(scorer, pair, m, need_grad=True)
    best_m, best_score = m, score
    history = [score]
    lr = step_size

    for _ in range(steps):
        g = relight_gradient(pair, grad)
        peak = float(np.max(np.abs(g)))
        if not math.isfinite(peak):
            raise NumericalError("non-finite score gradient")
        if peak <= 0.0:
            break
        stepped = np.clip(m.data.astype(np.float64) + lr * g / peak, 0.0, 1.0)
        cand = cap_budget(LightField(stepped.astype(np.float32)), eta, epsilon)
        cand_score, cand_grad = _stack_score(scorer, pair, cand, need_grad=True)
        if cand_score > score:
            m, score, grad = cand, cand_score, cand_grad
            history.append(score)
            if score > best_score:
                best_m, best_score = m, score
        else:
            lr *= 0.5
            if lr < 1e-4:
                break
    return OptimizeResult(field=best_m, scores=tuple(history))


def optimize_blackbox(
    pair: ScenePair,
    scorer,
    eta: float,
    iterations: int = 300,
    block_size: int = 8,
    magnitude: float = 0.1,
    rng_seed: int = 0,
    epsilon: float = 1e-6,
    init: LightField | None = None,
) -> OptimizeResult:
    """Blockwise simultaneous-perturbation ascent for opaque scorers.

    Each iteration draws a Rademacher sign per block, tries the +/-
    perturbations, and keeps an improving move if there is one; the
    field is renormalized to the budget after every proposal.  Fully
    deterministic for a fixed seed.
    """
    if block_size < 1:
        raise ConfigError(f"block_size must be >= 1, got {block_size}")
    if init is None:
        init = LightField.full(pair.height, pair.width, eta)
    m = normalize_budget(init, eta, epsilon).field
    score, _ = _stack_score(scorer, pair, m, need_grad=False)
    history = [score]
    rng = np.random.default_rng(rng_seed)
    h, w = pair.height, pair.width
    nbh, nbw = math.ceil(h / block_size), math.ceil(w / block_size)

    for _ in range(iterations):
        signs = rng.choice(np.array([-1.0, 1.0]), size=(nbh, nbw))
        delta = np.repeat(np.repeat(signs, block_size, 0), block_size, 1)[:h, :w] * magnitude
        best_cand, best_cand_score = None, score
        for sgn in (1.0, -1.0):
            stepped = np.clip(m.data.astype(np.float64) + sgn * delta, 0.0, 1.0)
            cand = normalize_budget(LightField(stepped.astype(np.float32)), eta, epsilon).field
            cand_score, _ = _stack_score(scorer, pair, cand, need_grad=False)
            if cand_score > best_cand_score:
                best_cand, best_cand_score = cand, cand_score
        if best_cand is not None:
            m, score = best_cand, best_cand_score
            history.append(score)
    return OptimizeResult(field=m, scores=tuple(history))


@dataclass
class BaselineContext:
    """Everything the reference baselines may need; all fields optional,
    missing pieces raise ConfigError at use."""

    height: int
    width: int
    budget: float | None = None
    depth: np.ndarray | None = None
    cam: object | None = None
    hl_low: object | None = None
    hl_high: object | None = None
    fields: list[LightField] | None = dc_field(default=None)


BASELINE_KINDS = ("uniform", "no_ego", "low_beam", "high_beam", "static")


def baseline_field(kind: str, ctx: BaselineContext) -> LightField:
    """Reference illumination patterns.

    uniform spreads the budget evenly; no_ego removes ego light
    entirely; low_beam/high_beam project the respective beam tables
    through the scene geometry; static renormalizes the pixelwise mean
    of a field collection to the budget.
    """
    from .photometry import project_beam

    if kind == "uniform":
        if ctx.budget is None:
            raise ConfigError("uniform baseline needs a budget")
        return LightField.full(ctx.height, ctx.width, float(np.float32(ctx.budget)))
    if kind == "no_ego":
        return LightField.zeros(ctx.height, ctx.width)
    if kind in ("low_beam", "high_beam"):
        hl = ctx.hl_low if kind == "low_beam" else ctx.hl_high
        if ctx.depth is None or ctx.cam is None or hl is None:
            raise ConfigError(f"{kind} baseline needs depth, camera, and headlight models")
        return project_beam(ctx.cam, hl, ctx.depth)
    if kind == "static":
        if not ctx.fields:
            raise ConfigError("static baseline needs a field collection")
        if ctx.budget is None:
            raise ConfigError("static baseline needs a budget")
        stack = np.stack([f.data for f in ctx.fields]).astype(np.float64)
        mean_field = LightField(stack.mean(axis=0).astype(np.float32))
        return normalize_budget(mean_field, ctx.budget).field
    raise ConfigError(f"unknown baseline kind {kind!r}")


def dump_trajectory(out_dir, steps: list[RefineStep], seed: int, cfg: RefinementConfig, eta: float) -> None:
    """Write one episode: per-step field and image rasters plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_steps = []
    for s in steps:
        m_name = f"m_{s.t:04d}.lidf"
        i_name = f"i_{s.t:04d}.lidf"
        write_raw(out / m_name, s.field.data)
        write_raw(out / i_name, s.image.data)
        manifest_steps.append(
            {
                "t": s.t,
                "m": m_name,
                "image": i_name,
                "clipped": s.clipped,
                "scores": dict(s.report.scores) if s.report else None,
                "total": s.report.total if s.report else None,
            }
        )
    manifest = {
        "seed": seed,
        "eta": eta,
        "config": {
            "n_steps": cfg.n_steps,
            "k_scored": cfg.k_scored,
            "epsilon": cfg.epsilon,
            "latency_frames": cfg.latency_frames,
        },
        "steps": manifest_steps,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
