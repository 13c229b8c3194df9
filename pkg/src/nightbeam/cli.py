"""Command-line interface.

Subcommands: synth-gen, optimize, baseline, eval, warp-calib, report.
All seeded commands are deterministic: running one twice with the same
arguments produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import read_manifest
from .errors import ConfigError
from .experiment import ExperimentConfig, MethodSpec, run_experiment
from .external import ExternalScorerClient, resolve_timeout_ms
from .io import write_field
from .photometry import build_warp, default_rig, project_beam, read_calibration, write_warp
from .policy import (
    BaselineContext,
    GradientStepPolicy,
    RefinementConfig,
    baseline_field,
    dump_trajectory,
    init_field,
    optimize_blackbox,
    refine,
)
from .scoring import ScorerSpec, ScorerStack
from .toygen import ToyParams, generate_toy_corpus

SCORER_CHOICES = ("contrast", "exposure", "contrast+exposure", "external")


def _scorer_kinds(name: str) -> tuple[str, ...]:
    return {
        "contrast": ("contrast_proxy",),
        "exposure": ("exposure_proxy",),
        "contrast+exposure": ("contrast_proxy", "exposure_proxy"),
        "external": ("external",),
    }[name]


def _add_common_scorer_flags(p):
    p.add_argument("--scorer", choices=SCORER_CHOICES, default="contrast")
    p.add_argument("--scorer-endpoint", default=None,
                   help="external scorer endpoint: exec:<command> or tcp:<host>:<port>")


def cmd_synth_gen(args) -> int:
    params = ToyParams(width=args.width, height=args.height)
    ds = generate_toy_corpus(args.count, seed=args.seed, params=params, out_dir=args.out, split=args.split)
    print(f"wrote {len(ds)} scenes to {ds.root}")
    return 0


def _make_stack(args):
    kinds = _scorer_kinds(args.scorer)
    client = None
    if "external" in kinds:
        if not args.scorer_endpoint:
            raise ConfigError("--scorer external needs --scorer-endpoint")
        client = ExternalScorerClient(
            args.scorer_endpoint, timeout_ms=resolve_timeout_ms(None)
        )
    return ScorerStack([ScorerSpec(k) for k in kinds], external_client=client), client


def cmd_optimize(args) -> int:
    ds = read_manifest(args.dataset)
    out = Path(args.out)
    fields_dir = out / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    cam = ds.camera
    _, hl_lb, _ = default_rig()
    stack, client = _make_stack(args)
    opaque = not stack.differentiable

    scenes = []
    try:
        for i in range(len(ds)):
            pair = ds.load_pair(i)
            if pair.depth is None:
                raise ConfigError(f"scene {i} has no depth map; cannot set a power-relative budget")
            m_lb = project_beam(cam, hl_lb, pair.depth)
            eta = min(1.0, args.budget * float(m_lb.data.mean(dtype=np.float64)))
            seed_i = int(np.random.SeedSequence(entropy=args.seed, spawn_key=(i,)).generate_state(1)[0])
            if opaque:
                res = optimize_blackbox(
                    pair, stack, eta=eta, iterations=args.steps,
                    block_size=args.block_size, rng_seed=seed_i,
                )
                final = res.field
                scores = list(res.scores)
                clipped_flags = None
            else:
                policy = GradientStepPolicy(pair, stack, step_size=args.step_size)
                cfg = RefinementConfig(n_steps=args.steps, k_scored=min(args.scored_steps, args.steps))
                init = init_field(pair.height, pair.width, eta, rng_seed=seed_i)
                steps = refine(
                    pair, policy, cfg, eta=eta, init=init,
                    scorer=lambda img, pair=pair: stack.score(img, pair.annotations)[0],
                    seed=seed_i,
                )
                final = steps[-1].field
                scores = [s.report.total for s in steps if s.report is not None]
                clipped_flags = [s.clipped for s in steps]
                if args.dump_trajectories:
                    dump_trajectory(out / "episodes" / f"scene_{i:04d}", steps, seed=seed_i, cfg=cfg, eta=eta)
            write_field(fields_dir / f"scene_{i:04d}.lidf", final)
            scenes.append(
                {
                    "scene": i,
                    "eta": eta,
                    "seed": seed_i,
                    "scores": scores,
                    "clipped": clipped_flags,
                    "power": float(final.data.mean(dtype=np.float64) / m_lb.data.mean(dtype=np.float64)),
                }
            )
    finally:
        if client is not None:
            client.close()

    manifest = {
        "dataset": str(Path(args.dataset).resolve()),
        "budget": args.budget,
        "scorer": args.scorer,
        "steps": args.steps,
        "scored_steps": args.scored_steps,
        "seed": args.seed,
        "mode": "blackbox" if opaque else "closed_loop_gradient",
        "scenes": scenes,
    }
    (out / "optimize.json").write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
    print(f"optimized {len(scenes)} scenes -> {fields_dir}")
    return 0


def cmd_baseline(args) -> int:
    ds = read_manifest(args.dataset)
    out = Path(args.out)
    fields_dir = out / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    cam = ds.camera
    _, hl_lb, hl_hb = default_rig()

    static_fields = None
    if args.kind == "static":
        if not args.fields:
            raise ConfigError("static baseline needs --fields with per-scene .lidf files")
        from .io import read_field

        src = sorted(Path(args.fields).glob("*.lidf"))
        if not src:
            raise ConfigError(f"no .lidf fields under {args.fields}")
        static_fields = [read_field(p) for p in src]

    scenes = []
    for i in range(len(ds)):
        pair = ds.load_pair(i)
        if pair.depth is None:
            raise ConfigError(f"scene {i} has no depth map")
        m_lb = project_beam(cam, hl_lb, pair.depth)
        eta = min(1.0, args.budget * float(m_lb.data.mean(dtype=np.float64)))
        ctx = BaselineContext(
            height=pair.height, width=pair.width, budget=eta,
            depth=pair.depth, cam=cam, hl_low=hl_lb, hl_high=hl_hb, fields=static_fields,
        )
        m = baseline_field(args.kind, ctx)
        write_field(fields_dir / f"scene_{i:04d}.lidf", m)
        scenes.append({"scene": i, "eta": eta, "power": float(m.data.mean(dtype=np.float64) / m_lb.data.mean(dtype=np.float64))})
    (out / "baseline.json").write_text(
        json.dumps({"kind": args.kind, "budget": args.budget, "scenes": scenes}, sort_keys=True, indent=2),
        encoding="utf-8",
    )
    print(f"wrote {len(scenes)} {args.kind} fields -> {fields_dir}")
    return 0


def _parse_method(text: str) -> MethodSpec:
    if ":" in text:
        kind, power = text.rsplit(":", 1)
        return MethodSpec(name=f"{kind}@{power}", kind=kind, power=float(power))
    return MethodSpec(name=text, kind=text, power=1.0)


def cmd_eval(args) -> int:
    ds = read_manifest(args.dataset)
    methods = [_parse_method(m) for m in args.method or []]
    for entry in args.fields or []:
        if "=" not in entry:
            raise ConfigError(f"--fields wants name=DIR, got {entry!r}")
        name, directory = entry.split("=", 1)
        methods.append(MethodSpec(name=name, kind="stored", params={"dir": directory}))
    if not methods:
        raise ConfigError("nothing to evaluate: pass --method and/or --fields")

    bands = tuple(float(b) for b in args.bands.split(",")) if args.bands else (0.0, 20.0, 60.0, 70.0)
    cfg = ExperimentConfig(
        seed=args.seed,
        workers=args.workers,
        bands=bands,
        scorer_kinds=_scorer_kinds(args.scorer),
        external_endpoint=args.scorer_endpoint,
        timeout_ms=resolve_timeout_ms(None),
        steps=args.steps,
    )
    report = run_experiment(ds, methods, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    print(report.render_table())
    return 0


def cmd_warp_calib(args) -> int:
    cam, hl, plane = read_calibration(args.calib)
    warp = build_warp(cam, hl, plane)
    write_warp(args.out, warp)
    valid = float(warp.valid.mean())
    print(f"warp {warp.coords.shape[1]}x{warp.coords.shape[0]} written, {valid:.1%} valid")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("schema") != "nightbeam-report@1":
            raise ConfigError(f"{path} is not a metrics report")
        rows.extend(doc["methods"])
    cols = ["method", "power_measured", "precision", "recall", "map50", "map50_90", "miou", "macc"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(
            ",".join(
                ""
                if r.get(c) is None
                else (f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]))
                for c in cols
            )
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    header = f"{'Method':<22} {'Power':>6} {'P':>7} {'R':>7} {'mAP50':>7} {'mAP50-90':>9} {'mIoU':>7} {'mAcc':>7}"
    print(header)
    print("-" * len(header))
    for r in rows:
        miou = "-" if r.get("miou") is None else f"{r['miou']:.3f}"
        macc = "-" if r.get("macc") is None else f"{r['macc']:.3f}"
        print(
            f"{r['method']:<22} {r['power_measured']:>6.2f} {r['precision']:>7.3f} {r['recall']:>7.3f} "
            f"{r['map50']:>7.3f} {r['map50_90']:>9.3f} {miou:>7} {macc:>7}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nightbeam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic toy corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("optimize", help="optimize per-scene light fields")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=float, default=1.0, help="power relative to low beam")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--scored-steps", type=int, default=5)
    p.add_argument("--step-size", type=float, default=0.15)
    p.add_argument("--block-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-trajectories", action="store_true")
    _add_common_scorer_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("baseline", help="produce baseline fields")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", required=True, choices=("uniform", "no_ego", "low_beam", "high_beam", "static"))
    p.add_argument("--budget", type=float, default=1.0)
    p.add_argument("--fields", default=None, help="field dir for the static baseline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="evaluate methods over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", action="append", help="kind or kind:power, repeatable")
    p.add_argument("--fields", action="append", help="name=DIR of stored fields, repeatable")
    p.add_argument("--bands", default=None, help="comma-separated band edges, e.g. 0,20,60,70")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--out", required=True)
    _add_common_scorer_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-calib", help="build the camera-to-headlight warp")
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp_calib)

    p = sub.add_parser("report", help="merge metrics reports into a table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
