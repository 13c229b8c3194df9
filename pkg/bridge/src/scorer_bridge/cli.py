"""scorer-bridge launcher.

`scorer-bridge --stub` serves the deterministic stub model on stdio;
`--tcp <port>` listens on TCP instead (port 0 picks a free port,
announced on stderr).  Real model wrappers load frozen weights from
local files: `--detector arch:weights.pth --segmenter arch:weights.pth`.
"""

from __future__ import annotations

import argparse
import json
import sys


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorer-bridge", description=__doc__)
    p.add_argument("--stub", action="store_true", help="serve the deterministic stub model")
    p.add_argument("--detector", default=None, help="torchvision detector spec arch:weights_path")
    p.add_argument("--segmenter", default=None, help="torchvision segmenter spec arch:weights_path")
    p.add_argument("--tcp", type=int, default=None, metavar="PORT", help="listen on TCP instead of stdio")
    p.add_argument("--score", choices=("mean-confidence", "neg-loss"), default="mean-confidence")
    p.add_argument("--device", default="cpu")
    p.add_argument("--timeout-budget-ms", type=float, default=30000.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .server import BridgeConfig, serve_stdio, serve_tcp

    if args.stub:
        from .stub import StubModel

        model = StubModel()
    else:
        from .models import ModelLoadError, load_model

        if args.score == "neg-loss":
            print(
                json.dumps({"type": "error", "id": 0, "message": "neg-loss scoring needs a loss-exposing model; none wrapped yet"}),
                flush=True,
            )
            return 1
        try:
            model = load_model(args.detector, args.segmenter, device=args.device)
        except ModelLoadError as exc:
            print(json.dumps({"type": "error", "id": 0, "message": f"model load failure: {exc}"}), flush=True)
            return 1

    cfg = BridgeConfig(
        tasks=tuple(model.tasks),
        score_def=args.score,
        device=args.device,
        timeout_budget_ms=args.timeout_budget_ms,
    )
    try:
        if args.tcp is not None:
            serve_tcp(model, cfg, args.tcp, announce=lambda port: print(f"listening on {port}", file=sys.stderr, flush=True))
        else:
            serve_stdio(model, cfg)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
