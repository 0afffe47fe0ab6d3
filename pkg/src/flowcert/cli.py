"""Command-line surface.

Subcommands: synth, extract-flow, verify, attack, certify, brightness,
scaling. Every command is deterministic given its flags and seed; traces use
a logical clock by default so repeated runs produce byte-identical CSVs
(switch to --clock real for human timing).

Exit codes for verify/attack/certify: 0 completed, 1 malformed input,
2 adversarial found, 3 certified safe at the requested radius.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from flowcert import netrt
from flowcert.bounds import (
    AdmissibleAStar,
    SearchBudget,
    _Clock,
    admissible_astar,
    verify_anytime,
)
from flowcert.flow import flow_sequence
from flowcert.game import Game, GameConfig, format_instruction
from flowcert.perturb import grid_width, tau_bound, tau_from_width
from flowcert.synth import CLASSES, SynthSpec, generate_dataset
from flowcert.tensors import NormKind, read_video, write_vten

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "norm",
        "radius",
        "tau",
        "epsilon",
        "kappa",
        "seed",
        "original_class",
        "class_name",
        "upper_bound",
        "lower_bound",
        "lb_exact",
        "msr_interval",
        "witness",
        "exit_code",
    ],
    "properties": {
        "norm": {"enum": ["l1", "l2", "linf"]},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "tau_source": {"enum": ["flag", "auto"]},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "kappa": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "flow_mask": {"type": ["array", "null"], "items": {"type": "integer"}},
        "original_class": {"type": "integer", "minimum": 0},
        "class_name": {"type": "string"},
        "upper_bound": {"type": "number"},
        "lower_bound": {"type": "number"},
        "lb_exact": {"type": "boolean"},
        "msr_interval": {
            "type": "object",
            "required": ["lower", "upper"],
            "properties": {"lower": {"type": "number"}, "upper": {"type": "number"}},
        },
        "witness": {"type": ["string", "null"]},
        "witness_distance": {"type": ["number", "null"]},
        "exit_code": {"type": "integer"},
        "ub_iterations": {"type": "integer"},
        "lb_expansions": {"type": "integer"},
        "elapsed_ms": {"type": "integer"},
    },
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", required=True, help="NNWF weight file")
    p.add_argument("--video", required=True, help="rank-4 VTEN clip")
    p.add_argument("--norm", choices=["l1", "l2", "linf"], default="l2")
    p.add_argument("--radius", type=float, required=True, help="flow-space ball radius")
    p.add_argument("--tau", type=float, default=None, help="manipulation magnitude")
    p.add_argument("--auto-tau", action="store_true", help="derive tau from the certified margin width")
    p.add_argument("--epsilon", type=float, default=None, help="fallback increment (default 1e-6 * radius)")
    p.add_argument("--kappa", type=float, default=1.0, help="input-to-flow width conversion factor")
    p.add_argument("--ub-iters", type=int, default=200, help="upper-search expansion budget")
    p.add_argument("--lb-nodes", type=int, default=200, help="lower-search expansion budget")
    p.add_argument("--wall-ms", type=int, default=None, help="wall-clock budget (real clock only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=8, help="upper-search branching width")
    p.add_argument("--flow-mask", default=None, help="comma-separated manipulable flow indices")
    p.add_argument("--clock", choices=["logical", "real"], default="logical")
    p.add_argument("--out", default=None, help="trace CSV path")
    p.add_argument("--report", default=None, help="report JSON path")


def _parse_mask(text: str | None) -> tuple[int, ...] | None:
    if text is None:
        return None
    parts = [p for p in text.strip().split(",") if p != ""]
    if not parts:
        raise ValueError("no manipulable flows")
    return tuple(int(p) for p in parts)


def _build_game(args) -> tuple[Game, float, str]:
    net = netrt.load_weights(args.weights)
    video = read_video(args.video)
    norm = NormKind.parse(args.norm)
    mask = _parse_mask(args.flow_mask)
    if args.auto_tau:
        width = tau_bound(net, video.data, norm)
        if width <= 0:
            raise ValueError("auto tau is zero: the input sits on a decision boundary")
        steps = video.frames - 1
        dim_count = 2 * video.height * video.width * (len(mask) if mask else steps)
        tau = tau_from_width(width, norm, dim_count, args.kappa)
        tau_source = "auto"
    elif args.tau is not None:
        tau, tau_source = args.tau, "flag"
    else:
        raise ValueError("either --tau or --auto-tau is required")
    cfg = GameConfig(
        network=net,
        video=video.data,
        norm=norm,
        radius=args.radius,
        tau=tau,
        epsilon=args.epsilon,
        flow_mask=mask,
    )
    return Game(cfg), tau, tau_source


def _budget(args) -> SearchBudget:
    return SearchBudget(
        max_iterations=args.ub_iters, max_nodes=args.lb_nodes, max_wall_ms=args.wall_ms, seed=args.seed
    )


def _write_report(args, game, tau, tau_source, result, exit_code, extra=None) -> dict:
    cfg = game.cfg
    report = {
        "norm": cfg.norm.value,
        "radius": cfg.radius,
        "tau": tau,
        "tau_source": tau_source,
        "epsilon": cfg.epsilon,
        "kappa": args.kappa,
        "seed": args.seed,
        "flow_mask": list(cfg.flow_mask) if cfg.flow_mask else None,
        "original_class": game.original_class,
        "class_name": cfg.network.classes[game.original_class],
        "upper_bound": result["upper_bound"],
        "lower_bound": result["lower_bound"],
        "lb_exact": result["lb_exact"],
        "msr_interval": result["msr_interval"],
        "witness": result["witness"],
        "witness_distance": result["witness_distance"],
        "exit_code": exit_code,
        "ub_iterations": result.get("ub_iterations", 0),
        "lb_expansions": result.get("lb_expansions", 0),
        "elapsed_ms": result.get("elapsed_ms", 0),
    }
    if extra:
        report.update(extra)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        classes=tuple(args.classes.split(",")) if args.classes else CLASSES,
        frames=args.frames,
        height=args.height,
        width=args.width,
        channels=args.channels,
        object_sigma=args.sigma,
        speed=args.speed,
        noise=args.noise,
        samples_per_class=args.count,
        seed=args.seed,
        margin=args.margin,
    )
    manifest = generate_dataset(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def cmd_extract_flow(args) -> int:
    video = read_video(args.video)
    flows = flow_sequence(video)
    write_vten(args.out, flows)
    print(f"wrote {args.out} with shape {flows.shape}")
    return 0


def cmd_verify(args) -> int:
    start = time.monotonic()
    game, tau, tau_source = _build_game(args)
    res = verify_anytime(game, _budget(args), top_k=args.top_k, clock_mode=args.clock)
    res.trace.validate()
    if args.out:
        res.trace.to_csv(Path(args.out))
    if res.witness is not None:
        exit_code = 2
    elif res.lb_exact and res.lower_bound >= game.cfg.fallback:
        exit_code = 3
    else:
        exit_code = 0
    _write_report(
        args,
        game,
        tau,
        tau_source,
        {
            "upper_bound": res.upper_bound,
            "lower_bound": res.lower_bound,
            "lb_exact": res.lb_exact,
            "msr_interval": {"lower": res.msr_lower, "upper": res.msr_upper},
            "witness": format_instruction(res.witness) if res.witness else None,
            "witness_distance": res.witness.distance(game.cfg.norm, tau) if res.witness else None,
            "elapsed_ms": int((time.monotonic() - start) * 1000),
        },
        exit_code,
    )
    print(f"upper bound {res.upper_bound:.9g}, lower bound {res.lower_bound:.9g}")
    return exit_code


def cmd_attack(args) -> int:
    from flowcert.bounds import upper_bound_search

    start = time.monotonic()
    game, tau, tau_source = _build_game(args)
    trace, witness = upper_bound_search(game, _budget(args), top_k=args.top_k, clock_mode=args.clock)
    if args.out:
        trace.to_csv(Path(args.out))
    ub = trace.values("UB")[-1]
    exit_code = 2 if witness is not None else 0
    _write_report(
        args,
        game,
        tau,
        tau_source,
        {
            "upper_bound": ub,
            "lower_bound": 0.0,
            "lb_exact": False,
            "msr_interval": {"lower": 0.0, "upper": ub},
            "witness": format_instruction(witness) if witness else None,
            "witness_distance": witness.distance(game.cfg.norm, tau) if witness else None,
            "elapsed_ms": int((time.monotonic() - start) * 1000),
        },
        exit_code,
    )
    print(f"upper bound {ub:.9g}" + ("" if witness is None else " (adversarial found)"))
    return exit_code


def cmd_certify(args) -> int:
    start = time.monotonic()
    game, tau, tau_source = _build_game(args)
    trace, lb = admissible_astar(game, _budget(args), clock_mode=args.clock)
    if args.out:
        trace.to_csv(Path(args.out))
    search_exact = trace.values("LB") and lb >= game.cfg.fallback
    exit_code = 3 if search_exact else 0
    width = grid_width(game.cfg.norm, tau, len(game.cfg.dims))
    _write_report(
        args,
        game,
        tau,
        tau_source,
        {
            "upper_bound": game.cfg.fallback,
            "lower_bound": lb,
            "lb_exact": bool(search_exact),
            "msr_interval": {"lower": max(0.0, lb - width / 2), "upper": game.cfg.fallback},
            "witness": None,
            "witness_distance": None,
            "elapsed_ms": int((time.monotonic() - start) * 1000),
        },
        exit_code,
    )
    print(f"certified lower bound {lb:.9g}")
    return exit_code


def cmd_brightness(args) -> int:
    game, tau, _ = _build_game(args)
    cfg = game.cfg
    norm = cfg.norm
    _, lb_flow = admissible_astar(game, _budget(args), clock_mode=args.clock)
    lb_input = args.kappa * lb_flow
    base_flows = cfg.flows
    rows = []
    for k in range(args.steps + 1):
        shifted = cfg.video + k * tau
        clamped = bool(shifted.max() > 1.0)
        bright = np.clip(shifted, 0.0, 1.0)
        dist = {
            NormKind.L1: float(np.abs(bright - cfg.video).sum()),
            NormKind.L2: float(np.sqrt(((bright - cfg.video) ** 2).sum())),
            NormKind.LINF: float(np.abs(bright - cfg.video).max()),
        }[norm]
        cls = int(netrt.classify_batch(cfg.network, bright[None])[0])
        deviation = float(np.abs(flow_sequence(bright) - base_flows).max())
        rows.append(
            {
                "step": k,
                "input_distance": f"{dist:.9g}",
                "class_index": cls,
                "class_name": cfg.network.classes[cls],
                "class_changed": int(cls != game.original_class),
                "within_certified_lb": int(dist <= lb_input),
                "flow_deviation": f"{deviation:.9g}",
                "clamped": int(clamped),
                "lb_flow": f"{lb_flow:.9g}",
                "lb_input": f"{lb_input:.9g}",
            }
        )
    out = args.out or "brightness.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out}")
    return 0


def cmd_scaling(args) -> int:
    masks = []
    for group in args.masks.split(";"):
        masks.append(_parse_mask(group))
    net = netrt.load_weights(args.weights)
    video = read_video(args.video)
    norm = NormKind.parse(args.norm)
    if args.tau is None:
        raise ValueError("scaling requires --tau")
    rows = []
    for mask in masks:
        cfg = GameConfig(
            network=net,
            video=video.data,
            norm=norm,
            radius=args.radius,
            tau=args.tau,
            epsilon=args.epsilon,
            flow_mask=mask,
        )
        game = Game(cfg)
        clock = _Clock(args.clock)
        search = AdmissibleAStar(game, _budget(args), clock=clock)
        while not search.step(64):
            pass
        label = ",".join(str(t) for t in mask)
        for e in search.trace.entries:
            rows.append([label, e.iteration, e.wall_ms, f"{e.value:.9g}", e.nodes_expanded])
    out = args.out or "scaling.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask", "iteration", "wall_ms", "value", "nodes_expanded"])
        writer.writerows(rows)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic moving-shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=None, help="comma-separated class subset")
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--sigma", type=float, default=2.5)
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--margin", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-flow", help="extract the flow sequence of a clip")
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_flow)

    for name, fn, help_text in [
        ("verify", cmd_verify, "interleaved upper and lower bound search"),
        ("attack", cmd_attack, "upper bound search only"),
        ("certify", cmd_certify, "lower bound search only"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("brightness", help="frame-level brightness distortion sweep")
    _add_run_flags(p)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_brightness)

    p = sub.add_parser("scaling", help="lower-bound traces for several flow masks")
    _add_run_flags(p)
    p.add_argument("--masks", required=True, help="semicolon-separated comma lists, e.g. '0;1;0,1'")
    p.set_defaults(func=cmd_scaling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; 2 means "adversarial" here
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
