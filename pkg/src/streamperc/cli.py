"""``streamperc`` command line.

Exit codes: 0 success, 1 usage error, 2 input or validation error,
3 numerical failure (for example ``gradcheck --assert`` above tolerance).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import experiments as ex
from .config import RunConfig, describe_keys, load_config
from .data import resample_speed, save_predictions, save_stream_dataset
from .forecast import NumericalError, log_to_csv, train_linear_forecaster
from .metrics import RESULT_COLUMNS, evaluate_ap, result_row, rows_to_csv
from .stream_sim import pair_for_sap, pair_offline, pairing_to_json, trace_to_json
from .trend_loss import TrendConfig, trend_weights
from .geometry import iou

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(cfg: RunConfig, name: str, text: str) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.6f}"


# ------------------------------------------------------------ subcommands

def cmd_generate(cfg: RunConfig, args) -> str:
    streams, _ = ex.build_streams(cfg, cfg.speed_factor)
    path = os.path.join(cfg.out, "dataset.json")
    os.makedirs(cfg.out, exist_ok=True)
    save_stream_dataset(streams, path)
    n_frames = sum(len(s.frames) for s in streams)
    n_boxes = sum(len(f.gt) for s in streams for f in s.frames)
    return f"generated {len(streams)} video(s), {n_frames} frames, {n_boxes} boxes -> {path}"


def _run_sim(cfg: RunConfig, model=None):
    streams, offline = ex.build_streams(cfg, cfg.speed_factor)
    run = ex.run_sap(streams, cfg.agent.name, cfg, cfg.latency_model(), offline, model)
    return streams, offline, run


def cmd_simulate(cfg: RunConfig, args) -> str:
    streams, offline, run = _run_sim(cfg)
    pair = pair_offline if offline else pair_for_sap
    traces, pairings, preds = [], {}, {}
    for s, tr in zip(streams, run.traces):
        traces.append(trace_to_json(tr))
        ps = pair(tr, s)
        pairings[s.video_id] = pairing_to_json(ps)
        for p in ps:
            preds[(s.video_id, p.frame_index)] = list(p.detections)
    _write(cfg, "trace.json", _dumps(traces))
    _write(cfg, "pairing.json", _dumps(pairings))
    save_predictions(preds, os.path.join(cfg.out, "predictions.json"))
    n_out = sum(len(t.records) for t in run.traces)
    n_frames = sum(len(s.frames) for s in streams)
    return f"simulated agent={cfg.agent.name}: {n_out} outputs over {n_frames} frames -> {cfg.out}"


def _result_files(cfg: RunConfig, streams, run, latency_s: float, name: str):
    params = cfg.ap_params()
    rows = [result_row(evaluate_ap(inst, params), s.video_id, latency_s, cfg.speed_factor)
            for s, inst in zip(streams, run.per_video)]
    rows.append(result_row(run.result, "ALL", latency_s, cfg.speed_factor))
    doc = {"agent": cfg.agent.name, "seed": cfg.global_seed, "rows": rows,
           "summary": run.result.as_dict()}
    _write(cfg, f"{name}.json", _dumps(doc))
    _write(cfg, f"{name}.csv", rows_to_csv(rows, RESULT_COLUMNS))


def cmd_eval_sap(cfg: RunConfig, args) -> str:
    streams, _, run = _run_sim(cfg)
    lat = cfg.latency_model()
    latency_s = lat.sample(0) if lat.kind == "constant" else float("nan")
    _result_files(cfg, streams, run, latency_s, "results")
    return (f"sAP={_fmt(run.result.ap)} AP50={_fmt(run.result.ap50)} agent={cfg.agent.name} "
            f"speed={cfg.speed_factor}x -> {os.path.join(cfg.out, 'results.json')}")


def cmd_eval_offline(cfg: RunConfig, args) -> str:
    streams, _ = ex.build_streams(cfg, cfg.speed_factor)
    run = ex.run_offline(streams, cfg.agent.name, cfg)
    _result_files(cfg, streams, run, 0.0, "offline_results")
    return (f"AP={_fmt(run.result.ap)} AP50={_fmt(run.result.ap50)} agent={cfg.agent.name} "
            f"-> {os.path.join(cfg.out, 'offline_results.json')}")


def cmd_triplets(cfg: RunConfig, args) -> str:
    streams, _ = ex.build_streams(cfg, 1)
    out = []
    for s in streams:
        for t in resample_speed(s, cfg.speed_factor):
            out.append({"video_id": s.video_id, "prev_index": t.prev.frame_index,
                        "cur_index": t.cur.frame_index, "target_index": t.target_index,
                        "n_target_boxes": len(t.target_gt)})
    _write(cfg, "triplets.json", _dumps(out))
    return f"{len(out)} triplets at {cfg.speed_factor}x -> {os.path.join(cfg.out, 'triplets.json')}"


def cmd_tal_weights(cfg: RunConfig, args) -> str:
    """Per-object trend weights; the regression loss is the IoU loss of a
    no-motion forecast (each target box predicted by its best current match)."""
    streams, _ = ex.build_streams(cfg, 1)
    tcfg = TrendConfig(float(cfg.tal.tau), float(cfg.tal.nu))
    lines = ["video_id,target_index,object,m_iou,omega,omega_hat,reg_loss"]
    selected = 0
    for s in streams:
        for k, t in enumerate(resample_speed(s, cfg.speed_factor)):
            if cfg.tal.triplet is not None and k != int(cfg.tal.triplet):
                continue
            selected += 1
            losses = [1.0 - max((iou(g.box, c.box) for c in t.cur.gt if c.category == g.category),
                                default=0.0) for g in t.target_gt]
            tw = trend_weights(t.target_gt, t.cur.gt, losses, tcfg)
            for i in range(tw.n):
                lines.append(f"{s.video_id},{t.target_index},{i},{float(tw.m_iou[i])!r},"
                             f"{float(tw.omega[i])!r},{float(tw.omega_hat[i])!r},{losses[i]!r}")
    if selected == 0:
        raise ValueError(f"triplet index {cfg.tal.triplet} out of range")
    text = "\n".join(lines) + "\n"
    _write(cfg, "tal_weights.csv", text)
    sys.stdout.write(text)
    return f"{len(lines) - 1} objects over {selected} triplet(s) -> {os.path.join(cfg.out, 'tal_weights.csv')}"


def _train(cfg: RunConfig):
    batch = ex.training_batch(cfg, "train")
    return train_linear_forecaster([], ex.train_config(cfg), batch=batch)


def cmd_train_forecaster(cfg: RunConfig, args) -> str:
    model, log = _train(cfg)
    if not np.all(np.isfinite([r.loss for r in log])):
        raise NumericalError("training loss became non-finite")
    meta = {"seed": cfg.global_seed, "epochs": int(cfg.train.epochs),
            "tal_enabled": bool(cfg.train.tal_enabled)}
    _write(cfg, "model.json", model.to_json(meta) + "\n")
    _write(cfg, "train_log.csv", log_to_csv(log))
    return (f"trained linear forecaster: loss {log[0].loss:.6f} -> {log[-1].loss:.6f} "
            f"-> {os.path.join(cfg.out, 'model.json')}")


def _wrong_gradient(real):
    def grad(*a, **kw):
        g = real(*a, **kw)
        if isinstance(g, np.ndarray):
            return 2.0 * g + 1.0
        return type(g)(2.0 * g.weight + 1.0, g.scale, g.shift)
    return grad


def cmd_gradcheck(cfg: RunConfig, args) -> str:
    g = cfg.gradcheck
    kw = {}
    if args.inject_wrong_gradient:
        from .dfp import dfp_fuse_grad
        from .forecast import weighted_l1_grad
        kw = {"forecaster_grad": _wrong_gradient(weighted_l1_grad),
              "dfp_grad": _wrong_gradient(dfp_fuse_grad)}
    res = ex.gradcheck_suite(int(g.seeds), float(g.step), **kw)
    res["tolerance"] = float(g.tolerance)
    res["passed"] = bool(max(res["max_forecaster"], res["max_dfp"]) < g.tolerance)
    _write(cfg, "gradcheck.json", _dumps(res))
    msg = (f"gradcheck max rel err forecaster={res['max_forecaster']:.3e} "
           f"dfp={res['max_dfp']:.3e} tol={g.tolerance:.0e} {'PASS' if res['passed'] else 'FAIL'}")
    if args.assert_ and not res["passed"]:
        raise NumericalError(msg)
    return msg


def cmd_compare(cfg: RunConfig, args) -> str:
    model = None
    if "linear-forecaster" in cfg.compare.agents and not cfg.agent.model:
        model, _ = _train(cfg)
    rows = ex.compare(cfg, model)
    cols = ex.compare_columns(cfg)
    _write(cfg, "compare.csv", rows_to_csv(rows, cols))
    _write(cfg, "compare.json", _dumps({"seed": cfg.global_seed, "rows": rows}))
    sys.stdout.write(rows_to_csv(rows, cols))
    return f"compared {len(cfg.compare.agents)} agent(s) -> {os.path.join(cfg.out, 'compare.csv')}"


COMMANDS = {
    "generate": (cmd_generate, "render synthetic streams to COCO-style JSON"),
    "simulate": (cmd_simulate, "run an agent under a latency model; write trace, pairing, predictions"),
    "eval-sap": (cmd_eval_sap, "streaming AP of an agent"),
    "eval-offline": (cmd_eval_offline, "offline AP (every frame processed, no latency)"),
    "triplets": (cmd_triplets, "export (prev, cur, target) triplets at a speed factor"),
    "tal-weights": (cmd_tal_weights, "per-object matching IoU and trend weights as CSV"),
    "train-forecaster": (cmd_train_forecaster, "train the linear box forecaster"),
    "gradcheck": (cmd_gradcheck, "compare analytic and finite-difference gradients"),
    "compare": (cmd_compare, "sAP table over agents x latencies x speed factors"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (YAML; flags override the file):\n" + describe_keys()
              + "\n\nexit codes: 0 ok, 1 usage, 2 input/validation, 3 numerical failure")
    parser = _Parser(prog="streamperc", description="Streaming perception evaluation toolkit.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="PATH", help="YAML run config")
        p.add_argument("--out", metavar="DIR", help="output directory (key: out)")
        p.add_argument("--seed", type=int, metavar="N", help="global seed (key: seed)")
        p.add_argument("--latency-ms", type=float, metavar="X",
                       help="constant latency in ms (keys: latency.*, compare.latencies_ms)")
        p.add_argument("--speed", type=int, choices=(0, 1, 2),
                       help="speed factor (keys: speed_factor, compare.speeds)")
        p.add_argument("--agent", choices=ex.AGENTS, help="agent kind (key: agent.name)")
        p.add_argument("--model", metavar="PATH", help="forecaster model JSON (key: agent.model)")
        p.add_argument("--dataset", metavar="PATH", help="COCO-style dataset instead of synthetic scenes")
        p.add_argument("--assert", dest="assert_", action="store_true",
                       help="exit 3 when a numerical check fails")
        p.add_argument("--inject-wrong-gradient", action="store_true", help=argparse.SUPPRESS)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.latency_ms is not None:
        cfg.latency.kind, cfg.latency.ms = "constant", args.latency_ms
        cfg.compare.latencies_ms = [args.latency_ms]
    if args.speed is not None:
        cfg.speed_factor = args.speed
        cfg.compare.speeds = [args.speed]
    if args.agent is not None:
        cfg.agent.name = args.agent
    if args.model is not None:
        cfg.agent.model = args.model
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if cfg.speed_factor not in (0, 1, 2):
        raise ValueError(f"speed_factor must be 0, 1 or 2, got {cfg.speed_factor}")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    func = COMMANDS[args.command][0]
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        print(f"seed={cfg.global_seed}", file=sys.stderr)
        summary = func(cfg, args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"{summary} (seed={cfg.global_seed})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
