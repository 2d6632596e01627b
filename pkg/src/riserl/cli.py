"""Command line: train, eval, cost, report, config."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, Mode, desk_preset
from .costmodel import CostQuery, analytic_cost, format_table
from .envs import EnvSpec
from .errors import ConfigError, NumericFault
from .evalstats import bootstrap_ci, iqm

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("riserl")


def cmd_train(args) -> int:
    from .train import run_training

    cfg = ExperimentConfig.load(args.config)
    if args.total_frames is not None or args.seed is not None or args.output is not None:
        d = cfg.to_dict()
        if args.total_frames is not None:
            d["schedule"]["total_frames"] = args.total_frames
        if args.seed is not None:
            d["seed"] = args.seed
        if args.output is not None:
            d["output_dir"] = args.output
        cfg = ExperimentConfig.from_dict(d)
    res = run_training(cfg, resume=args.resume, trace=args.trace)
    print(json.dumps({"run_dir": str(res.run_dir), "frames": res.frames, "grad_steps": res.grad_steps,
                      **res.stats.summary()}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_agent

    ck = Path(args.checkpoint)
    if (ck / "checkpoint").is_dir():
        ck = ck / "checkpoint"
    cfg = ExperimentConfig.load(ck / "config.json")
    env = cfg.env
    if args.env is not None:
        d = json.loads(Path(args.env).read_text())
        try:
            env = EnvSpec(**d)
        except TypeError as exc:
            raise ConfigError(f"env spec: {exc}") from exc
        if env.obs_size != cfg.env.obs_size:
            raise ConfigError(f"env obs_size {env.obs_size} does not match checkpoint {cfg.env.obs_size}")
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    agent = load_agent(ck, cfg)
    res = evaluate(agent, env, args.episodes, args.epsilon, args.seed)
    print(json.dumps({"returns": res.returns, "summary": res.summary()}, sort_keys=True))
    return EXIT_OK


def cmd_cost(args) -> int:
    q = CostQuery(Mode(args.mode), args.b, args.k, args.m, args.l, args.double_q)
    r = analytic_cost(q)
    print(json.dumps(r.to_dict(), sort_keys=True))
    if not args.json_only:
        print(format_table(q, r))
    return EXIT_OK


def _read_run(run_dir: Path):
    cfg = json.loads((run_dir / "config.json").read_text())
    recs = []
    with open(run_dir / "metrics.jsonl") as fh:
        for line in fh:
            line = line.strip()
            if line:
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError:
                    log.warning("%s: skipping unparseable metrics line", run_dir)
    return cfg, recs


def _group_key(cfg: dict) -> str:
    net = cfg["network"]
    key = f"{cfg['env']['kind']}/{net['mode']}"
    if net["mode"] == Mode.RISE.value:
        key += f"/{net['combine']}/{net['fixed']['kind']}"
    return key


def aggregate(run_dirs, metric: str = "return_mean_100", bucket: int | None = None, resamples: int = 2000,
              seed: int = 0) -> dict:
    groups: dict[str, list] = defaultdict(list)
    for d in run_dirs:
        cfg, recs = _read_run(Path(d))
        groups[_group_key(cfg)].append((Path(d), recs))
    if len(groups) > 1:
        log.warning("runs have differing configurations; aggregating per group: %s", sorted(groups))
    out = {}
    for key, runs in sorted(groups.items()):
        task = key.split("/")[0]
        finals = []
        curves: dict[int, dict[int, float]] = defaultdict(dict)
        for r, (path, recs) in enumerate(runs):
            vals = [(rec["frames"], rec[metric]) for rec in recs if rec.get(metric) is not None]
            if not vals:
                continue
            finals.append(vals[-1][1])
            for frames, v in vals:
                b = frames if not bucket else int(math.ceil(frames / bucket) * bucket)
                curves[b][r] = v
        if not finals:
            out[key] = {"runs": len(runs), "iqm": None, "ci_lo": None, "ci_hi": None, "per_task": {}, "curve": []}
            continue
        ci = bootstrap_ci(np.array(finals)[:, None], iqm, resamples, seed=seed)
        curve = []
        for b in sorted(curves):
            if len(curves[b]) == len(finals):
                c = bootstrap_ci(np.array(list(curves[b].values()))[:, None], iqm, resamples, seed=seed)
                curve.append({"frames": b, "iqm": c.point, "ci_lo": c.lo, "ci_hi": c.hi})
        out[key] = {
            "runs": len(runs), "iqm": ci.point, "ci_lo": ci.lo, "ci_hi": ci.hi, "degenerate": ci.degenerate,
            "per_task": {task: {"final_scores": finals, "iqm": ci.point}},
            "curve": curve,
        }
    return out


def cmd_report(args) -> int:
    groups = aggregate(args.runs, args.metric, args.bucket, args.resamples, args.seed)
    result: dict = {"metric": args.metric, "groups": groups}
    if len(groups) == 1:
        only = next(iter(groups.values()))
        result.update({k: only[k] for k in ("iqm", "ci_lo", "ci_hi", "per_task")})
    if args.out:
        prefix = Path(args.out)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
        for key, g in groups.items():
            name = key.replace("/", "_")
            with open(f"{prefix}_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frames", "iqm", "ci_lo", "ci_hi"])
                for row in g["curve"]:
                    w.writerow([row["frames"], row["iqm"], row["ci_lo"], row["ci_hi"]])
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_config(args) -> int:
    overrides = {}
    for item in args.set or []:
        k, _, v = item.partition("=")
        overrides[k.replace(".", "__")] = json.loads(v)
    cfg = desk_preset(args.env, args.mode, **overrides)
    text = cfg.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riserl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON experiment config")
    t.add_argument("config")
    t.add_argument("--output")
    t.add_argument("--total-frames", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--trace", action="store_true", help="dump per-env episode traces as JSONL")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy rollouts from a checkpoint")
    e.add_argument("checkpoint", help="run dir or its checkpoint/ subdir")
    e.add_argument("--env", help="JSON EnvSpec overriding the run's env")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--epsilon", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=12345)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cost", help="analytic encoder-pass / update counts per batch")
    c.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    c.add_argument("--b", type=int, required=True)
    c.add_argument("--k", type=int)
    c.add_argument("--m", type=int)
    c.add_argument("--l", type=int)
    c.add_argument("--double-q", action="store_true")
    c.add_argument("--json-only", action="store_true")
    c.set_defaults(func=cmd_cost)

    r = sub.add_parser("report", help="aggregate metrics across run dirs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--metric", default="return_mean_100")
    r.add_argument("--bucket", type=int)
    r.add_argument("--resamples", type=int, default=2000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="path prefix for <prefix>.json and per-group CSVs")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("config", help="print a desk-scale preset config")
    g.add_argument("--env", default="tmaze")
    g.add_argument("--mode", default="rise")
    g.add_argument("--set", action="append", help="dotted.key=JSON value, e.g. schedule.total_frames=1000")
    g.add_argument("--out")
    g.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
