"""Command-line entry point: gen-data, train, evaluate, predict, render, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .attention import attention_arrows, write_arrows_csv
from .backbone import LOSS_KINDS
from .battle import PRESETS, ScenarioConfig, load_replay, save_replay, synth_battle
from .endpoints import format_table, write_endpoints_csv, write_metrics_csv
from .errors import InvalidArgument, ReplayParseError, ReplayValidationError
from .geometry import INPUT_MODES, write_planes
from .gradcheck import COMPONENTS, format_report, gradcheck
from .model import ABLATIONS
from .render import render_overlay
from .train import (TrainConfig, build_datasets, evaluate, load_checkpoint, predict,
                    train)

log = logging.getLogger("tankcast")


def load_config(path: Optional[str], overrides: dict) -> TrainConfig:
    """Defaults, then the YAML file, then non-None flag overrides."""
    values = {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise InvalidArgument(f"{path}: expected a key-value mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def _replays(folder) -> list:
    files = sorted(Path(folder).glob("*.jsonl"))
    if not files:
        raise InvalidArgument(f"no replays (*.jsonl) in {folder}")
    return [load_replay(f) for f in files]


def _datasets(cfg: TrainConfig, data_dir: Optional[str]):
    return build_datasets(cfg, _replays(data_dir) if data_dir else None)


def _report(report, out: Path, scores) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    write_endpoints_csv(out / "endpoints.csv", scores)
    rows = [(r["group"], r["n"], f"{r['rel_fde1']:.3f}", f"{r['rel_fde3']:.3f}",
             f"{r['fde1_m']:.1f}", f"{r['fde3_m']:.1f}") for r in report.rows]
    print(format_table(rows, ("group", "n", "RelFDE@1", "RelFDE@3", "FDE@1 m", "FDE@3 m")))
    print(f"parameters: {report.param_count}")


def cmd_gen_data(args, cfg: TrainConfig) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_battles):
        preset = cfg.preset or PRESETS[i % len(PRESETS)]
        scenario = ScenarioConfig(preset=preset, context_sensitive=cfg.context_sensitive)
        battle = synth_battle(cfg.data_seed * 1_000_003 + i, scenario)
        save_replay(battle, out / f"{battle.battle_id}.jsonl")
    print(f"wrote {cfg.n_battles} replays to {out}")
    return 0


def cmd_train(args, cfg: TrainConfig) -> int:
    out = Path(cfg.out)
    train_set, eval_set = _datasets(cfg, args.data)
    result = train(cfg, train_set, out_dir=out)
    print(f"final loss {result.losses[-1]:.5f}; checkpoint {result.checkpoint}")
    report, scores = evaluate(result.model, result.vocab, eval_set, cfg.loss)
    _report(report, out, scores)
    return 0


def cmd_evaluate(args, cfg: TrainConfig) -> int:
    model, vocab, ckpt_cfg = load_checkpoint(args.checkpoint)
    data_cfg = TrainConfig.from_dict({**ckpt_cfg.to_dict(), "data_seed": cfg.data_seed,
                                      "n_eval": cfg.n_eval})
    _, eval_set = _datasets(data_cfg, args.data)
    report, scores = evaluate(model, vocab, eval_set, ckpt_cfg.loss)
    _report(report, Path(args.out or cfg.out), scores)
    return 0


def _predict(args):
    model, vocab, ckpt_cfg = load_checkpoint(args.checkpoint)
    battle = load_replay(args.replay)
    target = args.target if args.target is not None else battle.roster[0].id
    res = predict(model, vocab, ckpt_cfg, battle, args.t, target, args.horizon)
    return battle, ckpt_cfg, res


def cmd_predict(args, cfg: TrainConfig) -> int:
    battle, ckpt_cfg, res = _predict(args)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_planes(out / "heatmap.ehmp", res.heatmap[None])
    ids = sorted(res.attention)
    write_arrows_csv(out / "attention.csv",
                     attention_arrows(res.target_id, ids, [res.attention[i] for i in ids]))
    for rank, ((x, y), p) in enumerate(zip(res.endpoints.points, res.endpoints.peaks)):
        print(f"endpoint {rank}: x={x:.1f} m y={y:.1f} m peak={p:.4g}")
    return 0


def cmd_render(args, cfg: TrainConfig) -> int:
    battle, ckpt_cfg, res = _predict(args)
    for p in render_overlay(battle, res, ckpt_cfg.geometry, Path(args.out or cfg.out)):
        print(p)
    return 0


def cmd_gradcheck(args, cfg: TrainConfig) -> int:
    results = gradcheck(args.component, seed=cfg.seed)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of training config keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--loss", choices=LOSS_KINDS)
    common.add_argument("--ablation", choices=ABLATIONS)
    common.add_argument("--mode", choices=INPUT_MODES)
    common.add_argument("--steps", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tankcast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic replays")
    t = sub.add_parser("train", parents=[common], help="train and evaluate a model")
    t.add_argument("--data", help="replay folder (default: synthesise from config)")
    e = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    for name in ("predict", "render"):
        q = sub.add_parser(name, parents=[common], help=f"{name} one target endpoint")
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--replay", required=True)
        q.add_argument("--t", type=int, default=0, help="state index")
        q.add_argument("--target", type=int, help="target vehicle id (default: first)")
        q.add_argument("--horizon", type=int, default=1, help="steps of 15 s, 1..6")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--component", default="all", choices=("all",) + COMPONENTS)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
            "predict": cmd_predict, "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed, "loss": args.loss, "ablation": args.ablation,
                     "mode": args.mode, "steps": args.steps}
        if args.command in ("train", "gen-data"):
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (InvalidArgument, ReplayParseError, ReplayValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
