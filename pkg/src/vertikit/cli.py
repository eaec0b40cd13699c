"""``vertikit`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Outputs default to subdirectories of ``--root`` (else ``run.out``, else
``$VERTIKIT_OUT``, else ``./runs``)::

    data/  codec/codec.vckpt  pretrain/encoder.vckpt  tasks/<task>_<mode>.vckpt
    eval/  ablation_<which>/  rollout/  report/
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import FORMAT_VERSION as CKPT_VERSION
from .config import RunConfig, load_config, parse_seeds
from .dataset import FORMAT_VERSION as DATA_VERSION
from .errors import ConfigError, VertikitError

log = logging.getLogger("vertikit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vertikit", description="Terrain representation pipeline: simulate, encode, pretrain, evaluate.")
    p.add_argument("--version", action="version", version=f"vertikit {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--root", help="output root (default: run.out, $VERTIKIT_OUT, ./runs)")
        sp.add_argument("--out", help="output directory of this stage")
        sp.add_argument("--seed", type=int, help="global seed (run.seed)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = add("gen-data", "simulate teleoperated episodes and write a dataset directory")
    sp.add_argument("--seeds", type=int, help="number of terrain seeds")
    sp.add_argument("--split", help="train:test seed ratio, e.g. 9:1")
    sp.add_argument("--episodes", type=int, help="episodes per terrain seed")
    sp.add_argument("--steps", type=int, help="steps per episode")
    sp.add_argument("--workers", type=int)

    sp = add("train-swae", "train the patch codec on the training split")
    sp.add_argument("--data")
    sp.add_argument("--epochs", type=int)

    sp = add("pretrain", "pretrain the context encoder on the pretext objective")
    sp.add_argument("--data")
    sp.add_argument("--codec")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--mask-ratio", type=float)
    sp.add_argument("--ordering", choices=("sequential", "interleaved"))

    sp = add("train-task", "train a downstream task in frozen, finetune or e2e mode")
    sp.add_argument("--task", choices=("fkd", "ikd", "bc", "pr"))
    sp.add_argument("--mode", choices=("frozen", "finetune", "e2e"))
    sp.add_argument("--data")
    sp.add_argument("--codec")
    sp.add_argument("--encoder")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--no-goal", action="store_true", help="train BC without the goal input")

    sp = add("eval", "evaluate a downstream checkpoint on one split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--data")
    sp.add_argument("--codec")
    sp.add_argument("--encoder")

    sp = add("ablate", "masking-ratio or token-ordering ablation")
    sp.add_argument("--which", choices=("masking", "ordering"))
    sp.add_argument("--data")
    sp.add_argument("--codec")
    sp.add_argument("--seeds", help="seed list, e.g. 0,1,2")

    sp = add("rollout", "closed-loop BC rollouts with a success and failure report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--codec")
    sp.add_argument("--encoder")
    sp.add_argument("--seeds", help="map seeds, e.g. 0-9")
    sp.add_argument("--flat", action="store_true", help="use flat maps")
    sp.add_argument("--distance", type=float)
    sp.add_argument("--timeout", type=float)

    sp = add("report", "consolidated downstream table over all task/mode checkpoints")
    sp.add_argument("--runs", help="directory holding <task>_<mode>.vckpt files")
    return p


# flag -> config key; only flags that were given become overrides
FLAG_KEYS = {
    "gen-data": {"seeds": "data.seeds", "split": "data.split", "episodes": "data.episodes_per_seed",
                 "steps": "data.steps_per_episode", "workers": "data.workers"},
    "train-swae": {"epochs": "codec.epochs"},
    "pretrain": {"epochs": "pretrain.epochs", "mask_ratio": "pretrain.mask_ratio", "ordering": "pretrain.ordering"},
    "train-task": {"task": "downstream.task", "mode": "downstream.mode", "epochs": "downstream.epochs",
                   "batch_size": "downstream.batch_size"},
    "ablate": {"which": "ablation.which", "seeds": "ablation.seeds"},
    "rollout": {"seeds": "rollout.seeds", "distance": "rollout.distance", "timeout": "rollout.timeout"},
}


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    for flag, key in FLAG_KEYS.get(args.command, {}).items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if args.command == "pretrain" and args.ordering:
        overrides.append(f"downstream.ordering={args.ordering}")
    if args.command == "train-task" and args.no_goal:
        overrides.append("downstream.use_goal=false")
    if args.command == "rollout" and args.flat:
        overrides.append("rollout.flat=true")
    return load_config(args.config, overrides)


def output_root(args, cfg: RunConfig) -> Path:
    return Path(args.root or cfg.run.out or os.environ.get("VERTIKIT_OUT") or "runs")


def stamp(directory: Path, cfg: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    cfg.echo(directory)
    (directory / "version.txt").write_text(
        f"vertikit {__version__}\ndataset format {DATA_VERSION}\ncheckpoint format {CKPT_VERSION}\n", encoding="utf-8")


def _timing(directory: Path, name: str, seconds: float) -> None:
    path = directory / "timing.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[name] = seconds
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(args, cfg, root):
    from .dataset import collect_dataset

    out = Path(args.out or root / "data")
    stamp(out, cfg)
    collect_dataset(cfg.data, out, cfg.terrain, cfg.vehicle)
    log.info("dataset written to %s", out)
    return out


def _train_patches(data_dir):
    from .dataset import load_dataset

    ds = load_dataset(data_dir)
    return np.concatenate([e.patches for e in ds.split("train")])


def cmd_train_swae(args, cfg, root):
    from .codec import train_codec

    data = Path(args.data or root / "data")
    out = Path(args.out or root / "codec")
    patches = _train_patches(data)
    stamp(out, cfg)
    ckpt = train_codec(patches, cfg.codec, log=log.info)
    ckpt.save(out / "codec.vckpt")
    log.info("codec checkpoint %s (%s)", out / "codec.vckpt", ckpt.checksum[:12])
    return out


def _split_tensors(data_dir, codec):
    from .harness import prepare_data
    from .dataset import load_dataset

    return prepare_data(load_dataset(data_dir), codec)


def cmd_pretrain(args, cfg, root):
    from .codec import load_codec
    from .encoder import pretrain

    data = Path(args.data or root / "data")
    codec_path = Path(args.codec or root / "codec" / "codec.vckpt")
    out = Path(args.out or root / "pretrain")
    codec, cs = load_codec(codec_path)
    split = _split_tensors(data, codec)
    stamp(out, cfg)
    ckpt = pretrain(split["train"].tensors, cfg.pretrain, cs, test=split["test"].tensors,
                    log_path=out / "pretext_log.csv", log=log.info)
    ckpt.save(out / "encoder.vckpt")
    log.info("encoder checkpoint %s (%s)", out / "encoder.vckpt", ckpt.checksum[:12])
    return out


def _downstream_config(args, cfg, root):
    d = cfg.downstream
    return replace(d,
                   dataset=str(getattr(args, "data", None) or d.dataset or root / "data"),
                   codec=str(getattr(args, "codec", None) or d.codec or root / "codec" / "codec.vckpt"),
                   encoder=str(getattr(args, "encoder", None) or d.encoder or root / "pretrain" / "encoder.vckpt"))


def cmd_train_task(args, cfg, root):
    from .harness import train_downstream

    dcfg = _downstream_config(args, cfg, root)
    out = Path(args.out or root / "tasks")
    t0 = time.time()
    # load inputs before stamping so precondition failures leave no output behind
    from .harness import load_backbone, prepare_data
    from .dataset import load_dataset

    backbone = load_backbone(dcfg.codec, dcfg.encoder if dcfg.mode != "e2e" else None)
    data = prepare_data(load_dataset(dcfg.dataset), backbone.codec)
    stamp(out, cfg)
    _, report = train_downstream(dcfg, data, backbone, out=out, log=log.info)
    _timing(out, f"{dcfg.task}_{dcfg.mode}", time.time() - t0)
    head = report.headline("test")
    log.info("%s/%s test %s %.6f", dcfg.task, dcfg.mode, "psnr" if dcfg.task == "pr" else "mse", head)
    return out


def cmd_eval(args, cfg, root):
    from .checkpoint import load_checkpoint
    from .harness import evaluate, load_backbone

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "downstream":
        raise ConfigError(f"{args.checkpoint} is a {ckpt.kind!r} checkpoint, not a downstream one")
    dcfg = _downstream_config(args, cfg, root)
    mode, task = ckpt.meta["mode"], ckpt.meta["task"]
    backbone = load_backbone(dcfg.codec, dcfg.encoder if mode == "frozen" else None)
    rep = evaluate(ckpt, dcfg.dataset, args.split, backbone)
    out = Path(args.out or root / "eval")
    stamp(out, cfg)
    body = {k: v for k, v in rep.to_dict().items() if k not in ("wall_clock", "config")}
    body["split"] = args.split
    (out / f"eval_{task}_{mode}_{args.split}.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n",
                                                               encoding="utf-8")
    print(json.dumps(body, sort_keys=True))
    return out


def cmd_ablate(args, cfg, root):
    from .harness import load_backbone, prepare_data, run_ablation
    from .dataset import load_dataset

    data_dir = Path(args.data or cfg.downstream.dataset or root / "data")
    codec_path = Path(args.codec or cfg.downstream.codec or root / "codec" / "codec.vckpt")
    which = cfg.ablation.which
    out = Path(args.out or root / f"ablation_{which}")
    backbone = load_backbone(codec_path)
    data = prepare_data(load_dataset(data_dir), backbone.codec)
    stamp(out, cfg)
    t0 = time.time()
    rep = run_ablation(which, data, backbone, cfg.pretrain, cfg.downstream, parse_seeds(cfg.ablation.seeds),
                       out=out, log=log.info)
    _timing(out, f"ablation_{which}", time.time() - t0)
    print(rep.text(), end="")
    return out


def cmd_rollout(args, cfg, root):
    from .checkpoint import load_checkpoint
    from .harness import BCPolicy, load_backbone, load_downstream, run_rollouts, write_rollout_report

    ckpt = load_checkpoint(args.checkpoint, kind="downstream")
    mode = ckpt.meta["mode"]
    dcfg = _downstream_config(args, cfg, root)
    backbone = load_backbone(dcfg.codec, dcfg.encoder if mode == "frozen" else None)
    policy = BCPolicy(load_downstream(ckpt, backbone))
    r = cfg.rollout
    out = Path(args.out or root / "rollout")
    stamp(out, cfg)
    results = run_rollouts(policy, parse_seeds(r.seeds), cfg.terrain, r.flat, r.distance, r.timeout,
                           cfg.data.dt, cfg.vehicle, out=out, goal_clip=r.goal_clip)
    rows = write_rollout_report(out, {f"bc_{mode}": results})
    print((out / "rollout_report.txt").read_text(), end="")
    log.info("%d rollouts, %d successes", rows[0]["runs"], rows[0]["successes"])
    return out


def cmd_report(args, cfg, root):
    from .harness import report_table1

    runs = Path(args.runs or root / "tasks")
    out = Path(args.out or root / "report")
    stamp(out, cfg)
    report_table1(runs, out)
    print((out / "table1.txt").read_text(), end="")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-swae": cmd_train_swae,
    "pretrain": cmd_pretrain,
    "train-task": cmd_train_task,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "rollout": cmd_rollout,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"vertikit: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg, output_root(args, cfg))
    except ConfigError as exc:
        print(f"vertikit: configuration error: {exc}", file=sys.stderr)
        return 1
    except VertikitError as exc:
        print(f"vertikit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"vertikit: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
