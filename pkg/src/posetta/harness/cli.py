"""Command line: pretrain, gen-streams, run, ablate, report.

Exit status 0 on success, 1 on usage errors (bad flags, bad config, missing
inputs), 2 when a command aborts at runtime.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .. import diffmodel as dm
from ..kinematics import InvalidInputError
from ..streamgen import StreamFormatError, generate_streams, read_stream, write_stream
from .ablate import arm_setup, run_ablation
from .config import ConfigError, dump_config, load_config, seeded
from .pretrain import DivergenceError, pretrain
from .report import ablation_table, build_report, load_inputs, runs_table

log = logging.getLogger("posetta")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    common.add_argument("--mode", choices=("single", "pervideo", "full"), help="pipeline for `run`")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="posetta", description="Streaming test-time adaptation on synthetic pose streams.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("pretrain", parents=[common], help="train the regressor on the source domain")
    sub.add_parser("gen-streams", parents=[common], help="write shifted test streams")
    for name, hlp in (("run", "adapt over a stream file"), ("ablate", "run the ablation arms over seeds")):
        sp = sub.add_parser(name, parents=[common], help=hlp)
        sp.add_argument("--checkpoint", help="pretrained model (default from config)")
        if name == "run":
            sp.add_argument("--streams", help="stream file (default from config)")
        else:
            sp.add_argument("--arms", help="comma-separated arm names")
            sp.add_argument("--seeds", help="comma-separated seeds")
    rp = sub.add_parser("report", parents=[common], help="tables and figures from outputs")
    rp.add_argument("inputs", nargs="*", help="run/ablation CSVs, stream files or directories (default: --out)")
    return p


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    return path


def _csv_ints(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None


def cmd_pretrain(cfg, out: Path) -> None:
    stream_cfg, pre_cfg, _ = seeded(cfg)
    state, history = pretrain(stream_cfg, pre_cfg)
    out.mkdir(parents=True, exist_ok=True)
    dm.save_checkpoint(out / "model.ckpt", state)
    with (out / "pretrain_log.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_mpjpe_mm"])
        w.writerows([s, repr(l), repr(e)] for s, l, e in history)
    print(f"checkpoint {out / 'model.ckpt'}: val MPJPE {history[0][2]:.1f} -> {min(h[2] for h in history):.1f} mm")


def cmd_gen_streams(cfg, out: Path) -> None:
    stream_cfg, _, _ = seeded(cfg)
    videos = generate_streams(stream_cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_stream(out / "streams.txt", videos, stream_cfg)
    print(f"{out / 'streams.txt'}: {len(videos)} videos x {stream_cfg.frames_per_video} frames")


def cmd_run(cfg, out: Path, checkpoint, streams):
    from ..engine import run_stream

    pretrained = dm.load_checkpoint(_need(checkpoint))
    videos = read_stream(_need(streams))
    _, _, eng = seeded(cfg)
    report = run_stream(cfg.pipeline_mode(), videos, pretrained, eng)
    report.label = cfg.mode
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / f"run_{cfg.mode}.csv")
    report.write_split_csv(out / f"split_{cfg.mode}.csv")
    table = runs_table({cfg.mode: report})
    (out / f"summary_{cfg.mode}.md").write_text(table + "\n")
    (out / f"config_{cfg.mode}.ini").write_text(dump_config(cfg))
    print(table)
    return report


def cmd_ablate(cfg, out: Path, checkpoint):
    pretrained = dm.load_checkpoint(_need(checkpoint))
    _, _, eng = seeded(cfg)
    if not cfg.seeds:
        raise UsageError("no seeds given")
    out.mkdir(parents=True, exist_ok=True)
    for arm in cfg.arms:
        try:
            arm_setup(arm, eng)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    results = run_ablation(pretrained, cfg.arms, cfg.seeds, cfg.stream, eng, out_dir=out)
    (out / "config_ablate.ini").write_text(dump_config(cfg))
    print(ablation_table(results))
    return results


def cmd_report(cfg, out: Path, inputs) -> Path:
    try:
        runs, ablation, videos = load_inputs(inputs or [out])
    except FileNotFoundError as exc:
        raise UsageError(f"input not found: {exc}") from None
    if not (runs or ablation or videos):
        raise UsageError("no run CSVs, ablation CSV or stream file among the inputs")
    path = build_report(out / "report", runs, ablation, videos, cfg.engine.rule)
    print(path)
    return path


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed, "mode": args.mode, "out": args.out}
        if getattr(args, "checkpoint", None):
            overrides["checkpoint"] = args.checkpoint
        if getattr(args, "streams", None):
            overrides["streams"] = args.streams
        if getattr(args, "arms", None):
            overrides["arms"] = tuple(a.strip() for a in args.arms.split(",") if a.strip())
        if getattr(args, "seeds", None):
            overrides["seeds"] = _csv_ints(args.seeds)
        elif args.command == "ablate" and args.seed is not None:
            overrides["seeds"] = (args.seed,)
        cfg = load_config(args.config, overrides)
        out = Path(cfg.out)
        cfg.checkpoint = cfg.checkpoint or str(out / "model.ckpt")
        cfg.streams = cfg.streams or str(out / "streams.txt")
        if args.command == "pretrain":
            cmd_pretrain(cfg, out)
        elif args.command == "gen-streams":
            cmd_gen_streams(cfg, out)
        elif args.command == "run":
            cmd_run(cfg, out, cfg.checkpoint, cfg.streams)
        elif args.command == "ablate":
            cmd_ablate(cfg, out, cfg.checkpoint)
        else:
            cmd_report(cfg, out, args.inputs)
    except (UsageError, ConfigError) as exc:
        print(f"posetta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, StreamFormatError, InvalidInputError, ValueError, FloatingPointError,
            OSError) as exc:
        print(f"posetta: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
