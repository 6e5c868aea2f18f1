"""Ablation arms: named (pipeline mode, engine config) pairs run over seeds."""
from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import diffmodel as dm
from ..engine import EngineConfig, PipelineMode, RunReport, run_stream
from ..streamgen import StreamConfig, generate_streams

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("arm", "seed", "frames", "conf_frames", "mpjpe_all", "mpjpe_conf", "mpjpe_nonconf",
                  "pa_mpjpe_all", "epe2d_all", "stage1_iters", "stage2_iters", "localaug_steps")


def arm_setup(name: str, base: EngineConfig) -> tuple[PipelineMode, EngineConfig]:
    """Map an arm name to its pipeline mode and engine config.

    noadapt, single, pervideo, full; +aggregation / +local_aug / +two_stage
    (per-video plus one component); all_off; pl_{weak,strong,adaptive};
    samp_{uniform,weight,balanced,clustered}; thr{N}_{on,off} (stage-2 EPE
    threshold N px with the two-stage switch on or off).
    """
    if name == "noadapt":
        return PipelineMode.preset("pervideo"), replace(
            base, two_stage=replace(base.two_stage, stage1_max_iters=0, stage2_max_iters=0))
    if name in ("single", "pervideo", "full"):
        return PipelineMode.preset(name), base
    if name == "all_off":
        return PipelineMode("full", aggregation=False, local_aug=False, two_stage=False), base
    if name.startswith("+"):
        comp = name[1:]
        if comp not in ("aggregation", "local_aug", "two_stage"):
            raise ValueError(f"unknown component arm {name!r}")
        sw = dict(aggregation=False, local_aug=False, two_stage=False)
        sw[comp] = True
        return PipelineMode("full", **sw), base
    if name.startswith("pl_"):
        return PipelineMode.preset("full", pseudo_label=name[3:]), base
    if name.startswith("samp_"):
        return PipelineMode.preset("full", sampling=name[5:]), base
    if name.startswith("thr") and "_" in name:
        t, onoff = name[3:].split("_", 1)
        if onoff not in ("on", "off"):
            raise ValueError(f"bad threshold arm {name!r}")
        try:
            thr = float(t)
        except ValueError:
            raise ValueError(f"bad threshold arm {name!r}") from None
        return (PipelineMode.preset("full", two_stage=onoff == "on"),
                replace(base, two_stage=replace(base.two_stage, stage2_epe_threshold_px=thr)))
    raise ValueError(f"unknown arm {name!r}")


def summarize(report: RunReport, arm: str, seed) -> dict:
    s = report.summary()
    return {
        "arm": arm, "seed": seed, "frames": s["all"]["frames"], "conf_frames": s["conf"]["frames"],
        "mpjpe_all": s["all"]["mpjpe_mm"], "mpjpe_conf": s["conf"]["mpjpe_mm"],
        "mpjpe_nonconf": s["nonconf"]["mpjpe_mm"], "pa_mpjpe_all": s["all"]["pa_mpjpe_mm"],
        "epe2d_all": s["all"]["epe2d_px"],
        "stage1_iters": report.mean("stage1_iters"), "stage2_iters": report.mean("stage2_iters"),
        "localaug_steps": report.mean("localaug_steps"),
    }


def mean_row(rows: list[dict], arm: str) -> dict:
    out = {"arm": arm, "seed": "mean"}
    for k in SUMMARY_FIELDS[2:]:
        out[k] = float(np.mean([r[k] for r in rows]))
    return out


def run_ablation(pretrained: dm.RegressorState, arms, seeds, stream_cfg: StreamConfig = StreamConfig(),
                 base: EngineConfig = EngineConfig(), out_dir=None, streams_for_seed=None) -> dict:
    """Run every arm on every seed; returns ``{arm: [summary per seed] + [mean]}``.

    Seed ``s`` drives both the stream generator and the engine, so arm
    comparisons at one seed share identical streams. ``streams_for_seed`` may
    supply cached videos.
    """
    setups = {a: arm_setup(a, base) for a in arms}  # validate names before any work
    cache = {}
    results = {}
    for arm in arms:
        mode, cfg = setups[arm]
        rows = []
        for seed in seeds:
            if seed not in cache:
                cache[seed] = (streams_for_seed(seed) if streams_for_seed
                               else generate_streams(replace(stream_cfg, seed=seed)))
            report = run_stream(mode, cache[seed], pretrained, replace(cfg, seed=seed))
            report.label = arm
            rows.append(summarize(report, arm, seed))
            if out_dir is not None:
                d = Path(out_dir) / "arms" / arm
                d.mkdir(parents=True, exist_ok=True)
                report.write_csv(d / f"seed{seed}.csv")
            log.info("arm %s seed %s mpjpe %.2f", arm, seed, rows[-1]["mpjpe_all"])
        results[arm] = rows + [mean_row(rows, arm)]
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", results)
    return results


def write_ablation_csv(path, results: dict) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for rows in results.values():
            for r in rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_ablation_csv(path) -> dict:
    out: dict = {}
    with Path(path).open() as fh:
        for rec in csv.DictReader(fh):
            row = {"arm": rec["arm"], "seed": rec["seed"] if rec["seed"] == "mean" else int(rec["seed"])}
            for k in SUMMARY_FIELDS[2:]:
                row[k] = float(rec[k])
            out.setdefault(rec["arm"], []).append(row)
    return out
