"""Markdown tables, plot-data CSVs and PNG figures from run / ablation outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..engine import RunReport
from ..selection import ConfidenceRule
from ..streamgen import Video
from .ablate import read_ablation_csv

# rows shown in the adaptation-settings table, in order
SETTING_ARMS = ("noadapt", "single", "pervideo", "full")
COMPONENT_ARMS = ("pervideo", "+aggregation", "+local_aug", "+two_stage", "full")


def _fmt(x, nd=1):
    return "n/a" if x is None or not np.isfinite(x) else f"{x:.{nd}f}"


def markdown_table(header, rows) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out)


def runs_table(runs: dict[str, RunReport]) -> str:
    rows = []
    for label, r in runs.items():
        s = r.summary()
        rows.append([label, s["all"]["frames"], _fmt(s["all"]["mpjpe_mm"]), _fmt(s["all"]["pa_mpjpe_mm"]),
                     _fmt(s["conf"]["mpjpe_mm"]), _fmt(s["nonconf"]["mpjpe_mm"]), _fmt(s["all"]["epe2d_px"], 2)])
    return markdown_table(["run", "frames", "MPJPE", "PA-MPJPE", "Conf.", "Non-conf.", "2D EPE (px)"], rows)


def ablation_table(results: dict, arms=None) -> str:
    means = {a: rows[-1] for a, rows in results.items()}
    arms = [a for a in (arms or means) if a in means]
    ref = means.get("pervideo", {}).get("mpjpe_all")
    rows = []
    for a in arms:
        m = means[a]
        gain = "" if ref is None else f"{100 * (ref - m['mpjpe_all']) / ref:+.1f}%"
        rows.append([a, _fmt(m["mpjpe_all"]), _fmt(m["mpjpe_conf"]), _fmt(m["mpjpe_nonconf"]),
                     _fmt(m["pa_mpjpe_all"]), gain])
    return markdown_table(["arm", "All", "Conf.", "Non-conf.", "PA-MPJPE", "vs per-video"], rows)


def keypoint_count_bins(videos: list[Video], rule: ConfidenceRule = ConfidenceRule()) -> list[dict]:
    """Mean per-frame 2D EPE of the estimated keypoints, binned by the number
    of keypoints whose confidence exceeds the rule threshold."""
    by = {}
    for v in videos:
        for f in v:
            n = int(np.count_nonzero(f.est_2d.confidence > rule.keypoint_threshold))
            e = float(np.linalg.norm(f.est_2d.points - f.gt_2d.points, axis=1).mean())
            by.setdefault(n, []).append(e)
    return [{"confident_keypoints": n, "frames": len(es), "epe2d_px": float(np.mean(es))}
            for n, es in sorted(by.items())]


def mpjpe_by_keypoint_count(videos: list[Video], runs: dict[str, RunReport],
                            rule: ConfidenceRule = ConfidenceRule()) -> list[dict]:
    """Per-run MPJPE binned by confident-keypoint count (frames joined on ids)."""
    count = {(f.video_id, f.frame_id): int(np.count_nonzero(f.est_2d.confidence > rule.keypoint_threshold))
             for v in videos for f in v}
    out = []
    for label, r in runs.items():
        by = {}
        for row in r.rows:
            n = count.get((row.video_id, row.frame_id))
            if n is not None:
                by.setdefault(n, []).append(row.mpjpe_mm)
        out += [{"run": label, "confident_keypoints": n, "frames": len(v), "mpjpe_mm": float(np.mean(v))}
                for n, v in sorted(by.items())]
    return out


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _plot_bars(path, labels, series: dict, ylabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.arange(len(labels))
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(labels) + 2), 3.5))
    for i, (name, vals) in enumerate(series.items()):
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_lines(path, xs: dict, ys: dict, xlabel, ylabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in ys:
        ax.plot(xs[name], ys[name], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(ys) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(out_dir, runs: dict[str, RunReport] | None = None, ablation: dict | None = None,
                 videos: list[Video] | None = None, rule: ConfidenceRule = ConfidenceRule()) -> Path:
    """Write ``report.md`` plus plot CSVs and PNGs into ``out_dir``; returns the markdown path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = runs or {}
    parts = ["# Adaptation report", ""]

    if runs:
        parts += ["## Runs", "", runs_table(runs), ""]
        labels = list(runs)
        _plot_bars(out / "runs_mpjpe.png", labels,
                   {s: [runs[k].mean("mpjpe_mm", s) for k in labels] for s in ("all", "conf", "nonconf")},
                   "MPJPE (mm)")

    if ablation:
        settings = [a for a in SETTING_ARMS if a in ablation]
        if settings:
            parts += ["## Adaptation settings", "", ablation_table(ablation, settings), ""]
        comps = [a for a in COMPONENT_ARMS if a in ablation]
        if comps:
            parts += ["## Components", "", ablation_table(ablation, comps), ""]
        parts += ["## All arms", "", ablation_table(ablation), ""]
        arms = list(ablation)
        means = {a: ablation[a][-1] for a in arms}
        write_rows(out / "ablation_means.csv", [means[a] for a in arms])
        _plot_bars(out / "ablation_mpjpe.png", arms,
                   {"All": [means[a]["mpjpe_all"] for a in arms],
                    "Conf.": [means[a]["mpjpe_conf"] for a in arms],
                    "Non-conf.": [means[a]["mpjpe_nonconf"] for a in arms]}, "MPJPE (mm)")
        thr = sorted((a for a in arms if a.startswith("thr")), key=lambda a: float(a[3:].split("_")[0]))
        if thr:
            xs, ys = {}, {}
            for a in thr:
                t, onoff = a[3:].split("_")
                name = f"two-stage {onoff}"
                xs.setdefault(name, []).append(float(t))
                ys.setdefault(name, []).append(means[a]["mpjpe_all"])
            _plot_lines(out / "threshold_sweep.png", xs, ys, "stage-2 EPE threshold (px)", "MPJPE (mm)")

    if videos:
        bins = keypoint_count_bins(videos, rule)
        write_rows(out / "confidence_vs_epe.csv", bins)
        parts += ["## Confident keypoints vs. 2D error", "",
                  markdown_table(["confident keypoints", "frames", "2D EPE (px)"],
                                 [[b["confident_keypoints"], b["frames"], _fmt(b["epe2d_px"], 2)] for b in bins]), ""]
        _plot_lines(out / "confidence_vs_epe.png", {"estimated 2D": [b["confident_keypoints"] for b in bins]},
                    {"estimated 2D": [b["epe2d_px"] for b in bins]}, "confident keypoints", "2D EPE (px)")
        if runs:
            rows = mpjpe_by_keypoint_count(videos, runs, rule)
            write_rows(out / "confidence_vs_mpjpe.csv", rows)
            xs, ys = {}, {}
            for r in rows:
                xs.setdefault(r["run"], []).append(r["confident_keypoints"])
                ys.setdefault(r["run"], []).append(r["mpjpe_mm"])
            _plot_lines(out / "confidence_vs_mpjpe.png", xs, ys, "confident keypoints", "MPJPE (mm)")

    path = out / "report.md"
    path.write_text("\n".join(parts) + "\n")
    return path


def load_inputs(paths):
    """Sort report inputs into run CSVs, ablation CSVs and a stream file.

    Directories are searched for ``ablation.csv``, ``run_*.csv`` and
    ``streams.txt``.
    """
    from ..streamgen import read_stream

    runs, ablation, videos = {}, {}, None
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob("ablation.csv")) + sorted(p.glob("run_*.csv")) + sorted(p.glob("streams*.txt"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(p)
    for f in files:
        if f.suffix == ".txt":
            videos = read_stream(f)
            continue
        with f.open() as fh:
            head = fh.readline()
        if head.startswith("arm,"):
            ablation.update(read_ablation_csv(f))
        elif head.startswith("video_id,"):
            runs[f.stem] = RunReport.read_csv(f, f.stem)
        else:
            raise ValueError(f"{f}: not a run or ablation CSV")
    return runs, ablation, videos
