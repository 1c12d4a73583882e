"""Metrics and report emission: metrics.csv, summary.json, prompts.tsv,
params.json, and rendered figures next to the delimited output."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import RunConfig  # noqa: E402
from .continual import MetricsRecord, PromptPool, forgetting  # noqa: E402
from .factors import param_count  # noqa: E402

CSV_HEADER = ["stage", "task", "direction", "identity_mode", "R1", "R5", "R10"]


def metrics_to_csv(records: list) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=lambda r: (r.stage, r.task, r.direction)):
        w.writerow([r.stage, r.task, r.direction, r.identity_mode,
                    f"{r.r1:.6f}", f"{r.r5:.6f}", f"{r.r10:.6f}"])
    return out.getvalue()


def metrics_from_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"metrics.csv: unexpected header {rows[0] if rows else '(empty)'}")
    return [MetricsRecord(stage=int(s), task=int(t), direction=d, identity_mode=m,
                          r1=float(r1), r5=float(r5), r10=float(r10))
            for s, t, d, m, r1, r5, r10 in rows[1:]]


def _check_complete(records: list) -> int:
    """Every task j must be evaluated at every stage >= j+1."""
    final = max(r.stage for r in records)
    seen = {(r.stage, r.task, r.direction) for r in records}
    gaps = [(s, j, d)
            for j in range(final)
            for s in range(j + 1, final + 1)
            for d in ("i2t", "t2i")
            if (s, j, d) not in seen]
    if gaps:
        raise ValueError(f"metrics history has gaps: {gaps[:8]}"
                         + (" ..." if len(gaps) > 8 else ""))
    return final


def summarize(records: list) -> dict:
    """Per-task final recalls, F@K, and Forgetting, plus per-direction averages."""
    final = _check_complete(records)
    summary = {"final_stage": final, "directions": {}}
    for direction in ("i2t", "t2i"):
        per_task = []
        for j in range(final):
            hist = [r for r in records if r.task == j and r.direction == direction]
            fk, avg = forgetting(hist)
            last = max(hist, key=lambda r: r.stage)
            per_task.append({
                "task": j,
                "R1": last.r1, "R5": last.r5, "R10": last.r10,
                "F1": fk[1], "F5": fk[5], "F10": fk[10],
                "forgetting": avg,
            })
        n = len(per_task)
        avg_row = {key: sum(t[key] for t in per_task) / n
                   for key in ("R1", "R5", "R10", "F1", "F5", "F10", "forgetting")}
        summary["directions"][direction] = {"tasks": per_task, "average": avg_row}
    return summary


def prompts_tsv(pool: PromptPool) -> str:
    """Flattened per-task prompt vectors with task labels (for external
    embedding visualizations)."""
    lines = []
    for entry in pool.entries:
        ps = entry.prompt_set
        for modality, t in (("vision", ps.vision_prompts()),
                            ("text", ps.text_prompts())):
            vec = "\t".join(f"{x:.10g}" for x in t.data.reshape(-1))
            lines.append(f"{ps.task_id}\t{modality}\t{vec}")
    return "\n".join(lines) + "\n"


def params_json(cfg: RunConfig, n_tasks: int) -> dict:
    b = cfg.backbone
    out = {"dims": {"depth": b.depth, "prompt_len": b.prompt_len,
                    "d_v": b.d_v, "d_l": b.d_l, "rank": cfg.prompt_rank},
           "per_task": {}, "total": {}}
    for key, variant, fusion in (("cp", "cp", False), ("dp", "dp", False),
                                 ("cp+fusion", "cp", True), ("dp+fusion", "dp", True)):
        n = param_count(b.depth, b.prompt_len, b.d_v, b.d_l, cfg.prompt_rank,
                        variant, with_fusion=fusion, fusion_rank=cfg.interaction_rank)
        out["per_task"][key] = n
        out["total"][key] = n * n_tasks
    out["compression"] = out["per_task"]["cp"] / out["per_task"]["dp"]
    return out


def render_figures(records: list, out_dir: Path) -> list:
    """Recall-vs-stage curves and a final forgetting bar chart."""
    final = max(r.stage for r in records)
    written = []
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, direction in zip(axes, ("i2t", "t2i")):
        for j in range(final):
            hist = sorted((r for r in records
                           if r.task == j and r.direction == direction),
                          key=lambda r: r.stage)
            ax.plot([r.stage for r in hist], [r.r1 for r in hist],
                    marker="o", label=f"task {j}")
        ax.set_title(f"R@1 per stage ({direction})")
        ax.set_xlabel("stage")
        ax.set_ylabel("R@1 (%)")
        ax.set_ylim(0, 105)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "recall_per_stage.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    summary = summarize(records)
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.35
    for off, direction in ((-width / 2, "i2t"), (width / 2, "t2i")):
        tasks = summary["directions"][direction]["tasks"]
        ax.bar([t["task"] + off for t in tasks],
               [t["forgetting"] for t in tasks], width=width, label=direction)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("task")
    ax.set_ylabel("forgetting (avg of F@1, F@5, F@10)")
    ax.set_title("Forgetting per task")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "forgetting.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def emit_report(records: list, out_dir, pool: PromptPool = None,
                cfg: RunConfig = None, figures: bool = True) -> dict:
    """Write all report files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    (out / "metrics.csv").write_text(metrics_to_csv(records))
    paths["metrics"] = out / "metrics.csv"
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths["summary"] = out / "summary.json"
    if pool is not None:
        (out / "prompts.tsv").write_text(prompts_tsv(pool))
        paths["prompts"] = out / "prompts.tsv"
    if cfg is not None and pool is not None:
        pj = params_json(cfg, pool.count)
        (out / "params.json").write_text(json.dumps(pj, indent=2, sort_keys=True) + "\n")
        paths["params"] = out / "params.json"
    if figures:
        for p in render_figures(records, out):
            paths[p.stem] = p
    return paths
