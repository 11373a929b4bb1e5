"""Static figures (PNG) with their data (CSV) for records and analysis reports."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

PLOT_KINDS = ("fewshot", "cka", "landscape", "accuracy")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_label(record: dict) -> str:
    cfg = record["config"]
    return f"{cfg['paradigm']}/{cfg['strategy']}"


def _require_complete(record: dict) -> None:
    if "summary" not in record or "config" not in record:
        raise ValueError("record is missing its config or summary")
    if record["summary"].get("accuracy_mean") is None:
        raise ValueError(f"record {run_label(record)} has no completed trial")


def _fewshot(records: list[dict], out: Path) -> list[Path]:
    rows = []
    for r in records:
        _require_complete(r)
        if r.get("cap") is None:
            raise ValueError("few-shot records must carry a per-task cap")
        s = r["summary"]
        rows.append([run_label(r), int(r["cap"]), s["accuracy_mean"], s["accuracy_std"]])
    rows.sort(key=lambda row: (row[0], row[1]))
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label in sorted({row[0] for row in rows}):
        pts = [row for row in rows if row[0] == label]
        caps = [p[1] for p in pts]
        ax.errorbar(caps, [100 * p[2] for p in pts], yerr=[100 * p[3] for p in pts], marker="o", capsize=3,
                    label=label)
    ax.set_xscale("log")
    ax.set_xlabel("training instances per task")
    ax.set_ylabel("final average accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    png, data = out / "fewshot.png", out / "fewshot.csv"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    _write_csv(data, ["run", "cap", "accuracy_mean", "accuracy_std"], rows)
    return [png, data]


def _cka(reports: list[dict], out: Path) -> list[Path]:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for k, rep in enumerate(reports):
        blocks, scores = rep.get("blocks"), rep.get("scores")
        if not blocks or scores is None or len(blocks) != len(scores):
            raise ValueError("CKA report needs matching blocks and scores")
        label = rep.get("label", f"pair_{k}")
        ax.plot([b + 1 for b in blocks], scores, marker="o", label=label)
        rows += [[label, b, s] for b, s in zip(blocks, scores)]
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("block")
    ax.set_ylabel("linear CKA")
    ax.legend(fontsize=7)
    fig.tight_layout()
    png, data = out / "cka.png", out / "cka.csv"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    _write_csv(data, ["pair", "block", "cka"], rows)
    return [png, data]


def _landscape(grids: list, out: Path) -> list[Path]:
    plt = _pyplot()
    written = []
    for k, grid in enumerate(grids):
        label = getattr(grid, "label", None) or f"grid_{k}"
        losses = np.asarray(grid.losses)
        if losses.ndim != 2 or losses.shape[0] != len(grid.coords):
            raise ValueError("landscape grid is incomplete")
        fig, ax = plt.subplots(figsize=(4, 3.5))
        e = grid.extent
        im = ax.imshow(losses, origin="lower", extent=(-e, e, -e, e), cmap="viridis")
        ax.contour(grid.coords, grid.coords, losses, levels=12, colors="white", linewidths=0.4)
        ax.set_xlabel("direction 2")
        ax.set_ylabel("direction 1")
        ax.set_title(label, fontsize=8)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        png, data = out / f"landscape_{label}.png", out / f"landscape_{label}.csv"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        data.write_text(grid.to_csv())
        written += [png, data]
    return written


def _accuracy(records: list[dict], out: Path) -> list[Path]:
    plt = _pyplot()
    written = []
    for k, r in enumerate(records):
        _require_complete(r)
        ok = [t for t in r["trials"] if t["status"] == "ok"]
        mats = np.array([[[np.nan if v is None else v for v in row] for row in t["accuracy_matrix"]] for t in ok])
        mean = mats.mean(axis=0)
        label = f"{k}_{run_label(r).replace('/', '_')}"
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(mean, vmin=0, vmax=1, cmap="magma")
        ax.set_xlabel("evaluated task i")
        ax.set_ylabel("after task tau")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        png, data = out / f"accuracy_{label}.png", out / f"accuracy_{label}.csv"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        _write_csv(data, ["tau"] + [f"task_{i}" for i in range(len(mean))],
                   [[tau] + ["" if np.isnan(v) else repr(float(v)) for v in row] for tau, row in enumerate(mean)])
        written += [png, data]
    return written


def emit_plots(items: list, kind: str, out_dir) -> list[Path]:
    """Render one figure kind; returns the written files (PNG and CSV pairs).

    ``items`` are run records for ``fewshot``/``accuracy``, CKA report dicts
    for ``cka`` and LandscapeGrid objects for ``landscape``.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if not items:
        raise ValueError("nothing to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return {"fewshot": _fewshot, "cka": _cka, "landscape": _landscape, "accuracy": _accuracy}[kind](items, out)
