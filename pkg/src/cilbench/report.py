"""Tables and figures from run records.

Everything here is a pure function of a list of ``RunRecord`` so that
``cilbench report`` and ``cilbench run`` emit identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from statistics import mean

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import datagen  # noqa: E402
from .protocol import METRICS, AggregateReport, RunRecord, aggregate, method_rank  # noqa: E402

FIG1_METHODS = ("cumulative", "replay")
FIG2_METHODS = ("cumulative", "replay", "gem")

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def table1_csv(rep: AggregateReport) -> str:
    header = ["method"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    header.append("runs")
    rows = []
    for method, row in rep.table1.items():
        line = [method]
        for m in METRICS:
            mu, sd, _ = row[m]
            line += [_fmt(mu), _fmt(sd)]
        line.append(row["acc_all"][2])
        rows.append(line)
    return _csv(rows, header)


def table2_csv(rep: AggregateReport) -> str:
    rows = []
    for pair, t in rep.table2.items():
        for cls in t["p1"]:
            rows.append([rep.detail_method, pair, cls, _fmt(t["p1"][cls]), _fmt(t["p2"][cls]), _fmt(t["loss"][cls])])
    return _csv(rows, ["method", "d1_pair", "class", "after_p1", "after_p2", "loss"])


def table3_csv(rep: AggregateReport) -> str:
    rows = []
    for pair, t in rep.table3.items():
        for cls in t["as_d1"]:
            rows.append([rep.detail_method, pair, cls, _fmt(t["as_d1"][cls]), _fmt(t["as_d2"][cls]), _fmt(t["diff"][cls])])
    return _csv(rows, ["method", "pair", "class", "as_d1", "as_d2", "difference"])


def _by_cell(records, methods):
    """(method, stream, n) -> mean of each metric over repeats."""
    cells = {}
    for r in records:
        if r.method in methods:
            cells.setdefault((r.method, r.stream, r.n), []).append(r)
    out = {}
    for key, rs in cells.items():
        out[key] = {m: (None if getattr(rs[0], m) is None else mean(getattr(r, m) for r in rs)) for m in METRICS}
    return out


def _stream_order():
    return [s.name for s in datagen.make_streams()]


def fig1_rows(records):
    cells = _by_cell(records, FIG1_METHODS)
    order = _stream_order()
    keys = sorted(cells, key=lambda k: (order.index(k[1]), k[2], method_rank(k[0])))
    return [[s, n, m] + [_fmt(cells[(m, s, n)][k]) for k in METRICS] for m, s, n in keys]


def fig2_rows(records):
    cells = _by_cell(records, FIG2_METHODS)
    order = _stream_order()
    keys = sorted(cells, key=lambda k: (order.index(k[1]), method_rank(k[0]), k[2]))
    return [[s, m, n, _fmt(cells[(m, s, n)]["acc_all"])] for m, s, n in keys]


def fig1_csv(records):
    return _csv(fig1_rows(records), ["stream", "n", "method", *METRICS])


def fig2_csv(records):
    return _csv(fig2_rows(records), ["stream", "method", "n", "acc_all"])


# -- plain text ----------------------------------------------------------------------


def _align(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_table1(rep: AggregateReport) -> str:
    rows = [["method", "D1 after p1", "D1 after p2", "D2 after p2", "all", "runs"]]
    for method, row in rep.table1.items():
        cells = [method]
        for m in METRICS:
            mu, sd, _ = row[m]
            cells.append("N/A" if mu is None else f"{mu:.3f} ({sd:.3f})")
        cells.append(str(row["acc_all"][2]))
        rows.append(cells)
    return _align(rows)


def format_table2(rep: AggregateReport) -> str:
    rows = [["D1 pair", "class", "after p1", "after p2", "loss"]]
    for pair, t in rep.table2.items():
        for cls in t["p1"]:
            rows.append([pair, cls, f"{t['p1'][cls]:.3f}", f"{t['p2'][cls]:.3f}", f"{t['loss'][cls]:+.3f}"])
    return _align(rows) if len(rows) > 1 else ""


def format_table3(rep: AggregateReport) -> str:
    rows = [["pair", "class", "as D1", "as D2", "difference"]]
    for pair, t in rep.table3.items():
        for cls in t["as_d1"]:
            rows.append([pair, cls, f"{t['as_d1'][cls]:.3f}", f"{t['as_d2'][cls]:.3f}", f"{t['diff'][cls]:+.3f}"])
    return _align(rows) if len(rows) > 1 else ""


# -- figures -------------------------------------------------------------------------


def plot_fig1(records, path):
    """Final 4-way accuracy against train size, one panel per stream."""
    cells = _by_cell(records, FIG1_METHODS)
    methods = [m for m in FIG1_METHODS if any(k[0] == m for k in cells)]
    if not methods:
        return False
    streams = [s for s in _stream_order() if any(k[1] == s for k in cells)]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(9, 5), sharex=True, sharey=True, squeeze=False)
        for ax, stream in zip(axes.flat, streams):
            for m in methods:
                pts = sorted((k[2], v["acc_all"]) for k, v in cells.items() if k[0] == m and k[1] == stream)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, lw=1, label=m)
            ax.set_title(stream.replace("_", " then "), fontsize=8)
            ax.set_ylim(0, 1)
        for ax in axes.flat[len(streams):]:
            ax.set_visible(False)
        for ax in axes[-1]:
            ax.set_xlabel("train size per class")
        for ax in axes[:, 0]:
            ax.set_ylabel("accuracy, all classes")
        axes.flat[0].legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return True


def plot_fig2(records, path):
    """Spread of final accuracy over train sizes, grouped by stream."""
    cells = _by_cell(records, FIG2_METHODS)
    methods = [m for m in FIG2_METHODS if any(k[0] == m for k in cells)]
    if not methods:
        return False
    streams = [s for s in _stream_order() if any(k[1] == s for k in cells)]
    width = 0.8 / len(methods)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(9, 3.5))
        for j, m in enumerate(methods):
            data = [[v["acc_all"] for k, v in cells.items() if k[0] == m and k[1] == s] for s in streams]
            pos = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(streams))]
            bp = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True, manage_ticks=False)
            colour = f"C{j}"
            for box in bp["boxes"]:
                box.set(facecolor=colour, alpha=0.5)
            ax.plot([], [], color=colour, lw=6, alpha=0.5, label=m)
        ax.set_xticks(range(len(streams)))
        ax.set_xticklabels([s.replace("_", "\nthen ") for s in streams], fontsize=7)
        ax.set_ylabel("accuracy, all classes")
        ax.legend(ncol=len(methods), loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return True


def write_all(records: list[RunRecord], out_dir, figures=True, detail_method="replay"):
    """Write every table and figure into ``out_dir``; returns (report, written paths)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = aggregate(records, detail_method)
    files = {
        "table1.csv": table1_csv(rep),
        "table2.csv": table2_csv(rep),
        "table3.csv": table3_csv(rep),
        "table1.txt": format_table1(rep),
        "table2.txt": format_table2(rep),
        "table3.txt": format_table3(rep),
        "fig1.csv": fig1_csv(records),
        "fig2.csv": fig2_csv(records),
    }
    written = []
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
        written.append(out / name)
    if figures:
        for name, fn in (("fig1.png", plot_fig1), ("fig2.png", plot_fig2)):
            if fn(records, out / name):
                written.append(out / name)
    return rep, written
