"""CSV and SVG outputs of closed-loop runs."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from deepmpc.harness.runner import AgentRunRecord, MetricsReport

RUN_HEADER = ("t", "delta_deg", "p_degps", "delta_ref_deg", "p_ref_degps", "u_m", "u_a",
              "u_total", "V_m", "lemma3_resid", "in_X", "in_U")
SUMMARY_HEADER = ("controller", "agent", "state", "median_mse", "min_mse", "max_mse")


def record_columns(rec: AgentRunRecord) -> dict:
    """Columns of the per-run CSV, states converted to degrees."""
    deg = np.degrees
    return {
        "t": rec.t.astype(int),
        "delta_deg": deg(rec.x[:, 0]) if len(rec) else np.zeros(0),
        "p_degps": deg(rec.x[:, 1]) if len(rec) else np.zeros(0),
        "delta_ref_deg": deg(rec.x_ref[:, 0]) if len(rec) else np.zeros(0),
        "p_ref_degps": deg(rec.x_ref[:, 1]) if len(rec) else np.zeros(0),
        "u_m": rec.u_m[:, 0] if len(rec) else np.zeros(0),
        "u_a": rec.u_a[:, 0] if len(rec) else np.zeros(0),
        "u_total": rec.u_total[:, 0] if len(rec) else np.zeros(0),
        "V_m": rec.V_m,
        "lemma3_resid": rec.lemma3_resid,
        "in_X": rec.in_X.astype(bool),
        "in_U": rec.in_U.astype(bool),
    }


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_run_csv(rec: AgentRunRecord, path) -> Path:
    path = Path(path)
    cols = record_columns(rec)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUN_HEADER)
            for i in range(len(rec)):
                w.writerow([_fmt(cols[k][i]) for k in RUN_HEADER])
    except OSError as exc:
        raise OSError(f"cannot write run CSV {path}: {exc}") from exc
    return path


def read_run_csv(path) -> dict:
    """Parse a per-run CSV back into the columns of :func:`record_columns`."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = tuple(rows[0]), rows[1:]
    if header != RUN_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        if name == "t":
            out[name] = np.array([int(v) for v in vals], dtype=int)
        elif name in ("in_X", "in_U"):
            out[name] = np.array([v == "1" for v in vals], dtype=bool)
        else:
            out[name] = np.array([float(v) for v in vals], dtype=float)
    return out


def write_summary_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for row in report.table():
                w.writerow([_fmt(row[k]) if k not in ("controller", "state") else row[k]
                            for k in SUMMARY_HEADER])
    except OSError as exc:
        raise OSError(f"cannot write summary CSV {path}: {exc}") from exc
    return path


ANGLE_LABEL = "Roll angle (deg.)"
RATE_LABEL = "Roll rate (deg./sec.)"
TIME_LABEL = "Time steps"


def plot_agent(records: list[AgentRunRecord], path, title: str = ""):
    """Roll angle and roll rate against time, one line per controller.

    Returns the matplotlib figure after saving it as SVG.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "deepmpc"
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    if records:
        axes[0].plot(records[0].t, np.degrees(records[0].x_ref[:, 0]), "k--", label="reference")
        axes[1].plot(records[0].t, np.degrees(records[0].x_ref[:, 1]), "k--", label="reference")
    for rec in records:
        axes[0].plot(rec.t, np.degrees(rec.x[:, 0]), label=rec.controller)
        axes[1].plot(rec.t, np.degrees(rec.x[:, 1]), label=rec.controller)
    axes[0].set_ylabel(ANGLE_LABEL)
    axes[1].set_ylabel(RATE_LABEL)
    axes[1].set_xlabel(TIME_LABEL)
    axes[0].legend(loc="upper right")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"cannot write plot {path}: {exc}") from exc
    plt.close(fig)
    return fig


def run_csv_name(rec: AgentRunRecord) -> str:
    return f"run_{rec.controller}_agent{rec.agent + 1}_seed{rec.seed}.csv"


def emit_outputs(records, report: MetricsReport | None, out_dir, plots: bool = True) -> list[Path]:
    """Write one CSV per record, the summary table and per-agent plots."""
    out_dir = Path(out_dir)
    written = [write_run_csv(r, out_dir / run_csv_name(r)) for r in records]
    if report is not None:
        written.append(write_summary_csv(report, out_dir / "summary.csv"))
    if plots:
        by_key = {}
        for r in records:
            by_key.setdefault((r.agent, r.seed), []).append(r)
        for (agent, seed), recs in sorted(by_key.items()):
            p = out_dir / f"agent{agent + 1}_seed{seed}.svg"
            plot_agent(recs, p, title=f"Agent {agent + 1}, seed {seed}")
            written.append(p)
    return written
