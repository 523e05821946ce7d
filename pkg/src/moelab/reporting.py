"""Plot-ready artifacts for training runs: CSV curves, SVG charts, config echo.

Every emitter here is deterministic: rerunning with the same reports
produces byte-identical files.  For the SVG charts that means a fixed
hash salt (element ids), glyphs rendered as paths, and no timestamp
metadata.  Numbers are written with Python's shortest round-trip float
repr, so the CSV is both exact and stable.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .train_harness import RunReport

_DIAGNOSTIC_KEYS = ("drop_ratio", "experts_per_sequence", "load_cv", "budget_used")

_RC = {
    "svg.hashsalt": "moelab",
    "svg.fonttype": "path",
    "figure.dpi": 100,
    "path.simplify": False,
}


def _as_labeled(reports: RunReport | dict[str, RunReport]) -> dict[str, RunReport]:
    if isinstance(reports, RunReport):
        return {reports.mode: reports}
    if not reports:
        raise ValueError("no reports to emit")
    return dict(reports)


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="")
    return path


def _line_chart(path: Path, series: dict[str, list[float]], ylabel: str) -> Path:
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for label, values in series.items():
            ax.plot(range(len(values)), values, label=label, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def emit_plots(
    reports: RunReport | dict[str, RunReport],
    out_dir: str | Path,
    resolved_config: dict | None = None,
) -> list[Path]:
    """Write curves, charts, and the self-describing config echo to a directory.

    Emits ``losses.csv`` (one aligned column per labeled run), a long-format
    ``diagnostics.csv``, one SVG line chart per curve family, each run's
    JSON report, and ``resolved_config.json`` stamping the seed, version,
    and fully-resolved configuration.  Returns the written paths.
    """
    labeled = _as_labeled(reports)
    steps = {label: len(r.train_losses) for label, r in labeled.items()}
    if len(set(steps.values())) != 1:
        raise ValueError(f"runs have unequal step counts, cannot align columns: {steps}")
    num_steps = next(iter(steps.values()))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    labels = list(labeled)
    rows = [["step", *labels]]
    for s in range(num_steps):
        rows.append([str(s), *(repr(labeled[lab].train_losses[s]) for lab in labels)])
    buf = []
    writer = csv.writer(_ListWriter(buf), lineterminator="\n")
    writer.writerows(rows)
    written.append(_write_text(out / "losses.csv", "".join(buf)))

    rows = [["step", "run", *_DIAGNOSTIC_KEYS]]
    for lab in labels:
        diag = labeled[lab].diagnostics
        for s in range(num_steps):
            rows.append([str(s), lab, *(repr(diag[k][s]) for k in _DIAGNOSTIC_KEYS)])
    buf = []
    writer = csv.writer(_ListWriter(buf), lineterminator="\n")
    writer.writerows(rows)
    written.append(_write_text(out / "diagnostics.csv", "".join(buf)))

    written.append(
        _line_chart(
            out / "losses.svg",
            {lab: labeled[lab].train_losses for lab in labels},
            "training loss",
        )
    )
    for key in _DIAGNOSTIC_KEYS:
        written.append(
            _line_chart(
                out / f"{key}.svg",
                {lab: labeled[lab].diagnostics[key] for lab in labels},
                key.replace("_", " "),
            )
        )

    for lab in labels:
        written.append(_write_text(out / f"report_{lab}.json", labeled[lab].to_json()))

    stamp = {
        "version": labeled[labels[0]].version,
        "runs": {lab: labeled[lab].config for lab in labels},
        "seeds": {lab: labeled[lab].seed for lab in labels},
    }
    if resolved_config is not None:
        stamp["invocation"] = resolved_config
    written.append(
        _write_text(
            out / "resolved_config.json", json.dumps(stamp, sort_keys=True, indent=1) + "\n"
        )
    )
    return written


class _ListWriter:
    """File-like shim so csv can write into a string list."""

    def __init__(self, sink: list[str]):
        self.sink = sink

    def write(self, chunk: str) -> None:
        self.sink.append(chunk)
