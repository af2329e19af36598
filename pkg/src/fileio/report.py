"""CSV・gnuplot・テキストのレポート出力

列の順序は出力形式の一部。実行時間はCSVに入れないので、同じ実行はバイト単位で一致する。
"""

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from src.errors import IoError
from src.schemas import AblationRow, RunReport, TraceRow

TRACE_COLUMNS = [
    "iteration",
    "cost",
    "ate",
    "mean_flow_error",
    "corrupted_restored",
    "edge_mask_ratio",
    "node_mask_ratio",
    "mask_ratio",
    "geo_inlier_ratio",
    "damping_exhausted",
]

ABLATION_COLUMNS = ["bi_ba", "m_node", "m_edge", "runs", "ate", "accuracy", "completion", "chamfer"]


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def render_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    return buffer.getvalue()


def write_trace_csv(rows: Sequence[TraceRow], path: str | Path) -> None:
    _write_text(Path(path), render_csv((r.model_dump() for r in rows), TRACE_COLUMNS))


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    _write_text(Path(path), render_csv((r.model_dump() for r in rows), ABLATION_COLUMNS))


def write_gnuplot(rows: Sequence[TraceRow], path: str | Path, columns: Sequence[str] = TRACE_COLUMNS) -> None:
    """Whitespace-separated columns with a commented header (``plot 'trace.dat' u 1:3``)."""
    lines = ["# " + " ".join(columns)]
    for row in rows:
        data = row.model_dump()
        lines.append(" ".join(format_value(data[c]) for c in columns))
    _write_text(Path(path), "\n".join(lines) + "\n")


def render_summary(report: RunReport) -> str:
    m = report.metrics
    lines = [
        f"experiment: {report.name}",
        f"iterations: {len(report.trace)}",
        "",
        "final metrics:",
        f"  ate          {m.ate:.6g} m",
        f"  auc          {m.auc:.4g}",
        f"  accuracy     {m.accuracy:.6g} m",
        f"  completion   {m.completion:.6g} m",
        f"  chamfer      {m.chamfer:.6g} m",
        f"  depth_error  {m.depth_error:.6g}",
        "",
        "timings (ms):",
    ]
    lines += [f"  {name:<16} {ms:.1f}" for name, ms in sorted(report.timings_ms.items())]
    lines += ["", "config:", json.dumps(report.config.model_dump(mode="json"), indent=2, sort_keys=True)]
    return "\n".join(lines) + "\n"


def write_summary(report: RunReport, path: str | Path) -> None:
    _write_text(Path(path), render_summary(report))
