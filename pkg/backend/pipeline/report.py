"""
Diversity report: the table of mean distances per method, its provenance,
and the JSON / CSV / figure renderings written into a run directory
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from backend.diversity_metrics import ROW_FIELDS, MetricRow

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
REPORT_FIGURE = "report.png"


class ReportError(ValueError):
    """Raised when a run directory holds no readable report"""


@dataclass
class DiversityReport:
    rows: List[MetricRow] = field(default_factory=list)
    layer: Optional[int] = None
    channels: int = 0
    children: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    channel_distances: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    def methods(self) -> List[str]:
        seen: List[str] = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def value(self, method: str, metric: str) -> MetricRow:
        for row in self.rows:
            if row.method == method and row.metric == metric:
                return row
        raise KeyError(f"No {metric} row for method {method}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": [dict(zip(ROW_FIELDS, row.as_list())) for row in self.rows],
            "layer": self.layer,
            "channels": self.channels,
            "children": self.children,
            "channel_distances": self.channel_distances,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiversityReport":
        rows = [MetricRow(**{key: row[key] for key in ROW_FIELDS}) for row in data.get("rows", [])]
        return cls(rows=rows, layer=data.get("layer"), channels=data.get("channels", 0),
                   children=data.get("children", {}),
                   channel_distances=data.get("channel_distances", {}),
                   provenance=data.get("provenance", {}))


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ROW_FIELDS)
    for row in rows:
        writer.writerow([row.method, row.metric, repr(float(row.mean)), repr(float(row.stderr)),
                         int(row.n)])
    return buffer.getvalue()


def rows_from_csv(text: str) -> List[MetricRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [MetricRow(r["method"], r["metric"], float(r["mean"]), float(r["stderr"]), int(r["n"]))
            for r in reader]


def write_rows(rows: Sequence[MetricRow], path: Union[str, Path]) -> Path:
    """JSON list of row objects, or CSV when the path ends in .csv"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".csv":
        path.write_text(rows_to_csv(rows), encoding="utf-8")
    else:
        payload = [dict(zip(ROW_FIELDS, row.as_list())) for row in rows]
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def report_to_json(report: DiversityReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def load_report(run_dir: Union[str, Path]) -> DiversityReport:
    path = Path(run_dir)
    if path.is_dir():
        path = path / REPORT_JSON
    try:
        with open(path, "r", encoding="utf-8") as f:
            return DiversityReport.from_dict(json.load(f))
    except FileNotFoundError as e:
        raise ReportError(f"No report at {path}; run the pipeline first") from e
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ReportError(f"{path}: malformed report: {e}") from e


def plot_report(report: DiversityReport, path: Union[str, Path],
                prefix: str = "viz_") -> Optional[Path]:
    """Grouped bar chart of mean distances (with standard errors) per method"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    metrics = []
    for row in report.rows:
        if row.metric.startswith(prefix) and row.metric not in metrics:
            metrics.append(row.metric)
    methods = [m for m in report.methods()
               if any(r.method == m and r.metric in metrics for r in report.rows)]
    if not metrics or not methods:
        logger.warning(f"No {prefix}* rows to plot")
        return None

    x = np.arange(len(metrics))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.4 * len(metrics) + 2, 3.5))
    for i, method in enumerate(methods):
        means, errors = [], []
        for metric in metrics:
            try:
                row = report.value(method, metric)
                means.append(row.mean)
                errors.append(row.stderr)
            except KeyError:
                means.append(0.0)
                errors.append(0.0)
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, means, width, yerr=errors, capsize=3,
               label=method)
    ax.set_xticks(x)
    ax.set_xticklabels([m[len(prefix):] for m in metrics])
    ax.set_ylabel("mean Hamming distance")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def report_render(report: DiversityReport, out_dir: Union[str, Path],
                  figure: bool = True) -> Dict[str, Path]:
    """Write report.json, report.csv and (optionally) report.png into out_dir"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {
        "json": out_dir / REPORT_JSON,
        "csv": out_dir / REPORT_CSV,
    }
    written["json"].write_text(report_to_json(report), encoding="utf-8")
    written["csv"].write_text(rows_to_csv(report.rows), encoding="utf-8")
    if figure:
        plotted = plot_report(report, out_dir / REPORT_FIGURE)
        if plotted is not None:
            written["figure"] = plotted
    logger.info(f"Rendered report with {len(report.rows)} rows into {out_dir}")
    return written
