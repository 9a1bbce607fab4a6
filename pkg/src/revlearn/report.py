"""Tables, plot-ready series and the human-readable summary of a record."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .io import format_table, write_csv, write_json

logger = logging.getLogger(__name__)

MECHANISMS = ("mutation", "finetune", "rlae")


def expected_series(record: dict) -> list[str]:
    """Names of the series a complete record of this kind yields."""
    kind = record.get("kind")
    if kind == "elimination_sweep":
        return ["kl_vs_epsilon", "js_vs_epsilon"]
    if kind == "mutation_sweep":
        return [f"kl_vs_alpha_{tag}" for tag in record.get("spec", {}).get("scales") or []]
    if kind == "baseline_stability":
        return ["entropy_per_sprint"]
    if kind in ("rf_comparison", "scale_sweep"):
        return [f"rf_per_scale_{m}" for m in MECHANISMS]
    return []


@dataclass
class PlotSeries:
    name: str
    x: list
    y: list[float]
    y_err: list[float] | None = None
    axis_labels: tuple[str, str] = ("x", "y")

    def __post_init__(self):
        if len(self.x) != len(self.y) or (self.y_err is not None and len(self.y_err) != len(self.y)):
            raise ValueError(f"series {self.name}: x, y and y_err must have equal length")

    def rows(self):
        if self.y_err is None:
            return [[x, y] for x, y in zip(self.x, self.y)]
        return [[x, y, e] for x, y, e in zip(self.x, self.y, self.y_err)]

    @property
    def columns(self):
        return ["x", "y"] if self.y_err is None else ["x", "y", "y_err"]


def _n_seeds(record: dict) -> int:
    return len(record.get("spec", {}).get("seeds", []))


def _table(record: dict, name: str):
    tb = record.get("tables", {}).get(name)
    if not tb or not tb.get("rows"):
        return None
    return tb


def _elimination_series(record: dict, with_err: bool) -> list[PlotSeries]:
    tb = _table(record, "elimination")
    if tb is None:
        return []
    summary = record.get("summary", {})
    eps = [r[0] for r in tb["rows"]]
    out = []
    for i, metric in ((1, "kl"), (2, "js")):
        err = summary.get(f"{metric}_std") if with_err else None
        out.append(PlotSeries(f"{metric}_vs_epsilon", eps, [r[i] for r in tb["rows"]], err,
                              ("elimination rate", f"mean post-reset {metric.upper()} (nats)")))
    return out


def _mutation_series(record: dict, with_err: bool) -> list[PlotSeries]:
    tb = _table(record, "mutation")
    if tb is None:
        return []
    stds = {(s["scale_tag"], s["alpha"]): s["kl_std"] for s in record.get("summary", {}).get("std", [])}
    out = []
    for tag in dict.fromkeys(r[0] for r in tb["rows"]):
        rows = [r for r in tb["rows"] if r[0] == tag]
        err = [stds[(tag, r[1])] for r in rows] if with_err else None
        out.append(PlotSeries(f"kl_vs_alpha_{tag}", [r[1] for r in rows], [r[2] for r in rows], err,
                              ("mutation intensity alpha", "mean post-rollback KL (nats)")))
    return out


def _entropy_series(record: dict) -> list[PlotSeries]:
    tb = _table(record, "baseline_stability")
    if tb is None:
        return []
    # sprints re-run the same base model, so there is no seed spread to report
    return [PlotSeries("entropy_per_sprint", list(range(1, len(tb["rows"]) + 1)), [r[1] for r in tb["rows"]],
                       None, ("sprint", "mean baseline entropy (nats)"))]


def _rf_series(record: dict, with_err: bool) -> list[PlotSeries]:
    if record.get("kind") == "scale_sweep":
        tb = _table(record, "scale_sweep")
        if tb is None:
            return []
        detail = {(d["scale_tag"], d["mechanism"]): d["pct_std"] for d in record.get("summary", {}).get("detail", [])}
        points = [(r[0], r[1], r[2] / 100.0, detail.get((r[0], r[1]), 0.0) / 100.0) for r in tb["rows"]]
    else:
        tb = _table(record, "rf_comparison")
        if tb is None:
            return []
        tag = record["spec"]["model_config"]["scale_tag"]
        points = [(tag, r[0], r[2], None) for r in tb["rows"]]
        with_err = False
    out = []
    for mech in dict.fromkeys(p[1] for p in points):
        pts = [p for p in points if p[1] == mech]
        err = [p[3] for p in pts] if with_err else None
        out.append(PlotSeries(f"rf_per_scale_{mech}", [p[0] for p in pts], [p[2] for p in pts], err,
                              ("scale tag", "recoverability factor")))
    return out


def plot_series(record: dict) -> tuple[list[PlotSeries], list[str]]:
    """Series derivable from ``record`` and the names of expected series that are missing."""
    kind = record.get("kind")
    with_err = _n_seeds(record) > 1
    if kind == "elimination_sweep":
        series = _elimination_series(record, with_err)
    elif kind == "mutation_sweep":
        series = _mutation_series(record, with_err)
    elif kind == "baseline_stability":
        series = _entropy_series(record)
    elif kind in ("rf_comparison", "scale_sweep"):
        series = _rf_series(record, with_err)
    else:
        return [], [f"<unknown kind {kind!r}>"]
    present = {s.name for s in series}
    missing = [name for name in expected_series(record) if name not in present]
    return series, missing


def emit_plot_data(record: dict, out_dir) -> list[Path]:
    """Write one ``x,y[,y_err]`` CSV per series plus an index with axis labels."""
    out_dir = Path(out_dir)
    series, missing = plot_series(record)
    if missing:
        logger.warning("record is incomplete; missing plot series: %s", ", ".join(missing))
    paths = [write_csv(s.columns, s.rows(), out_dir / f"{s.name}.csv") for s in series]
    if series:
        index = {s.name: {"file": f"{s.name}.csv", "x_label": s.axis_labels[0], "y_label": s.axis_labels[1]}
                 for s in series}
        write_json(index, out_dir / "index.json")
    return paths


def emit_tables(record: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [write_csv(tb["columns"], tb["rows"], out_dir / f"{name}.csv")
            for name, tb in sorted(record.get("tables", {}).items())]


def _regimes(record: dict) -> list[str]:
    lines = []
    for frag in record.get("per_seed", []):
        rec = frag.get("recoverability")
        if rec is None:
            continue
        where = frag.get("scale_tag") or record["spec"]["model_config"]["scale_tag"]
        extra = f" alpha={frag['alpha']:.6g}" if "alpha" in frag else ""
        lines.append(f"  {frag['scenario']:<9} scale={where} seed={frag['seed']}{extra}: "
                     f"regime={rec['regime']} rf={rec['rf']:.6g}")
    return lines


def _ils_flags(record: dict) -> list[str]:
    lines = []
    for frag in record.get("per_seed", []):
        flags = frag.get("ils", {}).get("flags")
        if flags:
            where = frag.get("scale_tag") or record["spec"]["model_config"]["scale_tag"]
            lines.append(f"  {frag['scenario']} scale={where} seed={frag['seed']}: "
                         f"{len(flags)} prompt(s) above tau: {' '.join(flags)}")
    return lines


def render_report(record: dict) -> str:
    spec = record.get("spec", {})
    parts = [f"experiment: {record.get('kind')}", f"spec hash:  {record.get('spec_hash')}",
             f"seeds:      {', '.join(str(s) for s in spec.get('seeds', []))}"]
    for tag, base in sorted(record.get("baselines", {}).items()):
        parts.append(f"baseline {tag}: fingerprint {base['fingerprint'][:16]} "
                     f"mean entropy {base['entropy']['mean']:.6g}")
    for name, tb in sorted(record.get("tables", {}).items()):
        parts += ["", f"[{name}]", format_table(tb["columns"], tb["rows"])]
    summary = record.get("summary", {})
    if summary.get("epsilon_desk") is not None or record.get("kind") == "elimination_sweep":
        parts += ["", f"desk-scale exact threshold epsilon_desk: {summary.get('epsilon_desk')}"]
    regimes = _regimes(record)
    if regimes:
        parts += ["", "recovery regimes:"] + regimes
    flags = _ils_flags(record)
    parts += ["", "identity leakage flags:"] + (flags or ["  none"])
    return "\n".join(parts) + "\n"
