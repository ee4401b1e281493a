import json
import logging
import os
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from tabulate import tabulate

from carechain.schemas import AttackPoint, ComparativeReport, MetricsReport, ThroughputResult

logger = logging.getLogger(__name__)


def _fmt(value: Optional[float], digits: int = 1, suffix: str = "") -> str:
    if value is None:
        return "n/a"
    return f"{value:.{digits}f}{suffix}"


def _write_json(data, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


def metrics_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        lat = r.alert_latency_ms
        acc_lat = r.access_latency_ms
        rows.append({
            "scenario": r.scenario_id,
            "architecture": r.architecture.value,
            "latency_mean_ms": lat.mean if lat else None,
            "latency_p50_ms": lat.p50 if lat else None,
            "latency_p95_ms": lat.p95 if lat else None,
            "episodes": r.episodes,
            "detected": r.episodes_detected,
            "missed": r.episodes_missed,
            "other_alerts": r.other_alerts,
            "notifications": r.notifications,
            "throughput_tps": r.throughput_tps,
            "committed_txs": r.committed_txs,
            "blocks": r.blocks,
            "energy_j": r.energy_total_j,
            "permits": r.access.permits,
            "denies": r.access.denies,
            "violations": r.access.violations,
            "access_latency_ms": acc_lat.mean if acc_lat else None,
            "model_accuracy": r.model_accuracy,
            "epsilon_spent": r.epsilon_spent,
        })
    return pd.DataFrame(rows)


def energy_frame(report: MetricsReport) -> pd.DataFrame:
    df = pd.DataFrame(sorted(report.energy_j.items()), columns=["node", "energy_j"])
    return df


def write_run_report(report: MetricsReport, output_dir: str) -> Dict[str, str]:
    """Writes metrics.json, metrics.csv and energy.csv for one run; returns the paths written."""
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "json": os.path.join(output_dir, "metrics.json"),
        "csv": os.path.join(output_dir, "metrics.csv"),
        "energy": os.path.join(output_dir, "energy.csv"),
    }
    _write_json(report.model_dump(mode="json"), paths["json"])
    metrics_frame([report]).to_csv(paths["csv"], index=False)
    energy_frame(report).to_csv(paths["energy"], index=False)
    for p in paths.values():
        logger.info(f"Wrote {p}")
    return paths


def print_run_summary(report: MetricsReport) -> None:
    df = metrics_frame([report]).T.reset_index()
    df.columns = ["metric", "value"]
    print(tabulate(df, headers="keys", tablefmt="psql", showindex=False))


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


def comparative_frame(report: ComparativeReport) -> pd.DataFrame:
    return pd.DataFrame([{
        "architecture": row.architecture.value,
        "latency_ms": row.latency_ms,
        "throughput_tps": row.throughput_tps,
        "energy_j": row.energy_j,
        "latency_reduction_pct": row.latency_reduction_pct,
        "tps_improvement_pct": row.tps_improvement_pct,
        "energy_reduction_pct": row.energy_reduction_pct,
        "data_privacy": row.data_privacy,
        "security": row.security,
    } for row in report.rows])


def comparative_markdown(report: ComparativeReport) -> str:
    """Metric-per-row table with one column per architecture, plus the ratios against the baseline."""
    archs = [row.architecture.value for row in report.rows]
    lines = [
        ["Transaction Latency"] + [_fmt(r.latency_ms, 0, " ms") for r in report.rows],
        ["Throughput (TPS)"] + [_fmt(r.throughput_tps, 0, " TPS") for r in report.rows],
        ["Energy"] + [_fmt(r.energy_j, 1, " J") for r in report.rows],
        [f"Latency reduction vs {report.baseline.value}"] + [_fmt(r.latency_reduction_pct, 1, "%") for r in report.rows],
        [f"TPS improvement vs {report.baseline.value}"] + [_fmt(r.tps_improvement_pct, 1, "%") for r in report.rows],
        [f"Energy reduction vs {report.baseline.value}"] + [_fmt(r.energy_reduction_pct, 1, "%") for r in report.rows],
        ["Data Privacy Protection"] + [r.data_privacy for r in report.rows],
        ["Security Against Attacks"] + [r.security for r in report.rows],
    ]
    return tabulate(lines, headers=["Metric"] + archs, tablefmt="github") + "\n"


def plot_comparison(report: ComparativeReport, path: str) -> None:
    df = comparative_frame(report)
    plt.style.use('seaborn-v0_8-whitegrid')
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    panels = [("latency_ms", "Alert latency (ms)"), ("throughput_tps", "Sustained TPS"), ("energy_j", "Energy (J)")]
    for ax, (column, title) in zip(axes, panels):
        values = df[column].fillna(0.0)
        ax.bar(df["architecture"], values, edgecolor='black', color='skyblue')
        ax.set_title(title)
        for i, v in enumerate(values):
            ax.text(i, v, f"{v:.0f}", ha='center', va='bottom', fontsize=8)
    plt.tight_layout()
    plt.savefig(path, dpi=300)
    plt.close(fig)
    logger.info(f"Comparison plot saved to {path}")


def write_comparison(report: ComparativeReport, metrics: Sequence[MetricsReport],
                     throughput: Sequence[ThroughputResult], output_dir: str, plot: bool = False) -> Dict[str, str]:
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "markdown": os.path.join(output_dir, "comparison.md"),
        "csv": os.path.join(output_dir, "comparison.csv"),
        "json": os.path.join(output_dir, "comparison.json"),
        "metrics": os.path.join(output_dir, "metrics.csv"),
    }
    with open(paths["markdown"], "w", encoding="utf-8") as f:
        f.write(comparative_markdown(report))
    comparative_frame(report).to_csv(paths["csv"], index=False)
    _write_json({
        "comparison": report.model_dump(mode="json"),
        "metrics": [m.model_dump(mode="json") for m in metrics],
        "throughput": [t.model_dump(mode="json") for t in throughput],
    }, paths["json"])
    metrics_frame(metrics).to_csv(paths["metrics"], index=False)
    if plot:
        paths["plot"] = os.path.join(output_dir, "comparison.png")
        plot_comparison(report, paths["plot"])
    for p in paths.values():
        logger.info(f"Wrote {p}")
    return paths


def print_comparison(report: ComparativeReport) -> None:
    df = comparative_frame(report).drop(columns=["data_privacy", "security"])
    print(tabulate(df, headers='keys', tablefmt='psql', floatfmt=".2f", showindex=False))


# ---------------------------------------------------------------------------
# Throughput and attack evaluation
# ---------------------------------------------------------------------------


def throughput_frame(results: Sequence[ThroughputResult]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(mode="json") for r in results])


def attack_frame(points: Sequence[AttackPoint]) -> pd.DataFrame:
    df = pd.DataFrame([p.model_dump(mode="json") for p in points])
    df["epsilon"] = ["off" if p.epsilon is None else f"{p.epsilon:g}" for p in points]
    return df


def write_table(df: pd.DataFrame, output_dir: str, stem: str) -> List[str]:
    """CSV and JSON copies of a result table."""
    os.makedirs(output_dir, exist_ok=True)
    csv_path = os.path.join(output_dir, f"{stem}.csv")
    json_path = os.path.join(output_dir, f"{stem}.json")
    df.to_csv(csv_path, index=False)
    _write_json(json.loads(df.to_json(orient="records")), json_path)
    logger.info(f"Wrote {csv_path} and {json_path}")
    return [csv_path, json_path]


def print_table(df: pd.DataFrame) -> None:
    print(tabulate(df, headers='keys', tablefmt='psql', floatfmt=".4f", showindex=False))
