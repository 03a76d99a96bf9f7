"""
PSMT — Static charts

Figure builders (plotly) for:
  - loss vs iteration, one line per run (sup / con / total)
  - per-layer mean |grad| bars, Conf-CE next to MSE (grad_probe.json)
  - validation mIoU vs epoch, one line per run
  - mIoU vs labelled ratio, one line per arm (ablation.csv)

`save_figure` always writes HTML; PNG is added when kaleido is installed.
"""

from __future__ import annotations

import importlib.util
import json
import logging
from pathlib import Path
from typing import Sequence

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from src.config import GRAD_PROBE_FILE
from src.errors import ConfigError, DataError
from trainer.results import read_metrics

log = logging.getLogger(__name__)

_LAYOUT = dict(
    paper_bgcolor="#1a1a2e",
    plot_bgcolor="#16213e",
    font=dict(color="#e0e0e0", size=11),
    margin=dict(l=60, r=20, t=40, b=40),
    legend=dict(bgcolor="rgba(0,0,0,0.4)", x=0.01, y=0.99),
)
_GRID = "#2a2a4a"
_MODE_COLOURS = {"conf_ce": "#2ecc71", "mse": "#e74c3c"}


def _label(path: Path) -> str:
    return path.name if path.is_dir() else path.parent.name


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def loss_figure(runs: Sequence[str | Path]) -> go.Figure:
    """Training losses vs iteration in three panels (sup, con, total), one line per run."""
    frames = []
    for run in runs:
        df = read_metrics(run)
        if df.empty or "kind" not in df.columns:
            raise ConfigError(f"no metrics records in {run}")
        train = df[df["kind"] == "train"]
        if train.empty:
            raise ConfigError(f"no training records in {run}")
        frames.append((_label(Path(run)), train.sort_values("iter")))

    fig = make_subplots(rows=1, cols=3, subplot_titles=("supervised", "consistency", "total"))
    for label, train in frames:
        for col, term in enumerate(("sup", "con", "total"), start=1):
            fig.add_trace(go.Scatter(
                x=train["iter"], y=train[term],
                name=f"{label} {term}", mode="lines",
                line=dict(width=1.5),
            ), row=1, col=col)
    fig.update_layout(**_LAYOUT, hovermode="x unified")
    fig.update_xaxes(title_text="iteration", gridcolor=_GRID)
    fig.update_yaxes(gridcolor=_GRID)
    return fig


def load_grad_probe(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / GRAD_PROBE_FILE
    try:
        probe = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(path, "gradient probe file not found") from exc
    except json.JSONDecodeError as exc:
        raise DataError(path, f"invalid gradient probe JSON ({exc})") from exc
    if not probe.get("layers"):
        raise ConfigError(f"gradient probe {path} names no layers")
    return probe


def grad_probe_figure(probe: dict) -> go.Figure:
    """One group per named layer; one bar per loss mode present in the probe."""
    layers = list(probe["layers"])
    fig = go.Figure()
    for mode, colour in _MODE_COLOURS.items():
        if mode not in probe:
            continue
        fig.add_trace(go.Bar(
            x=layers,
            y=[probe[mode][layer] for layer in layers],
            name=mode,
            marker_color=colour,
        ))
    fig.update_layout(
        **_LAYOUT,
        barmode="group",
        yaxis=dict(title="mean |grad|", type="log", gridcolor=_GRID),
        xaxis=dict(title="layer", gridcolor=_GRID),
    )
    return fig


def miou_epoch_figure(runs: Sequence[str | Path]) -> go.Figure:
    fig = go.Figure()
    for run in runs:
        df = read_metrics(run)
        val = df[df["kind"] == "val"] if "kind" in df.columns else df
        if val.empty:
            raise ConfigError(f"no validation records in {run}")
        fig.add_trace(go.Scatter(
            x=val["epoch"] + 1, y=val["miou"],
            name=_label(Path(run)), mode="lines+markers",
            line=dict(width=1.5),
        ))
    fig.update_layout(
        **_LAYOUT,
        yaxis=dict(title="val mIoU", range=[0, 1], gridcolor=_GRID),
        xaxis=dict(title="epoch", gridcolor=_GRID),
        hovermode="x unified",
    )
    return fig


def _ratio_value(ratio: str) -> float:
    if "/" in ratio:
        num, den = ratio.split("/", 1)
        return float(num) / float(den)
    return float(ratio)


def miou_ratio_figure(table: pd.DataFrame) -> go.Figure:
    """mIoU ± std vs labelled ratio from an ablation table, one line per arm."""
    if table.empty:
        raise ConfigError("ablation table is empty")
    table = table[table["ratio"].astype(str) != "full"].copy()
    if table.empty:
        raise ConfigError("ablation table has no labelled-ratio rows")
    table["ratio_value"] = table["ratio"].astype(str).map(_ratio_value)

    fig = go.Figure()
    for arm in dict.fromkeys(table["arm"]):
        sub = table[table["arm"] == arm].sort_values("ratio_value")
        fig.add_trace(go.Scatter(
            x=sub["ratio_value"], y=sub["miou_mean"],
            error_y=dict(type="data", array=sub["miou_std"], visible=True),
            name=arm, mode="lines+markers",
        ))
    fig.update_layout(
        **_LAYOUT,
        xaxis=dict(title="labelled ratio", type="log", gridcolor=_GRID),
        yaxis=dict(title="mIoU", range=[0, 1], gridcolor=_GRID),
    )
    return fig


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def kaleido_available() -> bool:
    return importlib.util.find_spec("kaleido") is not None


def save_figure(fig: go.Figure, out_dir: str | Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    html = out_dir / f"{stem}.html"
    fig.write_html(html, include_plotlyjs="cdn")
    written = [html]
    if kaleido_available():
        png = out_dir / f"{stem}.png"
        fig.write_image(png)
        written.append(png)
    log.info("Chart → %s", ", ".join(str(p) for p in written))
    return written


def plot_inputs(paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """
    Emit every chart the given inputs support.

    Accepts run directories and metrics.jsonl files (loss + mIoU-vs-epoch
    charts, plus the gradient bars when a grad_probe.json sits beside them),
    grad_probe.json files and ablation.csv tables.
    """
    if not paths:
        raise ConfigError("plot needs at least one input file or run directory")
    runs: list[Path] = []
    written: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if not path.exists():
            raise DataError(path, "plot input not found")
        if path.suffix == ".csv":
            written += save_figure(miou_ratio_figure(pd.read_csv(path)), out_dir, f"miou_ratio_{path.stem}")
        elif path.name == GRAD_PROBE_FILE or (path.suffix == ".json" and "probe" in path.stem):
            written += save_figure(grad_probe_figure(load_grad_probe(path)), out_dir, f"grad_probe_{_label(path)}")
        else:
            runs.append(path)
            probe = (path if path.is_dir() else path.parent) / GRAD_PROBE_FILE
            if probe.exists():
                written += save_figure(grad_probe_figure(load_grad_probe(probe)), out_dir, f"grad_probe_{_label(path)}")

    if runs:
        written += save_figure(loss_figure(runs), out_dir, "loss")
        with_val = [r for r in runs if "val" in set(read_metrics(r).get("kind", []))]
        if with_val:
            written += save_figure(miou_epoch_figure(with_val), out_dir, "miou_epoch")
        else:
            log.warning("No validation records in the given runs — mIoU-vs-epoch chart skipped")
    return written
