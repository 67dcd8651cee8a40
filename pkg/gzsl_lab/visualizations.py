"""
Visualizations
==============
Plotly renderings of the exported CSVs: affinity heatmaps, gamma sweeps and
seen/unseen score distributions.
"""

from pathlib import Path
from typing import Dict, Optional

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

SEEN_COLOR = "#1f77b4"
UNSEEN_COLOR = "#d62728"
H_COLOR = "#2ca02c"


def _empty_figure(message: str = "No data available") -> go.Figure:
    fig = go.Figure()
    fig.add_annotation(
        text=message,
        xref="paper", yref="paper",
        x=0.5, y=0.5,
        showarrow=False,
        font=dict(size=16)
    )
    return fig


def create_affinity_heatmaps(frames: Dict[str, pd.DataFrame], sample: Optional[int] = None) -> go.Figure:
    """
    One heatmap per (module, loop) affinity matrix.

    Args:
        frames: Affinity frames keyed affinity_z{z}_r{r}, attributes by patches
        sample: Sample index shown in the title

    Returns:
        Plotly Figure object
    """
    if not frames:
        return _empty_figure("No affinity matrices (IMSE disabled)")

    names = list(frames)
    fig = make_subplots(rows=1, cols=len(names), subplot_titles=names, horizontal_spacing=0.04)
    for col, name in enumerate(names, start=1):
        frame = frames[name]
        fig.add_trace(
            go.Heatmap(
                z=frame.values,
                x=list(frame.columns),
                y=list(frame.index),
                colorscale="Viridis",
                showscale=col == len(names),
                hovertemplate="%{y} / %{x}: %{z:.4f}<extra></extra>",
            ),
            row=1, col=col,
        )
    title = "Attribute-patch affinities"
    if sample is not None:
        title += f" (sample {sample})"
    fig.update_layout(
        title=title,
        height=max(400, 18 * len(frames[names[0]].index)),
        margin=dict(l=100, r=40, t=70, b=50),
    )
    return fig


def create_sweep_chart(sweep: pd.DataFrame, best_gamma: Optional[float] = None) -> go.Figure:
    """U, S and H (percent) against the calibration gamma."""
    if sweep.empty:
        return _empty_figure()

    fig = go.Figure()
    for column, color in (("U", UNSEEN_COLOR), ("S", SEEN_COLOR), ("H", H_COLOR)):
        fig.add_trace(go.Scatter(
            x=sweep["gamma"],
            y=100 * sweep[column],
            mode="lines+markers",
            name=column,
            line=dict(color=color, width=2),
        ))
    if best_gamma is not None:
        fig.add_vline(x=best_gamma, line_dash="dash", line_color="gray",
                      annotation_text=f"best H at {best_gamma:.3f}")
    fig.update_layout(
        title="Calibrated stacking sweep",
        xaxis_title="gamma",
        yaxis_title="Accuracy (%)",
        hovermode="x unified",
        height=450,
    )
    return fig


def create_distribution_chart(distributions: pd.DataFrame, summary: Optional[Dict[str, float]] = None) -> go.Figure:
    """Histograms of the per-sample maximum seen and unseen scores."""
    if distributions.empty:
        return _empty_figure()

    fig = go.Figure()
    fig.add_trace(go.Histogram(x=distributions["max_seen"], name="max seen score",
                               marker_color=SEEN_COLOR, opacity=0.6))
    fig.add_trace(go.Histogram(x=distributions["max_unseen"], name="max unseen score",
                               marker_color=UNSEEN_COLOR, opacity=0.6))
    title = "Seen vs unseen score distribution"
    if summary:
        title += (
            f" (alpha_s={summary['alpha_s']:.3f}, alpha_u={summary['alpha_u']:.3f}, "
            f"beta_s={summary['beta_s']:.3f}, beta_u={summary['beta_u']:.3f})"
        )
    fig.update_layout(barmode="overlay", title=title, xaxis_title="score", yaxis_title="samples", height=450)
    return fig


def save_html(fig: go.Figure, path) -> Path:
    path = Path(path)
    fig.write_html(str(path), include_plotlyjs="cdn")
    return path
