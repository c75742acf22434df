"""
Analysis module for correspondence quality.
Builds accuracy-versus-tolerance tables and draws them as static
(matplotlib + seaborn) or interactive (plotly) charts.
"""
from typing import Dict, Mapping, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from matcher import accuracy, avg_error

DEFAULT_EPS = tuple(np.round(np.linspace(0.0, 0.2, 21), 4))


def parse_eps_list(text: str) -> list:
    """
    Parse a comma-separated tolerance list such as "0.01,0.05".

    Raises:
        ValueError: If an entry is not a number in [0, 1]
    """
    values = []
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        value = float(part)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"tolerance {value} is outside [0, 1]")
        values.append(value)
    if not values:
        raise ValueError("no tolerance values given")
    return values


def accuracy_curve(match, gt, target, eps_list: Sequence[float] = DEFAULT_EPS) -> pd.DataFrame:
    """
    Accuracy at each tolerance.

    Returns:
        DataFrame with columns eps, acc (one row per tolerance, input order)
    """
    rows = [{'eps': float(eps), 'acc': accuracy(match, gt, target, eps)} for eps in eps_list]
    return pd.DataFrame(rows, columns=['eps', 'acc'])


def error_summary(match, gt, target) -> Dict[str, float]:
    return {'err': avg_error(match, gt, target)}


def combine_curves(curves: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    """Stack named curves into one long table with a `method` column."""
    frames = [curve.assign(method=name) for name, curve in curves.items()]
    if not frames:
        raise ValueError("No accuracy curves to combine.")
    return pd.concat(frames, ignore_index=True)


def plot_accuracy_curve(curves, title: str = "Correspondence accuracy"):
    """
    Line chart of accuracy against tolerance.

    Args:
        curves: a single accuracy_curve table or a {method: table} mapping

    Returns:
        matplotlib figure

    Raises:
        ValueError: If there is nothing to plot
    """
    data = combine_curves(curves if isinstance(curves, Mapping) else {'model': curves})
    if data.empty:
        raise ValueError("No accuracy data available for plotting.")

    sns.set_theme(style='whitegrid')
    fig, ax = plt.subplots(figsize=(7, 4.5))
    sns.lineplot(data=data, x='eps', y='acc', hue='method', marker='o',
                 palette=sns.color_palette("viridis", data['method'].nunique()), ax=ax)
    ax.set_title(title)
    ax.set_xlabel("tolerance (fraction of target diameter)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    fig.tight_layout()
    return fig


def save_accuracy_plot(curves, path: str, title: str = "Correspondence accuracy") -> str:
    """Write the chart as a PNG, or as interactive HTML when the path ends in .html."""
    if path.lower().endswith('.html'):
        with open(path, 'w', encoding='utf-8') as f:
            f.write(accuracy_curve_html(curves, title))
        return path
    fig = plot_accuracy_curve(curves, title)
    try:
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    return path


def accuracy_curve_figure(curves, title: str = "Correspondence accuracy (interactive)"):
    """Plotly figure of accuracy against tolerance."""
    import plotly.express as px
    data = combine_curves(curves if isinstance(curves, Mapping) else {'model': curves})
    fig = px.line(data, x='eps', y='acc', color='method', markers=True,
                  hover_data={'eps': ':.3f', 'acc': ':.3f'})
    fig.update_layout(title_text=title, yaxis={'range': [0, 1.02]})
    return fig


def accuracy_curve_html(curves, title: str = "Correspondence accuracy (interactive)") -> str:
    """Self-contained HTML for the interactive chart."""
    return accuracy_curve_figure(curves, title).to_html(include_plotlyjs='cdn', full_html=True)


def plot_training_metrics(metrics: pd.DataFrame):
    """Loss and validation accuracy per epoch from a metrics table."""
    if metrics.empty:
        raise ValueError("No training metrics available for plotting.")
    sns.set_theme(style='whitegrid')
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for column in ('loss_total', 'loss_cons', 'loss_map'):
        ax_loss.plot(metrics['epoch'], metrics[column], marker='o', label=column)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_title("training loss")
    ax_loss.legend()
    for column in ('val_acc_001', 'val_acc_005'):
        ax_acc.plot(metrics['epoch'], metrics[column], marker='o', label=column)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_title("validation accuracy")
    ax_acc.legend()
    fig.tight_layout()
    return fig


def save_training_plot(metrics: pd.DataFrame, path: str) -> str:
    fig = plot_training_metrics(metrics)
    try:
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    return path
