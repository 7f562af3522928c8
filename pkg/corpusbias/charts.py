# Chart Module
# Plotly figures for cumulative DR curves and SOCT results

from pathlib import Path
from typing import Mapping, Optional

import pandas as pd
import plotly.graph_objects as go
from loguru import logger

from .config import ChartConfig


def _apply_theme(fig: go.Figure, title: str, x_title: str, y_title: str) -> go.Figure:
    fig.update_layout(
        title={"text": title, "font": {"color": ChartConfig.COLORS["text"], "size": 20}, "x": 0.5},
        plot_bgcolor=ChartConfig.COLORS["background"],
        paper_bgcolor=ChartConfig.COLORS["background"],
        font={"color": ChartConfig.COLORS["text"]},
        height=ChartConfig.HEIGHT,
        xaxis_title=x_title,
        yaxis_title=y_title,
    )
    fig.update_xaxes(showgrid=True, gridwidth=1, gridcolor=ChartConfig.COLORS["grid"], showline=True)
    fig.update_yaxes(showgrid=True, gridwidth=1, gridcolor=ChartConfig.COLORS["grid"], showline=True)
    return fig


class ChartCreator:
    """Dark-theme figures for run reports"""

    @staticmethod
    def cumulative_dr_figure(
        series: Mapping[str, pd.DataFrame], convergence: Optional[Mapping[str, Optional[int]]] = None
    ) -> Optional[go.Figure]:
        """One DR-vs-list-length line per attribute, with a marker at the convergence length"""
        try:
            fig = go.Figure()
            palette = ChartConfig.COLORS["series"]
            for i, (attribute, frame) in enumerate(sorted(series.items())):
                color = palette[i % len(palette)]
                fig.add_trace(
                    go.Scatter(
                        x=frame["list_length"],
                        y=frame["dr"],
                        mode="lines",
                        name=attribute,
                        line={"color": color, "width": 2},
                    )
                )
                length = (convergence or {}).get(attribute)
                if length is not None:
                    point = frame[frame["list_length"] == length]
                    fig.add_trace(
                        go.Scatter(
                            x=point["list_length"],
                            y=point["dr"],
                            mode="markers",
                            name=f"{attribute} converged",
                            marker={"color": color, "size": 10, "symbol": "diamond"},
                        )
                    )
            return _apply_theme(fig, "Cumulative DR by word-list length", "Words per group", "DR")
        except (KeyError, ValueError) as e:
            logger.error(f"Cumulative DR chart failed: {e}")
            return None

    @staticmethod
    def soct_figure(per_template: pd.DataFrame) -> Optional[go.Figure]:
        """Stacked female/male/neutral completion counts per template"""
        try:
            fig = go.Figure()
            for label, color in zip(("female", "male", "neutral"), ChartConfig.COLORS["series"]):
                fig.add_trace(go.Bar(x=per_template["template"], y=per_template[label], name=label, marker_color=color))
            fig.update_layout(barmode="stack")
            return _apply_theme(fig, "Occupation completion probe", "Template", "Completions")
        except (KeyError, ValueError) as e:
            logger.error(f"SOCT chart failed: {e}")
            return None

    @staticmethod
    def save(fig: go.Figure, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.write_html(str(path), include_plotlyjs="cdn")
        return path
