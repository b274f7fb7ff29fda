"""
Run Artifact Export

Functions to write the files a run leaves behind: line-delimited metrics,
CSV tables, a formatted Excel workbook per stage, and an interactive HTML
figure of sweep curves.
"""

import io
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Mapping, Optional, Union

import pandas as pd
import plotly.graph_objects as go

from .formatting import sort_encoders

logger = logging.getLogger(__name__)

ENCODER_COLORS = {
    "vision": "#0d6efd",
    "text": "#198754",
    "fusion": "#fd7e14",
}

PathLike = Union[str, Path]


def write_jsonl(df: pd.DataFrame, path: PathLike) -> Path:
    """
    Write one JSON object per row, columns in frame order.

    Floats are written with 15 significant digits so reruns diff cleanly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(df) == 0:
        path.write_text("")
    else:
        df.to_json(path, orient="records", lines=True, double_precision=15)
    logger.info(f"Wrote {len(df)} records to {path}")
    return path


def write_json(document: Mapping, path: PathLike) -> Path:
    """Sorted-key, 2-space-indented JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    return path


def create_simple_csv_export(df: pd.DataFrame, path: Optional[PathLike] = None) -> str:
    """
    CSV text of a table, optionally also written to path.

    Returns:
        CSV string
    """
    text = df.to_csv(index=False)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
        logger.info(f"Wrote table {path}")
    return text


def create_excel_report(
    sheets: Mapping[str, pd.DataFrame],
    title: str,
    summary: Optional[Mapping[str, object]] = None,
) -> io.BytesIO:
    """
    Create a formatted Excel report with one sheet per table.

    Args:
        sheets: Sheet name -> table (names are truncated to Excel's 31 characters)
        title: Title written above the summary sheet
        summary: Optional flat key/value pairs for a leading 'Summary' sheet

    Returns:
        BytesIO object containing the Excel file
    """
    logger.info(f"Creating Excel report '{title}'...")
    output = io.BytesIO()

    with pd.ExcelWriter(output, engine="xlsxwriter") as writer:
        workbook = writer.book

        header_format = workbook.add_format({
            "bold": True,
            "bg_color": "#4472C4",
            "font_color": "white",
            "border": 1,
            "align": "center",
            "valign": "vcenter",
        })
        title_format = workbook.add_format({"bold": True, "font_size": 14, "align": "left"})
        number_format = workbook.add_format({"num_format": "0.000000", "align": "right"})

        if summary is not None:
            _create_summary_sheet(writer, title, summary, header_format, title_format)

        for name, df in sheets.items():
            _create_table_sheet(writer, name[:31], df, header_format, number_format)

    output.seek(0)
    logger.info("Excel report created successfully")
    return output


def _create_summary_sheet(writer, title, summary, header_format, title_format):
    """Key/value summary with the run title."""
    rows = [{"Field": k, "Value": v if isinstance(v, (int, float, str)) else json.dumps(v, sort_keys=True)}
            for k, v in summary.items()]
    summary_df = pd.DataFrame(rows, columns=["Field", "Value"])
    summary_df.to_excel(writer, sheet_name="Summary", index=False, startrow=2)

    worksheet = writer.sheets["Summary"]
    worksheet.write("A1", title, title_format)
    for col_num, value in enumerate(summary_df.columns.values):
        worksheet.write(2, col_num, value, header_format)
    worksheet.set_column("A:A", 30)
    worksheet.set_column("B:B", 60)
    worksheet.write(len(rows) + 4, 0, "Export Date:", header_format)
    worksheet.write(len(rows) + 4, 1, datetime.now().strftime("%Y-%m-%d %H:%M"))


def _create_table_sheet(writer, name, df, header_format, number_format):
    df.to_excel(writer, sheet_name=name, index=False, startrow=0)
    worksheet = writer.sheets[name]
    for col_num, value in enumerate(df.columns.values):
        worksheet.write(0, col_num, value, header_format)
    worksheet.set_column(0, max(len(df.columns) - 1, 0), 16, number_format)


def write_excel_report(path: PathLike, sheets: Mapping[str, pd.DataFrame], title: str,
                       summary: Optional[Mapping[str, object]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(create_excel_report(sheets, title, summary).getvalue())
    return path


def create_sweep_figure(table: pd.DataFrame, x: str = "fraction", y: str = "metric",
                        group: str = "encoder", title: str = "") -> go.Figure:
    """
    Metric-vs-fraction curves, one line per encoder.

    Args:
        table: Long table with columns x, y and group
    """
    fig = go.Figure()
    for name in sort_encoders(table[group].unique().tolist()):
        rows = table[table[group] == name].sort_values(x)
        fig.add_trace(go.Scatter(
            x=rows[x],
            y=rows[y],
            name=str(name),
            mode="lines+markers",
            line=dict(color=ENCODER_COLORS.get(name), width=2),
            marker=dict(size=6),
            hovertemplate=f"{name}: %{{y:.3f}}<extra></extra>",
        ))

    fig.update_layout(
        title=title,
        xaxis_title=x.replace("_", " ").title(),
        yaxis_title=y.replace("_", " ").title(),
        hovermode="x unified",
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        height=450,
        margin=dict(t=60, b=40),
    )
    return fig


def write_sweep_figure(path: PathLike, fig: go.Figure) -> Path:
    config = {
        "responsive": True,
        "displayModeBar": True,
        "displaylogo": False,
        "modeBarButtonsToRemove": ["lasso2d", "select2d"],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(fig.to_html(include_plotlyjs="cdn", config=config, div_id="sweep"))
    logger.info(f"Wrote figure {path}")
    return path
