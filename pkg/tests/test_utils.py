"""
Unit tests for formatting and artifact export
"""

import json

import pytest
import numpy as np
import pandas as pd
import sys
from pathlib import Path

from openpyxl import load_workbook

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils.export import (
    create_excel_report,
    create_simple_csv_export,
    create_sweep_figure,
    write_excel_report,
    write_json,
    write_jsonl,
    write_sweep_figure,
)
from src.utils.formatting import (
    format_cost_table,
    format_metrics,
    format_param_count,
    format_percentage,
    sort_encoders,
)


@pytest.fixture
def sweep_table():
    """Head sweep results for two encoders."""
    return pd.DataFrame({
        "encoder": ["text", "text", "vision", "vision"],
        "fraction": [0.5, 0.0, 0.0, 0.5],
        "metric": [0.6, 0.9, 0.95, 0.4],
    })


class TestFormatting:
    """Display helpers."""

    def test_sort_encoders(self):
        """Known groups follow the pipeline order; others come last, alphabetically."""
        assert sort_encoders(["overall", "zeta", "fusion", "vision", "alpha", "text"]) == \
            ["vision", "text", "fusion", "overall", "alpha", "zeta"]

    def test_format_percentage(self):
        assert format_percentage(0.25) == "25.0%"
        assert format_percentage(0.1234, decimals=2, include_sign=True) == "+12.34%"
        assert format_percentage(np.nan) == "N/A"
        series = format_percentage(pd.Series([0.5, 0.0]))
        assert series.tolist() == ["50.0%", "0.0%"]

    def test_format_param_count(self):
        assert format_param_count(999) == "999"
        assert format_param_count(1_500) == "1.5K"
        assert format_param_count(2_500_000) == "2.5M"
        assert format_param_count(-3_000_000_000) == "-3.0B"

    def test_format_metrics(self):
        text = format_metrics({"tr_r1": 0.5, "metric": 0.25})
        assert text.splitlines() == ["tr_r1  : 0.5000", "metric : 0.2500"]
        assert format_metrics({}) == ""

    def test_format_cost_table(self):
        report = {
            "overall": {"parameters": 3_000, "removed_fraction": 0.25},
            "text": {"parameters": 1_000, "removed_fraction": 0.5},
            "vision": {"parameters": 2_000, "removed_fraction": 0.0},
        }
        table = format_cost_table(report)
        assert list(table.index) == ["vision", "text", "overall"]
        assert table.loc["text", "parameters"] == "1.0K"
        assert table.loc["overall", "removed_fraction"] == "25.0%"


class TestExport:
    """Files written by a run."""

    def test_jsonl_rows(self, tmp_path):
        """One JSON object per row, in column order."""
        df = pd.DataFrame({"step": [1, 2], "loss": [0.5, 0.25]})
        path = write_jsonl(df, tmp_path / "metrics.jsonl")
        lines = path.read_text().splitlines()
        assert [json.loads(line) for line in lines] == [{"step": 1, "loss": 0.5}, {"step": 2, "loss": 0.25}]
        assert lines[0].startswith('{"step"')

    def test_empty_jsonl(self, tmp_path):
        path = write_jsonl(pd.DataFrame(), tmp_path / "eval.jsonl")
        assert path.read_text() == ""

    def test_json_document(self, tmp_path):
        path = write_json({"b": 1, "a": [1, 2]}, tmp_path / "out" / "summary.json")
        assert path.read_text().startswith('{\n  "a"')
        assert path.read_text().endswith("}\n")

    def test_csv_export(self, sweep_table, tmp_path):
        text = create_simple_csv_export(sweep_table, tmp_path / "sweep.csv")
        assert text.splitlines()[0] == "encoder,fraction,metric"
        pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "sweep.csv"), sweep_table)

    def test_excel_report(self, sweep_table, tmp_path):
        """Summary first, then one sheet per table; long names are truncated."""
        long_name = "A sheet name well past the limit"
        path = write_excel_report(tmp_path / "report.xlsx", {"Sweep": sweep_table, long_name: sweep_table},
                                  title="Head sweep", summary={"seed": 3, "density": {"vision": 0.5}})
        workbook = load_workbook(path)
        assert workbook.sheetnames == ["Summary", "Sweep", long_name[:31]]
        summary = workbook["Summary"]
        assert summary["A1"].value == "Head sweep"
        assert summary["A4"].value == "seed" and summary["B4"].value == 3
        assert json.loads(summary["B5"].value) == {"vision": 0.5}
        sweep = workbook["Sweep"]
        assert [c.value for c in sweep[1]] == ["encoder", "fraction", "metric"]
        assert sweep.max_row == len(sweep_table) + 1

    def test_excel_without_summary(self, sweep_table):
        buffer = create_excel_report({"Sweep": sweep_table}, title="Sweep")
        assert load_workbook(buffer).sheetnames == ["Sweep"]

    def test_sweep_figure(self, sweep_table, tmp_path):
        """One trace per encoder in pipeline order, sorted along x."""
        fig = create_sweep_figure(sweep_table, title="Sensitivity")
        assert [trace.name for trace in fig.data] == ["vision", "text"]
        assert list(fig.data[1].x) == [0.0, 0.5]
        assert list(fig.data[1].y) == [0.9, 0.6]
        path = write_sweep_figure(tmp_path / "sweep.html", fig)
        assert 'id="sweep"' in path.read_text()
