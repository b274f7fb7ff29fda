"""
Formatting Utilities

Functions for formatting parameter counts, fractions and metric tables for display.
"""

from typing import Dict, List, Mapping, Union

import pandas as pd

# Encoder ordering convention: vision, text, fusion, then anything else alphabetically
ENCODER_ORDER = [
    "vision",
    "text",
    "fusion",
    "fusion_self_heads",
    "fusion_cross_heads",
    "overall",
]


def sort_encoders(names: List[str]) -> List[str]:
    """
    Sort encoder / group names according to the standard convention.

    Args:
        names: Encoder or report-group names

    Returns:
        Sorted list of names
    """
    known = sorted((n for n in names if n in ENCODER_ORDER), key=ENCODER_ORDER.index)
    others = sorted(n for n in names if n not in ENCODER_ORDER)
    return known + others


def format_percentage(
    value: Union[float, pd.Series],
    decimals: int = 1,
    include_sign: bool = False,
) -> Union[str, pd.Series]:
    """
    Format a fraction (0.25) as a percentage string ("25.0%").

    Args:
        value: Fraction or Series of fractions
        decimals: Number of decimal places
        include_sign: Whether to include + sign for positive values

    Returns:
        Formatted string or Series
    """
    if isinstance(value, pd.Series):
        return value.apply(lambda x: _format_single_pct(x, decimals, include_sign))
    return _format_single_pct(value, decimals, include_sign)


def _format_single_pct(value: float, decimals: int, include_sign: bool) -> str:
    """Helper function to format a single fraction."""
    if pd.isna(value):
        return "N/A"

    formatted = f"{value * 100:.{decimals}f}%"

    if include_sign and value > 0:
        formatted = "+" + formatted

    return formatted


def format_param_count(value: Union[int, float], decimals: int = 1) -> str:
    """
    Format parameter / MAC counts with K, M, B suffixes.

    Args:
        value: Count to format
        decimals: Number of decimal places

    Returns:
        Formatted string (e.g., "1.5M")
    """
    if pd.isna(value):
        return "N/A"

    abs_value = abs(value)
    sign = "-" if value < 0 else ""

    if abs_value >= 1_000_000_000:
        return f"{sign}{abs_value / 1_000_000_000:.{decimals}f}B"
    elif abs_value >= 1_000_000:
        return f"{sign}{abs_value / 1_000_000:.{decimals}f}M"
    elif abs_value >= 1_000:
        return f"{sign}{abs_value / 1_000:.{decimals}f}K"
    else:
        return f"{sign}{int(abs_value)}"


def format_metrics(metrics: Mapping[str, float], decimals: int = 4) -> str:
    """
    Format a metrics dictionary as aligned "name: value" lines.

    Args:
        metrics: Metric name -> value

    Returns:
        Multi-line string
    """
    if not metrics:
        return ""
    width = max(len(k) for k in metrics)
    return "\n".join(f"{k:<{width}} : {v:.{decimals}f}" for k, v in metrics.items())


def format_cost_table(report: Dict[str, Dict[str, float]]) -> pd.DataFrame:
    """
    Human-readable copy of a cost report (one row per encoder).

    Counts get K/M suffixes and removed fractions become percentages.
    """
    df = pd.DataFrame.from_dict(report, orient="index")
    df = df.loc[sort_encoders(list(df.index))]
    result = df.copy()
    for col in ("parameters", "gated", "gated_full", "retained", "removed", "macs"):
        if col in result.columns:
            result[col] = result[col].apply(format_param_count)
    if "removed_fraction" in result.columns:
        result["removed_fraction"] = format_percentage(result["removed_fraction"])
    result.index.name = "encoder"
    return result
