"""
report_excel.py: Strategy comparison -> Excel workbook (xlsx)

Sheets:
  Comparison   one row per run directory: final accuracy mean ± std,
               cumulative uplink / downlink bits and MB, ratio against FA-real
  Accuracy     per-round mean test accuracy, one column per run (long runs
               stay readable with frozen headers)

Usage:
    python cli.py compare runs/full runs/biml runs/uponly --xlsx comparison.xlsx

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from experiment import SUMMARY_NAME, ComparisonRow, compare_runs, read_csv
from federation import FA_REAL

logger = logging.getLogger(__name__)

# ============================================================
# Styles
# ============================================================
HEADER_FILL = PatternFill("solid", fgColor="232F3E")
HEADER_FONT = Font(bold=True, color="FFFFFF")
BEST_FILL = PatternFill("solid", fgColor="E2F0D9")
THIN = Side(style="thin", color="BFBFBF")
CELL_BORDER = Border(left=THIN, right=THIN, top=THIN, bottom=THIN)

COMPARISON_HEADERS = [
    "run", "strategy", "seeds", "rounds", "accuracy mean (%)", "accuracy std (%)",
    "uplink bits", "downlink bits", "uplink MB", "downlink MB", "uplink vs FA-real",
]


class ComparisonWorkbook:
    """Builds the comparison workbook for a set of run directories.

    Usage:
        ComparisonWorkbook(["runs/full", "runs/biml"]).generate("comparison.xlsx")
    """

    def __init__(self, run_dirs: Sequence, rows: Optional[List[ComparisonRow]] = None):
        self.run_dirs = [Path(d) for d in run_dirs]
        self.rows = rows if rows is not None else compare_runs(self.run_dirs)

    # ==========================================================
    # Sheets
    # ==========================================================
    def _header(self, ws, headers: Sequence[str]) -> None:
        for col, name in enumerate(headers, start=1):
            cell = ws.cell(row=1, column=col, value=name)
            cell.fill = HEADER_FILL
            cell.font = HEADER_FONT
            cell.alignment = Alignment(horizontal="center", vertical="center", wrap_text=True)
            cell.border = CELL_BORDER
        ws.freeze_panes = "B2"

    def _fa_real_uplink(self) -> Optional[int]:
        for r in self.rows:
            if r.strategy == FA_REAL:
                return r.uplink_bits_cum
        return None

    def _comparison_sheet(self, ws) -> None:
        ws.title = "Comparison"
        self._header(ws, COMPARISON_HEADERS)
        baseline = self._fa_real_uplink()
        best = max((r.final_accuracy_mean for r in self.rows), default=None)
        for i, r in enumerate(self.rows, start=2):
            ratio = baseline / r.uplink_bits_cum if baseline and r.uplink_bits_cum else None
            values = [
                r.run, r.strategy, r.seeds, r.rounds,
                round(100 * r.final_accuracy_mean, 2), round(100 * r.final_accuracy_std, 2),
                r.uplink_bits_cum, r.downlink_bits_cum,
                round(r.uplink_bits_cum / 8e6, 3), round(r.downlink_bits_cum / 8e6, 3),
                round(ratio, 2) if ratio is not None else "-",
            ]
            for col, value in enumerate(values, start=1):
                cell = ws.cell(row=i, column=col, value=value)
                cell.border = CELL_BORDER
                if r.final_accuracy_mean == best:
                    cell.fill = BEST_FILL
        widths = [24, 20, 8, 8, 16, 16, 16, 16, 12, 12, 16]
        for col, width in enumerate(widths, start=1):
            ws.column_dimensions[get_column_letter(col)].width = width

    def _accuracy_sheet(self, ws) -> None:
        ws.title = "Accuracy"
        curves: Dict[str, Dict[int, float]] = {}
        for run_dir, row in zip(self.run_dirs, self.rows):
            summary = read_csv(run_dir / SUMMARY_NAME)
            curves[row.run] = {int(s["round"]): float(s["test_accuracy_mean"]) for s in summary}
        self._header(ws, ["round"] + list(curves))
        rounds = sorted({t for curve in curves.values() for t in curve})
        for i, t in enumerate(rounds, start=2):
            ws.cell(row=i, column=1, value=t)
            for col, curve in enumerate(curves.values(), start=2):
                if t in curve:
                    ws.cell(row=i, column=col, value=round(100 * curve[t], 2))
        ws.column_dimensions["A"].width = 8
        for col in range(2, len(curves) + 2):
            ws.column_dimensions[get_column_letter(col)].width = 18

    # ==========================================================
    # Save
    # ==========================================================
    def generate(self, out_path) -> Path:
        wb = Workbook()
        self._comparison_sheet(wb.active)
        self._accuracy_sheet(wb.create_sheet())
        out_path = Path(out_path)
        wb.save(out_path)
        logger.info(f"comparison workbook saved: {out_path} ({len(self.rows)} runs)")
        return out_path
