"""Emulator accuracy metrics, global sensitivity analysis and comparison reports."""
from .metrics import max_rel_error, q2
from .morris import MorrisResult, morris_screen, morris_trajectories
from .report import Report, ReportRow, compare_report
from .sobol import SobolIndices, as_predictor, ishigami, ishigami_indices, mc_sobol

__all__ = [
    "q2", "max_rel_error", "SobolIndices", "mc_sobol", "as_predictor", "ishigami", "ishigami_indices",
    "MorrisResult", "morris_screen", "morris_trajectories", "Report", "ReportRow", "compare_report",
]
