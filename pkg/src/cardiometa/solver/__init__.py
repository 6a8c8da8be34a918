"""Integration of lumped networks to a periodic state and biomarker extraction."""
from .biomarkers import (BiomarkerError, BiomarkerSet, evaluate_biomarker, extract_biomarkers,
                         format_biomarkers, write_trajectory_csv)
from .integrate import CycleSolution, SolverConfig, SolverError, Trajectory, integrate, run_to_periodic

__all__ = [
    "BiomarkerError", "BiomarkerSet", "CycleSolution", "SolverConfig", "SolverError", "Trajectory",
    "evaluate_biomarker", "extract_biomarkers", "format_biomarkers", "integrate", "run_to_periodic",
    "write_trajectory_csv",
]
