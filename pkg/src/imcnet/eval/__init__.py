"""Segmentation metrics and report writing."""
from imcnet.eval.metrics import (SequenceScore, Stats, aggregate, boundary_f, boundary_map,
                                 default_tolerance, region_j, score_sequence, statistics)
from imcnet.eval.report import evaluate_dirs, write_reports

__all__ = ["SequenceScore", "Stats", "aggregate", "boundary_f", "boundary_map", "default_tolerance",
           "region_j", "score_sequence", "statistics", "evaluate_dirs", "write_reports"]
