"""Diagnostics for confidence-gated abstention over ranked decision systems.

The package answers one deployment question: if we let a ranked decision
system act only when its confidence clears a threshold, does quality improve
monotonically as the threshold rises?  It provides the two verifiable
conditions behind that question (rank-accuracy alignment, C1, and no
inversion zones, C2), abstention-curve and calibration diagnostics, a
matrix-factorization backbone with several confidence signals, residual-
exception instability experiments, sliding-window threshold recalibration,
and a synthetic generator for worlds with controllable structural vs.
contextual uncertainty.
"""

__version__ = "0.1.0"
