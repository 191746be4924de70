"""Predicting moral foundations from music-genre preferences.

Factor-analytic genre embeddings, the generalist/specialist (GS) score,
gradient-boosted trees with exact TreeSHAP attribution, and the EX1-EX6
cross-validated experiment grid, with a synthetic-survey generator for
end-to-end checks.
"""

__version__ = "0.1.0"
