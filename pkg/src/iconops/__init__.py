"""In-context operator networks for ODEs/PDEs at desk scale.

Synthetic corpora from classical solvers, key-value prompt construction,
a small masked encoder transformer, and an evaluation/benchmark harness.
"""

__version__ = "0.1.0"
