"""Data-quality-driven streaming ML pipeline.

Scores streaming sensor windows across five quality dimensions, detects
distribution drift with an adaptive empirical-quantile test, retrains
quality-filtered inference models, and serves predictions with measured
end-to-end latency.
"""

__version__ = "0.1.0"
