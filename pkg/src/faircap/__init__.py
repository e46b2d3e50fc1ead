"""Batch toolkit for auditing and mitigating demographic bias in LLM-based
ICU mortality prediction: cohort tooling, metric and fairness kernels, a
case repository with analog retrieval, four prompting strategies, and a
deterministic mock predictor family for offline runs.
"""

__version__ = "0.1.0"
