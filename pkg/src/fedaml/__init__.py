"""Federated transaction-graph analytics toolkit.

Detects coordinated illicit transaction patterns across simulated
institutions without pooling raw data, explains detections as account
clusters via cross-institution personalized PageRank, and converts scores
into intervention decisions through learned, globally coordinated thresholds.
"""

__version__ = "0.1.0"
