"""Affect-aware knowledge tracing: factor mining, affect clustering, graph attention and an LSTM tracer."""

__version__ = "0.1.0"
