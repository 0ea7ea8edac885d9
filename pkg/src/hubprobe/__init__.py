"""Probe multimodal hub encoders: pre-train on retrieval tasks, diagnose
with the FOIL classifier, and compare representation spaces."""

__version__ = "0.1.0"
