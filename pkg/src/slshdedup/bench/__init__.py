"""Desk-scale benchmarks: distortion matrices, timing curves, QoS."""
