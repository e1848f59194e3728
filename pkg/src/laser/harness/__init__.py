"""Experiment orchestration: configs, runs, memory accounting, scans, metrics."""
