"""Iris centre localisation: segmentation and heatmap-regression pipelines
on a minimal from-scratch autodiff engine, with a synthetic data generator,
the full evaluation metric suite, and a train/eval/predict CLI."""

__version__ = "0.1.0"
