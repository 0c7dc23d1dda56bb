"""Experiment harness: config loading, datasets, metrics, checkpoints, CLI."""
