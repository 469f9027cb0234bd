"""Experiment configuration, metrics, plotting and the command-line interface."""
