"""Experiment harness: toy data, configuration, evaluation and the command line."""
