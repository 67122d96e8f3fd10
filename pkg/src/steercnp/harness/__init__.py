"""Datasets, audits, evaluation and the command line interface."""
