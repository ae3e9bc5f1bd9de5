"""Corpus generation, experiments, reports and the command line."""
