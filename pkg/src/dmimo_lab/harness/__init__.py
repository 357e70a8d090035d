"""Experiment recipes, configuration and the ``dmimo-lab`` CLI."""
