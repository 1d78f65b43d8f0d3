"""Configuration, dataset registry, run persistence and the command line."""
