"""Command line, HTTP service and evaluation metrics."""
