"""Synthetic benchmark construction."""
