"""Utility helpers for boxpretrain."""
