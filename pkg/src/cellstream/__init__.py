"""Synthetic blood-cell video benchmark with curriculum learning and multi-view prediction."""
