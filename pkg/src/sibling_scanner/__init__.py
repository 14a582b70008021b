"""Dual-stack sibling detection from TCP timestamp clocks."""
