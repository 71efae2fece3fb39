"""Policies, alignment objectives and the offline training loop."""
