"""Environments, scalar feedback and file loaders."""
